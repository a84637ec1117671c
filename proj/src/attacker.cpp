#include "advvae/attacker.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "advvae/error.hpp"
#include "advvae/metrics.hpp"
#include "advvae/optim.hpp"
#include "advvae/trainer.hpp"
#include "text_util.hpp"

namespace advvae {

void AttackerConfig::validate() const {
    if (heads < 1) throw ConfigError("attacker: need at least one head");
    if (epochs < 1) throw ConfigError("attacker: epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("attacker: batch size must be >= 1");
    if (!(lr > 0.0)) throw ConfigError("attacker: learning rate must be > 0");
    if (!(validation_fraction >= 0.0 && validation_fraction < 1.0)) {
        throw ConfigError("attacker: validation fraction must lie in [0, 1)");
    }
    for (std::size_t h : hidden) {
        if (h < 1) throw ConfigError("attacker: hidden sizes must be >= 1");
    }
}

LabeledLatents extract_latents(const ModelParameters& params, const InteractionMatrix& matrix,
                               std::span<const std::size_t> users, std::span<const EvalSplit> splits) {
    if (params.config.items != matrix.items()) {
        throw ConfigError("extract_latents: checkpoint expects " + std::to_string(params.config.items) +
                          " items, dataset has " + std::to_string(matrix.items()));
    }
    if (!splits.empty() && splits.size() != users.size()) {
        throw DimensionError("extract_latents: splits do not align with users");
    }
    LabeledLatents out;
    out.users.assign(users.begin(), users.end());
    const Tensor x = splits.empty() ? matrix.dense_rows(users) : input_rows(matrix, splits);
    out.latents = infer(params, x).mu;
    for (std::size_t u : users) out.labels.push_back(matrix.labels[u]);
    return out;
}

namespace {

struct Labeled {
    Tensor x;
    std::vector<int> y;
};

Labeled known_only(const LabeledLatents& data, std::vector<std::size_t>* kept_rows = nullptr) {
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < data.labels.size(); ++i) {
        if (data.labels[i] != kUnknownLabel) rows.push_back(i);
    }
    const std::size_t d = data.latents.cols();
    Labeled out{Tensor::matrix(rows.size(), d), {}};
    for (std::size_t r = 0; r < rows.size(); ++r) {
        const auto src = data.latents.row_span(rows[r]);
        std::copy(src.begin(), src.end(), out.x.row_span(r).begin());
        out.y.push_back(data.labels[rows[r]]);
    }
    if (kept_rows) *kept_rows = std::move(rows);
    return out;
}

Labeled take_rows(const Labeled& src, std::span<const std::size_t> rows) {
    const std::size_t d = src.x.cols();
    Labeled out{Tensor::matrix(rows.size(), d), {}};
    for (std::size_t r = 0; r < rows.size(); ++r) {
        const auto row = src.x.row_span(rows[r]);
        std::copy(row.begin(), row.end(), out.x.row_span(r).begin());
        out.y.push_back(src.y[rows[r]]);
    }
    return out;
}

using Mlp = std::vector<Dense>;

Mlp init_head(std::size_t in, const std::vector<std::size_t>& hidden, std::size_t classes, std::uint64_t seed,
              std::size_t head) {
    Mlp layers;
    std::size_t width = in;
    std::vector<std::size_t> sizes = hidden;
    sizes.push_back(classes);
    for (std::size_t l = 0; l < sizes.size(); ++l) {
        Rng rng(seed, Stream::Attacker, (static_cast<std::uint64_t>(head + 1) << 16) + l);
        Dense layer{Tensor::matrix(width, sizes[l]), Tensor::matrix(1, sizes[l])};
        const double limit = std::sqrt(6.0 / static_cast<double>(width + sizes[l]));
        for (auto& w : layer.weight.values()) w = (2.0 * rng.uniform() - 1.0) * limit;
        layers.push_back(std::move(layer));
        width = sizes[l];
    }
    return layers;
}

struct BoundMlp {
    std::vector<BoundLayer> layers;
};

Var forward(Tape& tape, const Mlp& mlp, const Tensor& x, BoundMlp* bound) {
    Var h = tape.constant(x);
    for (std::size_t l = 0; l < mlp.size(); ++l) {
        const Var w = tape.parameter(mlp[l].weight);
        const Var b = tape.parameter(mlp[l].bias);
        if (bound) bound->layers.push_back({w, b});
        h = ops::add_row(ops::matmul(h, w), b);
        if (l + 1 < mlp.size()) h = ops::relu(h);
    }
    return h;
}

std::vector<int> predict(const Mlp& mlp, const Tensor& x) {
    Tape tape;
    const Tensor logits = forward(tape, mlp, x, nullptr).value();
    std::vector<int> out;
    for (std::size_t r = 0; r < logits.rows(); ++r) {
        const auto row = logits.row_span(r);
        out.push_back(static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin()));
    }
    return out;
}

struct Scores {
    double acc = std::nan("");
    double bacc = std::nan("");
};

Scores score(const Mlp& mlp, const Labeled& data, std::size_t classes, std::vector<int>* predicted = nullptr) {
    Scores s;
    if (data.y.empty()) {
        return s;
    }
    std::vector<int> pred = predict(mlp, data.x);
    const ConfusionCounts counts = ConfusionCounts::from(data.y, pred, classes);
    s.acc = accuracy(counts);
    if (std::all_of(counts.total.begin(), counts.total.end(), [](std::size_t t) { return t > 0; })) {
        s.bacc = balanced_accuracy(counts);
    }
    if (predicted) *predicted = std::move(pred);
    return s;
}

}  // namespace

AttackReport attack(const LabeledLatents& train, const LabeledLatents& eval, std::size_t classes,
                    const AttackerConfig& config) {
    config.validate();
    if (train.latents.cols() != eval.latents.cols()) {
        throw DimensionError("attack: train and eval latents differ in width");
    }
    const Labeled pool = known_only(train);
    std::vector<std::size_t> eval_rows;
    const Labeled test = known_only(eval, &eval_rows);
    {
        std::vector<int> seen(pool.y);
        std::sort(seen.begin(), seen.end());
        if (std::unique(seen.begin(), seen.end()) - seen.begin() < 2) {
            throw DataError("attack undefined: training labels contain fewer than two classes");
        }
    }

    // Stratified hold-out for checkpoint selection.
    std::vector<std::vector<std::size_t>> by_class(classes);
    for (std::size_t i = 0; i < pool.y.size(); ++i) {
        if (pool.y[i] < 0 || static_cast<std::size_t>(pool.y[i]) >= classes) {
            throw ContractError("attack: label out of range");
        }
        by_class[static_cast<std::size_t>(pool.y[i])].push_back(i);
    }
    Rng split_rng(config.seed, Stream::Attacker, 0);
    std::vector<std::size_t> fit_rows, holdout_rows;
    for (auto& members : by_class) {
        split_rng.shuffle(members);
        std::size_t hold = static_cast<std::size_t>(std::llround(config.validation_fraction * members.size()));
        if (config.validation_fraction > 0.0 && members.size() >= 2) hold = std::max<std::size_t>(hold, 1);
        hold = std::min(hold, members.size() - std::min<std::size_t>(members.size(), 1));
        holdout_rows.insert(holdout_rows.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(hold));
        fit_rows.insert(fit_rows.end(), members.begin() + static_cast<std::ptrdiff_t>(hold), members.end());
    }
    std::sort(fit_rows.begin(), fit_rows.end());
    std::sort(holdout_rows.begin(), holdout_rows.end());
    const Labeled holdout = take_rows(pool, holdout_rows);
    const Labeled fit_base = take_rows(pool, fit_rows);

    // Same minority upsampling as the recommender's training folds.
    std::vector<std::size_t> fit_index(fit_base.y.size());
    std::iota(fit_index.begin(), fit_index.end(), 0);
    Rng up_rng(config.seed, Stream::Upsample, 0);
    const std::vector<std::size_t> balanced = upsample_minority(fit_index, fit_base.y, classes, up_rng);

    const std::size_t d = train.latents.cols();
    const std::vector<std::size_t> hidden = config.hidden.empty() ? std::vector<std::size_t>{d} : config.hidden;
    const AdamConfig adam_cfg{config.lr, 0.9, 0.999, 1e-8, config.weight_decay};

    AttackReport report;
    report.heads.resize(config.heads);
    std::vector<Mlp> selected(config.heads);
    for (std::size_t h = 0; h < config.heads; ++h) {
        Mlp mlp = init_head(d, hidden, classes, config.seed, h);
        AdamState adam;
        double best_val = -1.0;
        for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
            std::vector<std::size_t> order = balanced;
            Rng shuffle_rng(config.seed, Stream::Shuffle, (static_cast<std::uint64_t>(h + 1) << 32) + epoch);
            shuffle_rng.shuffle(order);
            for (std::size_t begin = 0; begin < order.size(); begin += config.batch_size) {
                const std::size_t end = std::min(order.size(), begin + config.batch_size);
                const Labeled batch = take_rows(fit_base, std::span(order).subspan(begin, end - begin));
                Tape tape;
                BoundMlp bound;
                const Var logits = forward(tape, mlp, batch.x, &bound);
                const Var loss = loss_adversarial(logits, batch.y);
                tape.backward(loss);
                std::vector<Tensor*> slots;
                std::vector<Tensor> grads;
                for (std::size_t l = 0; l < mlp.size(); ++l) {
                    slots.push_back(&mlp[l].weight);
                    slots.push_back(&mlp[l].bias);
                    grads.push_back(bound.layers[l].weight.grad());
                    grads.push_back(bound.layers[l].bias.grad());
                }
                adam_step(slots, grads, adam, adam_cfg);
            }
            // Without a usable hold-out the final epoch wins.
            const double val = score(mlp, holdout, classes).bacc;
            const double key = std::isnan(val) ? 0.0 : val;
            if (key > best_val || std::isnan(val)) {
                best_val = key;
                selected[h] = mlp;
                report.heads[h].selected_epoch = epoch;
                report.heads[h].validation_bacc = val;
            }
        }
        const Scores tr = score(selected[h], fit_base, classes);
        const Scores te = score(selected[h], test, classes);
        report.heads[h].train_acc = tr.acc;
        report.heads[h].train_bacc = tr.bacc;
        report.heads[h].test_acc = te.acc;
        report.heads[h].test_bacc = te.bacc;
    }

    std::optional<std::size_t> best;
    for (std::size_t h = 0; h < config.heads; ++h) {
        const double b = report.heads[h].test_bacc;
        if (std::isnan(b)) continue;
        if (!best || b > report.heads[*best].test_bacc) best = h;
    }
    report.reported_head = best.value_or(0);
    report.acc = report.heads[report.reported_head].test_acc;
    report.bacc = report.heads[report.reported_head].test_bacc;
    for (std::size_t r : eval_rows) report.test_users.push_back(eval.users.empty() ? r : eval.users[r]);
    report.test_truth = test.y;
    if (!test.y.empty()) {
        score(selected[report.reported_head], test, classes, &report.test_predicted);
    }
    return report;
}

std::string AttackReport::to_json() const {
    nlohmann::ordered_json j;
    auto num = [](double v) -> nlohmann::ordered_json {
        if (std::isnan(v)) return nullptr;
        return v;
    };
    j["reported_head"] = reported_head;
    j["acc"] = num(acc);
    j["bacc"] = num(bacc);
    j["heads"] = nlohmann::ordered_json::array();
    for (const auto& h : heads) {
        j["heads"].push_back({{"train_acc", num(h.train_acc)},
                              {"train_bacc", num(h.train_bacc)},
                              {"validation_bacc", num(h.validation_bacc)},
                              {"selected_epoch", h.selected_epoch},
                              {"test_acc", num(h.test_acc)},
                              {"test_bacc", num(h.test_bacc)}});
    }
    j["test_users"] = test_users;
    j["test_truth"] = test_truth;
    j["test_predicted"] = test_predicted;
    return j.dump(2) + "\n";
}

std::string latent_export_tsv(const LabeledLatents& eval, const AttackReport& report,
                              const InteractionMatrix& matrix) {
    std::ostringstream out;
    out << "user\tlabel\tpredicted";
    for (std::size_t c = 0; c < eval.latents.cols(); ++c) out << "\tmu_" << c;
    out << '\n';
    std::size_t next = 0;
    for (std::size_t r = 0; r < eval.users.size(); ++r) {
        const std::size_t u = eval.users[r];
        const int y = eval.labels[r];
        std::string pred = "-";
        if (y != kUnknownLabel && next < report.test_predicted.size()) {
            pred = std::to_string(report.test_predicted[next++]);
        }
        out << matrix.user_ids.at(u) << '\t' << (y == kUnknownLabel ? std::string("-") : std::to_string(y)) << '\t'
            << pred;
        for (double v : eval.latents.row_span(r)) out << '\t' << detail::format_double(v);
        out << '\n';
    }
    return out.str();
}

}  // namespace advvae
