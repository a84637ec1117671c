#include "advvae/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <sstream>

#include "advvae/error.hpp"
#include "advvae/parallel.hpp"
#include "text_util.hpp"

namespace advvae {

const char* selection_rule_name(SelectionRule rule) noexcept {
    switch (rule) {
        case SelectionRule::BestNdcg: return "best-ndcg";
        case SelectionRule::LastEpoch: return "last-epoch";
        case SelectionRule::MinAdvBacc: return "min-adv-bacc";
    }
    return "?";
}

SelectionRule parse_selection_rule(const std::string& name) {
    if (name == "best-ndcg") return SelectionRule::BestNdcg;
    if (name == "last-epoch") return SelectionRule::LastEpoch;
    if (name == "min-adv-bacc") return SelectionRule::MinAdvBacc;
    throw ConfigError("unknown selection rule '" + name + "'");
}

void TrainConfig::validate() const {
    if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("train: batch size must be >= 1");
    if (!(lr >= 0.0)) throw ConfigError("train: learning rate must be >= 0");
    if (!(weight_decay >= 0.0)) throw ConfigError("train: weight decay must be >= 0");
    if (validate_every < 1) throw ConfigError("train: validate_every must be >= 1");
    if (top_k < 1) throw ConfigError("train: k must be >= 1");
}

std::string TrainLog::to_tsv() const {
    std::ostringstream out;
    out << "epoch\tloss_total\tloss_multinomial\tloss_kl\tloss_adversarial\tval_ndcg\tval_recall\tval_adv_bacc"
           "\tselected\n";
    auto num = [](double v, bool valid) { return valid ? detail::format_double(v) : std::string("nan"); };
    for (const auto& e : epochs) {
        out << e.epoch << '\t' << detail::format_double(e.loss_total) << '\t'
            << detail::format_double(e.loss_multinomial) << '\t' << detail::format_double(e.loss_kl) << '\t'
            << detail::format_double(e.loss_adversarial) << '\t' << num(e.val_ndcg, e.validated) << '\t'
            << num(e.val_recall, e.validated) << '\t'
            << num(e.val_adv_bacc, e.validated && !std::isnan(e.val_adv_bacc)) << '\t'
            << (e.epoch == selected_epoch ? 1 : 0) << '\n';
    }
    return out.str();
}

std::size_t select_index(std::span<const double> values, SelectionRule rule) {
    if (values.empty()) {
        throw ContractError("select_index: empty series");
    }
    if (rule == SelectionRule::LastEpoch) {
        return values.size() - 1;
    }
    std::optional<std::size_t> pick;
    for (std::size_t i = 0; i < values.size(); ++i) {
        const double v = values[i];
        if (std::isnan(v)) {
            continue;
        }
        if (!pick) {
            pick = i;
        } else if (rule == SelectionRule::BestNdcg ? v > values[*pick] : v <= values[*pick]) {
            pick = i;
        }
    }
    if (!pick) {
        throw ContractError(std::string("select_index: no finite values for rule ") + selection_rule_name(rule));
    }
    return *pick;
}

Tensor input_rows(const InteractionMatrix& matrix, std::span<const EvalSplit> splits) {
    Tensor out = Tensor::matrix(splits.size(), matrix.items());
    for (std::size_t r = 0; r < splits.size(); ++r) {
        for (std::size_t item : splits[r].input) out.at(r, item) = 1.0;
    }
    return out;
}

namespace {

constexpr std::size_t kEvalChunk = 512;

}  // namespace

RankingEval evaluate_ranking(const ModelParameters& params, const InteractionMatrix& matrix,
                             std::span<const std::size_t> users, std::span<const EvalSplit> splits, std::size_t k,
                             RecallNormalization norm) {
    if (users.size() != splits.size()) {
        throw DimensionError("evaluate_ranking: users and splits differ in length");
    }
    RankingEval eval;
    for (std::size_t begin = 0; begin < users.size(); begin += kEvalChunk) {
        const std::size_t end = std::min(users.size(), begin + kEvalChunk);
        const auto chunk = splits.subspan(begin, end - begin);
        const Tensor x = input_rows(matrix, chunk);
        const Tensor logits = infer(params, x).logits;
        for (std::size_t r = 0; r < chunk.size(); ++r) {
            if (chunk[r].target.empty()) {
                continue;
            }
            const auto ranked = top_k(logits.row_span(r), k, x.row_span(r));
            eval.users.push_back(users[begin + r]);
            eval.ndcg.push_back(ndcg_at_k(ranked, chunk[r].target, k));
            eval.recall.push_back(recall_at_k(ranked, chunk[r].target, k, norm));
        }
    }
    return eval;
}

AdversaryEval evaluate_adversary(const ModelParameters& params, const InteractionMatrix& matrix,
                                 std::span<const EvalSplit> splits, std::span<const std::size_t> users) {
    if (params.adversary.empty()) {
        throw ContractError("evaluate_adversary: model has no adversarial head");
    }
    if (users.size() != splits.size()) {
        throw DimensionError("evaluate_adversary: users and splits differ in length");
    }
    AdversaryEval out;
    ConfusionCounts counts(params.config.classes);
    for (std::size_t begin = 0; begin < users.size(); begin += kEvalChunk) {
        const std::size_t end = std::min(users.size(), begin + kEvalChunk);
        const Tensor x = input_rows(matrix, splits.subspan(begin, end - begin));
        const Tensor adv = *infer(params, x).adv_logits;
        for (std::size_t r = 0; r < end - begin; ++r) {
            const int y = matrix.labels[users[begin + r]];
            if (y == kUnknownLabel) {
                continue;
            }
            const auto row = adv.row_span(r);
            const int pred = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
            out.truth.push_back(y);
            out.predicted.push_back(pred);
            counts.add(y, pred);
        }
    }
    const bool complete = std::all_of(counts.total.begin(), counts.total.end(), [](std::size_t t) { return t > 0; });
    out.acc = out.truth.empty() ? std::nan("") : accuracy(counts);
    out.bacc = complete ? balanced_accuracy(counts) : std::nan("");
    return out;
}

TrainResult train(const ModelConfig& model_config, const InteractionMatrix& matrix, const FoldSplit& fold,
                  const TrainConfig& config) {
    model_config.validate();
    config.validate();
    if (model_config.items != matrix.items()) {
        throw ConfigError("train: model expects " + std::to_string(model_config.items) + " items, dataset has " +
                          std::to_string(matrix.items()));
    }
    if (config.selection == SelectionRule::MinAdvBacc && !model_config.adversarial) {
        throw ConfigError("train: min-adv-bacc selection needs an adversarial model");
    }
    if (fold.train_users.empty()) {
        throw DataError("train: fold has no training users");
    }
    const auto started = std::chrono::steady_clock::now();

    ModelParameters params = ModelParameters::initialize(model_config, config.seed);
    AdamState adam;
    const AdamConfig adam_cfg = config.adam();
    std::vector<Tensor*> slots;
    for (auto& n : params.named()) slots.push_back(n.tensor);

    TrainResult result;
    double best_ndcg = -std::numeric_limits<double>::infinity();
    double best_bacc = std::numeric_limits<double>::infinity();
    std::size_t step = 0;

    for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
        std::vector<std::size_t> order = fold.train_users;
        Rng shuffle_rng(config.seed, Stream::Shuffle, epoch);
        shuffle_rng.shuffle(order);

        EpochRecord rec;
        rec.epoch = epoch;
        std::size_t batches = 0;
        for (std::size_t begin = 0; begin < order.size(); begin += config.batch_size) {
            const std::size_t end = std::min(order.size(), begin + config.batch_size);
            const std::span<const std::size_t> batch(order.data() + begin, end - begin);
            const Tensor x = matrix.dense_rows(batch);
            std::vector<int> labels;
            labels.reserve(batch.size());
            for (std::size_t u : batch) labels.push_back(matrix.labels[u]);

            double beta = model_config.beta;
            if (config.beta_warmup_steps > 0) {
                beta *= std::min(1.0, static_cast<double>(step + 1) / static_cast<double>(config.beta_warmup_steps));
            }
            Rng dropout_rng(config.seed, Stream::Dropout, step);
            Rng sampling_rng(config.seed, Stream::Sampling, step);

            Tape tape;
            const BoundModel bound = bind(tape, params);
            const LossBreakdown loss = total_loss(bound, x, labels, beta, true, {&dropout_rng, &sampling_rng});
            const double total = loss.total.value().item();
            if (!std::isfinite(total)) {
                throw DivergenceError("train: non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                                      std::to_string(step));
            }
            tape.backward(loss.total);
            const std::vector<Tensor> grads = bound.gradients();
            adam_step(slots, grads, adam, adam_cfg);

            rec.loss_total += total;
            rec.loss_multinomial += loss.multinomial;
            rec.loss_kl += loss.kl;
            rec.loss_adversarial += loss.adversarial;
            ++batches;
            ++step;
        }
        const double nb = static_cast<double>(batches);
        rec.loss_total /= nb;
        rec.loss_multinomial /= nb;
        rec.loss_kl /= nb;
        rec.loss_adversarial /= nb;
        if (!params.all_finite()) {
            throw DivergenceError("train: non-finite parameters after epoch " + std::to_string(epoch));
        }

        if (epoch % config.validate_every == 0 || epoch == config.epochs) {
            rec.validated = true;
            const RankingEval val =
                evaluate_ranking(params, matrix, fold.validation_users, fold.validation_splits, config.top_k);
            rec.val_ndcg = val.mean_ndcg();
            rec.val_recall = val.mean_recall();
            rec.val_adv_bacc = std::nan("");
            if (model_config.adversarial) {
                rec.val_adv_bacc =
                    evaluate_adversary(params, matrix, fold.validation_splits, fold.validation_users).bacc;
            }
            if (rec.val_ndcg > best_ndcg) {
                best_ndcg = rec.val_ndcg;
                result.best_ndcg = params;
                result.best_ndcg_epoch = epoch;
            }
            if (!std::isnan(rec.val_adv_bacc) && rec.val_adv_bacc <= best_bacc) {
                best_bacc = rec.val_adv_bacc;
                result.min_adv_bacc = params;
                result.min_adv_bacc_epoch = epoch;
            }
        }
        result.log.epochs.push_back(rec);
    }

    result.last = params;
    switch (config.selection) {
        case SelectionRule::LastEpoch:
            result.selected = params;
            result.log.selected_epoch = config.epochs;
            break;
        case SelectionRule::BestNdcg:
            if (!result.best_ndcg) {
                throw DivergenceError("train: validation NDCG never finite");
            }
            result.selected = *result.best_ndcg;
            result.log.selected_epoch = result.best_ndcg_epoch;
            break;
        case SelectionRule::MinAdvBacc:
            if (!result.min_adv_bacc) {
                throw DataError("train: adversary BAcc undefined on validation users (missing class)");
            }
            result.selected = *result.min_adv_bacc;
            result.log.selected_epoch = result.min_adv_bacc_epoch;
            break;
    }
    result.log.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    return result;
}

std::vector<FamilyOutcome> grid_run(std::span<const GridFamily> families, const InteractionMatrix& matrix,
                                    std::span<const FoldSplit> folds, std::size_t workers) {
    if (folds.empty()) {
        throw ContractError("grid_run: no folds");
    }
    struct Task {
        std::size_t family, candidate, fold;
    };
    std::vector<Task> tasks;
    for (std::size_t f = 0; f < families.size(); ++f) {
        if (families[f].candidates.empty()) {
            throw ConfigError("grid_run: family '" + families[f].name + "' has an empty grid");
        }
        for (std::size_t c = 0; c < families[f].candidates.size(); ++c) {
            for (std::size_t k = 0; k < folds.size(); ++k) tasks.push_back({f, c, k});
        }
    }

    std::vector<std::optional<TrainResult>> results(tasks.size());
    std::vector<double> val_ndcg(tasks.size(), 0.0);
    parallel_for(tasks.size(), workers, [&](std::size_t i) {
        const Task& t = tasks[i];
        const GridCandidate& cand = families[t.family].candidates[t.candidate];
        const FoldSplit& fold = folds[t.fold];
        TrainResult r = train(cand.model, matrix, fold, cand.train);
        val_ndcg[i] = evaluate_ranking(r.selected, matrix, fold.validation_users, fold.validation_splits,
                                       cand.train.top_k)
                          .mean_ndcg();
        results[i] = std::move(r);
    });

    std::vector<FamilyOutcome> out;
    std::size_t cursor = 0;
    for (const auto& family : families) {
        FamilyOutcome fo;
        fo.name = family.name;
        const std::size_t first_task = cursor;
        for (std::size_t c = 0; c < family.candidates.size(); ++c) {
            CandidateOutcome co;
            for (std::size_t k = 0; k < folds.size(); ++k, ++cursor) {
                co.logs.push_back(results[cursor]->log);
                co.fold_val_ndcg.push_back(val_ndcg[cursor]);
            }
            co.mean_val_ndcg = mean(co.fold_val_ndcg);
            fo.candidates.push_back(std::move(co));
        }
        for (std::size_t c = 1; c < fo.candidates.size(); ++c) {
            if (fo.candidates[c].mean_val_ndcg > fo.candidates[fo.winner].mean_val_ndcg) {
                fo.winner = c;
            }
        }
        const std::size_t k_top = family.candidates[fo.winner].train.top_k;
        for (std::size_t k = 0; k < folds.size(); ++k) {
            TrainResult& r = *results[first_task + fo.winner * folds.size() + k];
            fo.winner_test.push_back(
                evaluate_ranking(r.selected, matrix, folds[k].test_users, folds[k].test_splits, k_top));
            fo.winner_results.push_back(std::move(r));
        }
        out.push_back(std::move(fo));
    }
    return out;
}

}  // namespace advvae
