#include <doctest.h>

#include <cmath>
#include <sstream>

#include "advvae/dataset.hpp"
#include "advvae/error.hpp"
#include "advvae/trainer.hpp"

using namespace advvae;

namespace {

InteractionMatrix small_dataset() {
    SyntheticSpec spec;
    spec.users = 80;
    spec.items = 30;
    const SyntheticFiles files = generate_synthetic(spec);
    std::istringstream r(files.ratings), u(files.users);
    const FormatSpec f = FormatSpec::movielens();
    RawDataset raw{parse_interactions(r, f), parse_user_labels(u, f), f.class_names};
    PreprocessOptions opt;
    opt.min_user_degree = 1;
    opt.min_item_degree = 1;
    return preprocess(raw, opt);
}

const InteractionMatrix& dataset() {
    static const InteractionMatrix m = small_dataset();
    return m;
}

const FoldSplit& fold0() {
    static const std::vector<FoldSplit> folds = make_folds(dataset(), 5, 3);
    return folds[0];
}

ModelConfig model(bool adversarial, double lambda = 1.0) {
    ModelConfig c;
    c.items = dataset().items();
    c.encoder_hidden = {16};
    c.latent = 8;
    c.adversary_hidden = {8};
    c.beta = 0.2;
    c.lambda = lambda;
    c.adversarial = adversarial;
    return c;
}

TrainConfig schedule(std::size_t epochs, SelectionRule rule = SelectionRule::BestNdcg) {
    TrainConfig t;
    t.epochs = epochs;
    t.batch_size = 16;
    t.lr = 3e-3;
    t.seed = 11;
    t.selection = rule;
    return t;
}

}  // namespace

TEST_CASE("selection rules over a metric series") {
    const std::vector<double> ndcg{0.30, 0.50, 0.40};
    CHECK(select_index(ndcg, SelectionRule::BestNdcg) == 1);
    CHECK(select_index(ndcg, SelectionRule::LastEpoch) == 2);
    const std::vector<double> ties{0.5, 0.7, 0.7, 0.2};
    CHECK(select_index(ties, SelectionRule::BestNdcg) == 1);
    const std::vector<double> bacc{0.8, 0.6, 0.7, 0.6};
    CHECK(select_index(bacc, SelectionRule::MinAdvBacc) == 3);
    const std::vector<double> with_nan{NAN, 0.9, NAN};
    CHECK(select_index(with_nan, SelectionRule::BestNdcg) == 1);
    CHECK(select_index(with_nan, SelectionRule::MinAdvBacc) == 1);
    CHECK(parse_selection_rule("min-adv-bacc") == SelectionRule::MinAdvBacc);
    CHECK_THROWS_AS(parse_selection_rule("median"), ConfigError);
}

TEST_CASE("Adam: first step matches the bias-corrected closed form") {
    Tensor p = Tensor::row({1.0, -2.0, 0.5});
    const std::vector<Tensor> g{Tensor::row({0.3, -0.01, 0.0})};
    AdamState state;
    AdamConfig cfg;
    cfg.lr = 0.1;
    cfg.weight_decay = 0.2;
    Tensor* params[] = {&p};
    adam_step(params, g, state, cfg);
    for (std::size_t i = 0; i < 3; ++i) {
        const double start = std::vector<double>{1.0, -2.0, 0.5}[i];
        const double decayed = start - cfg.lr * cfg.weight_decay * start;
        // m_hat = g, v_hat = g^2 after one step.
        const double expected = decayed - cfg.lr * g[0][i] / (std::abs(g[0][i]) + cfg.eps);
        CHECK(p[i] == doctest::Approx(expected).epsilon(1e-12));
    }
    CHECK(state.step == 1);
    CHECK(state.m[0][0] == doctest::Approx(0.1 * 0.3));
    CHECK(state.v[0][0] == doctest::Approx(0.001 * 0.09));
}

TEST_CASE("Adam: second step matches a hand-rolled recursion") {
    Tensor p = Tensor::row({0.7});
    AdamState state;
    AdamConfig cfg;
    cfg.lr = 0.05;
    Tensor* params[] = {&p};
    const double g1 = 0.4, g2 = -0.1;
    adam_step(params, std::vector<Tensor>{Tensor::row({g1})}, state, cfg);
    adam_step(params, std::vector<Tensor>{Tensor::row({g2})}, state, cfg);
    double x = 0.7, m = 0.0, v = 0.0;
    for (int t = 1; t <= 2; ++t) {
        const double g = t == 1 ? g1 : g2;
        m = cfg.beta1 * m + (1 - cfg.beta1) * g;
        v = cfg.beta2 * v + (1 - cfg.beta2) * g * g;
        const double mh = m / (1 - std::pow(cfg.beta1, t)), vh = v / (1 - std::pow(cfg.beta2, t));
        x -= cfg.lr * mh / (std::sqrt(vh) + cfg.eps);
    }
    CHECK(p[0] == doctest::Approx(x).epsilon(1e-12));
}

TEST_CASE("Adam: zero gradient leaves parameters, symmetric parameters stay equal") {
    Tensor a = Tensor::row({1.0, 2.0}), b = Tensor::row({1.0, 2.0});
    AdamState state;
    Tensor* params[] = {&a, &b};
    const std::vector<Tensor> zero{Tensor::row({0.0, 0.0}), Tensor::row({0.0, 0.0})};
    adam_step(params, zero, state, AdamConfig{});
    CHECK(a == Tensor::row({1.0, 2.0}));
    AdamState broken;
    broken.m = {Tensor::row({0.0, 0.0}), Tensor::row({0.0, 0.0})};
    CHECK_THROWS_AS(adam_step(params, zero, broken, AdamConfig{}), DimensionError);
    const std::vector<Tensor> same{Tensor::row({0.2, -0.4}), Tensor::row({0.2, -0.4})};
    for (int i = 0; i < 5; ++i) adam_step(params, same, state, AdamConfig{});
    CHECK(a == b);
}

TEST_CASE("training with lr 0 for one epoch leaves the initialization untouched") {
    TrainConfig t = schedule(1);
    t.lr = 0.0;
    const TrainResult r = train(model(false), dataset(), fold0(), t);
    CHECK(r.last == ModelParameters::initialize(model(false), t.seed));
    t.lr = -1.0;
    CHECK_THROWS_AS(t.validate(), ConfigError);
}

TEST_CASE("training is bit-reproducible") {
    const TrainConfig t = schedule(4);
    const TrainResult a = train(model(true), dataset(), fold0(), t);
    const TrainResult b = train(model(true), dataset(), fold0(), t);
    CHECK(serialize_checkpoint(a.selected) == serialize_checkpoint(b.selected));
    CHECK(a.log.selected_epoch == b.log.selected_epoch);
    CHECK(a.log.to_tsv() == b.log.to_tsv());
    TrainConfig other = t;
    other.seed = 12;
    CHECK_FALSE(serialize_checkpoint(train(model(true), dataset(), fold0(), other).last) ==
                serialize_checkpoint(a.last));
}

TEST_CASE("training loss falls over the first five epochs on the synthetic dataset") {
    // Default generator, synthetic.conf model, default lr 1e-3. At 3e-3 the loss
    // reaches its popularity plateau by epoch 4 and then jitters.
    const SyntheticFiles files = generate_synthetic(SyntheticSpec{});
    std::istringstream r(files.ratings), u(files.users);
    const FormatSpec f = FormatSpec::movielens();
    RawDataset raw{parse_interactions(r, f), parse_user_labels(u, f), f.class_names};
    PreprocessOptions opt;
    opt.min_user_degree = 1;
    opt.min_item_degree = 1;
    const InteractionMatrix m = preprocess(raw, opt);
    ModelConfig c;
    c.items = m.items();
    c.encoder_hidden = {32};
    c.latent = 16;
    c.beta = 0.2;
    c.adversarial = false;
    for (const std::uint64_t seed : {42u, 1u, 2u}) {
        const FoldSplit fold = make_folds(m, 5, seed)[0];
        TrainConfig t = schedule(5);
        t.batch_size = 8;
        t.lr = 1e-3;
        const TrainResult out = train(c, m, fold, t);
        REQUIRE(out.log.epochs.size() == 5);
        for (std::size_t e = 1; e < 5; ++e) {
            CAPTURE(seed);
            CAPTURE(e);
            CHECK(out.log.epochs[e].loss_total < out.log.epochs[e - 1].loss_total);
        }
    }
}

TEST_CASE("lambda 0 adversarial training matches plain MultVAE in the encoder and decoder") {
    const TrainResult plain = train(model(false), dataset(), fold0(), schedule(3, SelectionRule::LastEpoch));
    const TrainResult adv = train(model(true, 0.0), dataset(), fold0(), schedule(3, SelectionRule::LastEpoch));
    CHECK(adv.last.encoder == plain.last.encoder);
    CHECK(adv.last.decoder == plain.last.decoder);
}

TEST_CASE("selected checkpoints follow their rules") {
    TrainConfig t = schedule(6, SelectionRule::MinAdvBacc);
    const TrainResult r = train(model(true), dataset(), fold0(), t);
    REQUIRE(r.min_adv_bacc.has_value());
    REQUIRE(r.best_ndcg.has_value());
    double lowest = INFINITY, highest = -INFINITY;
    for (const auto& e : r.log.epochs) {
        lowest = std::min(lowest, e.val_adv_bacc);
        highest = std::max(highest, e.val_ndcg);
    }
    CHECK(r.log.epochs[r.min_adv_bacc_epoch - 1].val_adv_bacc == lowest);
    CHECK(r.log.epochs[r.best_ndcg_epoch - 1].val_ndcg == highest);
    CHECK(r.log.selected_epoch == r.min_adv_bacc_epoch);
    CHECK(r.selected == *r.min_adv_bacc);

    const TrainResult last = train(model(true), dataset(), fold0(), schedule(6, SelectionRule::LastEpoch));
    CHECK(last.log.selected_epoch == 6);
    CHECK(last.selected == last.last);
}

TEST_CASE("a non-finite loss aborts with a divergence error") {
    TrainConfig t = schedule(5);
    t.lr = 1e12;
    CHECK_THROWS_AS(train(model(true), dataset(), fold0(), t), DivergenceError);
}

TEST_CASE("training log: one row per epoch") {
    const TrainResult r = train(model(true), dataset(), fold0(), schedule(3));
    std::istringstream in(r.log.to_tsv());
    std::string line;
    std::size_t rows = 0;
    while (std::getline(in, line)) ++rows;
    CHECK(rows == 4);
}

TEST_CASE("grid runner: single point equals a direct train call, dominant point wins") {
    const std::vector<FoldSplit> folds = make_folds(dataset(), 5, 3);
    const std::vector<FoldSplit> two(folds.begin(), folds.begin() + 2);
    GridFamily single{"multvae", {{"base", model(false), schedule(3)}}};
    const auto out = grid_run(std::span<const GridFamily>(&single, 1), dataset(), two, 1);
    REQUIRE(out.size() == 1);
    const TrainResult direct = train(model(false), dataset(), two[1], schedule(3));
    CHECK(out[0].winner_results[1].selected == direct.selected);
    CHECK(out[0].candidates[0].logs[1].to_tsv() == direct.log.to_tsv());

    // A model that barely trains against one that trains properly.
    TrainConfig frozen = schedule(3);
    frozen.lr = 1e-12;
    GridFamily pair{"multvae", {{"frozen", model(false), frozen}, {"trained", model(false), schedule(3)}}};
    const auto first = grid_run(std::span<const GridFamily>(&pair, 1), dataset(), two, 2);
    CHECK(first[0].winner == 1);
    const auto again = grid_run(std::span<const GridFamily>(&pair, 1), dataset(), two, 1);
    CHECK(again[0].winner == first[0].winner);
    for (std::size_t f = 0; f < 2; ++f) CHECK(again[0].candidates[1].logs[f].to_tsv() == first[0].candidates[1].logs[f].to_tsv());
}
