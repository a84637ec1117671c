#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "advvae/attacker.hpp"
#include "advvae/error.hpp"

using namespace advvae;

namespace {

LabeledLatents gaussian_latents(std::size_t n, std::size_t dim, std::uint64_t seed, bool separable) {
    Rng rng(seed);
    LabeledLatents out;
    out.latents = Tensor::matrix(n, dim);
    for (std::size_t r = 0; r < n; ++r) {
        double score = 0.0;
        for (std::size_t c = 0; c < dim; ++c) {
            const double v = rng.normal();
            out.latents.at(r, c) = v;
            score += (c % 2 == 0 ? 1.0 : -0.5) * v;
        }
        out.users.push_back(r);
        // Separable: a fixed linear rule with a margin; otherwise a fair coin.
        if (separable) {
            if (std::abs(score) < 0.2) out.latents.at(r, 0) += score >= 0 ? 0.4 : -0.4;
            out.labels.push_back(score >= 0 ? 1 : 0);
        } else {
            out.labels.push_back(rng.uniform() < 0.5 ? 1 : 0);
        }
    }
    return out;
}

AttackerConfig quick(std::size_t heads = 3) {
    AttackerConfig c;
    c.heads = heads;
    c.epochs = 30;
    c.batch_size = 32;
    c.lr = 3e-3;
    c.seed = 5;
    return c;
}

InteractionMatrix synthetic(std::size_t users, double p_own, double p_other) {
    SyntheticSpec spec;
    spec.users = users;
    spec.p_own = p_own;
    spec.p_other = p_other;
    const SyntheticFiles files = generate_synthetic(spec);
    std::istringstream r(files.ratings), u(files.users);
    const FormatSpec f = FormatSpec::movielens();
    RawDataset raw{parse_interactions(r, f), parse_user_labels(u, f), f.class_names};
    PreprocessOptions opt;
    opt.min_user_degree = 1;
    opt.min_item_degree = 1;
    return preprocess(raw, opt);
}

ModelConfig model_for(const InteractionMatrix& m) {
    ModelConfig c;
    c.items = m.items();
    c.encoder_hidden = {16};
    c.latent = 8;
    c.adversary_hidden = {8};
    return c;
}

}  // namespace

TEST_CASE("linearly separable latents are recovered") {
    const LabeledLatents train = gaussian_latents(600, 4, 1, true);
    const LabeledLatents test = gaussian_latents(400, 4, 2, true);
    const AttackReport r = attack(train, test, 2, quick());
    CHECK(r.bacc >= 0.95);
}

TEST_CASE("labels independent of the latents stay near chance") {
    const LabeledLatents train = gaussian_latents(1000, 4, 3, false);
    const LabeledLatents test = gaussian_latents(1000, 4, 4, false);
    const AttackReport r = attack(train, test, 2, quick());
    CHECK(std::abs(r.bacc - 0.5) <= 0.06);
}

TEST_CASE("reported head is the strongest, and more heads never lower it") {
    const LabeledLatents train = gaussian_latents(300, 3, 6, true);
    const LabeledLatents test = gaussian_latents(200, 3, 7, false);
    double previous = -1.0;
    for (std::size_t n = 1; n <= 5; ++n) {
        const AttackReport r = attack(train, test, 2, quick(n));
        REQUIRE(r.heads.size() == n);
        double best = -1.0;
        for (const auto& h : r.heads) best = std::max(best, h.test_bacc);
        CHECK(r.bacc == best);
        CHECK(r.heads[r.reported_head].test_bacc == best);
        CHECK(r.bacc >= previous);
        previous = r.bacc;
    }
}

TEST_CASE("attack is seeded and deterministic") {
    const LabeledLatents train = gaussian_latents(200, 3, 8, true);
    const LabeledLatents test = gaussian_latents(100, 3, 9, true);
    CHECK(attack(train, test, 2, quick()).to_json() == attack(train, test, 2, quick()).to_json());
}

TEST_CASE("unknown labels are dropped and single-class pools are rejected") {
    LabeledLatents train = gaussian_latents(200, 3, 10, true);
    LabeledLatents test = gaussian_latents(100, 3, 11, true);
    test.labels[0] = kUnknownLabel;
    test.labels[5] = kUnknownLabel;
    train.labels[1] = kUnknownLabel;
    const AttackReport r = attack(train, test, 2, quick(1));
    CHECK(r.test_truth.size() == 98);
    CHECK(r.test_predicted.size() == 98);

    LabeledLatents one = train;
    std::fill(one.labels.begin(), one.labels.end(), 0);
    CHECK_THROWS_AS(attack(one, test, 2, quick(1)), DataError);
    AttackerConfig none = quick(0);
    CHECK_THROWS_AS(none.validate(), ConfigError);
}

TEST_CASE("an untrained model on data without group signal leaks nothing") {
    // Both classes draw every item block with the same probability.
    const InteractionMatrix m = synthetic(2000, 0.3, 0.3);
    const ModelParameters params = ModelParameters::initialize(model_for(m), 3);
    std::vector<std::size_t> train_users(1000), test_users(1000);
    std::iota(train_users.begin(), train_users.end(), 0);
    std::iota(test_users.begin(), test_users.end(), 1000);
    const AttackReport r =
        attack(extract_latents(params, m, train_users), extract_latents(params, m, test_users), 2, quick());
    CHECK(std::abs(r.bacc - 0.5) <= 0.06);
}

TEST_CASE("latent extraction: deterministic, mu-shaped, model untouched") {
    const InteractionMatrix m = synthetic(60, 0.6, 0.05);
    const ModelParameters params = ModelParameters::initialize(model_for(m), 4);
    const std::string before = serialize_checkpoint(params);
    const std::vector<std::size_t> users{0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16, 17, 18, 19};
    const LabeledLatents a = extract_latents(params, m, users);
    const LabeledLatents b = extract_latents(params, m, users);
    CHECK(a.latents == b.latents);
    CHECK(a.latents.rows() == users.size());
    CHECK(a.latents.cols() == 8);
    CHECK(a.latents == infer(params, m.dense_rows(users)).mu);
    attack(a, b, 2, quick(1));
    CHECK(serialize_checkpoint(params) == before);

    // An empty input row still maps to a defined (bias-path) vector.
    const std::vector<EvalSplit> empty(1);
    const std::vector<std::size_t> one{0};
    const LabeledLatents e = extract_latents(params, m, one, empty);
    for (double v : e.latents.values()) CHECK(std::isfinite(v));

    ModelConfig wrong = model_for(m);
    wrong.items += 1;
    CHECK_THROWS_AS(extract_latents(ModelParameters::initialize(wrong, 4), m, users), ConfigError);
}

TEST_CASE("latent export: header plus one row per user with label, prediction and mu") {
    const InteractionMatrix m = synthetic(60, 0.6, 0.05);
    const ModelParameters params = ModelParameters::initialize(model_for(m), 4);
    std::vector<std::size_t> train(40), test(20);
    std::iota(train.begin(), train.end(), 0);
    std::iota(test.begin(), test.end(), 40);
    const LabeledLatents tl = extract_latents(params, m, train), el = extract_latents(params, m, test);
    const AttackReport r = attack(tl, el, 2, quick(1));
    std::istringstream in(latent_export_tsv(el, r, m));
    std::string line;
    std::getline(in, line);
    CHECK(line.rfind("user\tlabel\tpredicted\tmu_0", 0) == 0);
    std::size_t rows = 0;
    while (std::getline(in, line)) {
        CHECK(std::count(line.begin(), line.end(), '\t') == 2 + 8);
        CHECK(line.substr(0, line.find('\t')) == m.user_ids[test[rows]]);
        ++rows;
    }
    CHECK(rows == 20);
}
