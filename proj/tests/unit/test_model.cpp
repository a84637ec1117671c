#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

#include "advvae/error.hpp"
#include "advvae/model.hpp"
#include "oracles.hpp"

using namespace advvae;

namespace {

ModelConfig toy_config(bool adversarial, double lambda = 1.0) {
    ModelConfig c;
    c.items = 6;
    c.encoder_hidden = {5};
    c.latent = 3;
    c.adversary_hidden = {4};
    c.beta = 0.3;
    c.lambda = lambda;
    c.input_dropout = 0.2;
    c.adversarial = adversarial;
    return c;
}

Tensor toy_batch() {
    return Tensor::matrix({{1, 0, 1, 0, 0, 1}, {0, 1, 1, 0, 1, 0}, {1, 1, 0, 0, 0, 0}, {0, 0, 0, 1, 1, 1}});
}

const std::vector<int> kToyLabels{0, 1, 0, 1};

double scalar(Var v) {
    return v.value().item();
}

struct Grads {
    std::vector<Tensor> all;
    double loss = 0.0;
};

Grads total_gradients(const ModelParameters& params, const Tensor& x, std::span<const int> labels,
                      std::uint64_t stream_counter = 0) {
    Tape tape;
    const BoundModel bound = bind(tape, params);
    Rng dropout(7, Stream::Dropout, stream_counter), sampling(7, Stream::Sampling, stream_counter);
    const LossBreakdown loss = total_loss(bound, x, labels, params.config.beta, true, {&dropout, &sampling});
    tape.backward(loss.total);
    return {bound.gradients(), scalar(loss.total)};
}

}  // namespace

TEST_CASE("KL: zero at the prior, 0.5 for N(1, 1), never negative") {
    Tape tape;
    CHECK(scalar(loss_kl(tape.constant(Tensor::matrix(2, 3, 0.0)), tape.constant(Tensor::matrix(2, 3, 0.0)))) == 0.0);
    CHECK(scalar(loss_kl(tape.constant(Tensor::row({1.0})), tape.constant(Tensor::row({0.0})))) ==
          doctest::Approx(0.5));
    Rng rng(3);
    for (int i = 0; i < 10000; ++i) {
        Tape t;
        const double mu = rng.normal() * 3.0, lv = rng.normal() * 3.0;
        CHECK(scalar(loss_kl(t.constant(Tensor::row({mu})), t.constant(Tensor::row({lv})))) >= 0.0);
    }
}

TEST_CASE("multinomial NLL: ln n for one-hot under uniform logits, zero rows contribute nothing") {
    for (std::size_t n : {2u, 5u, 60u}) {
        Tape tape;
        Tensor x = Tensor::matrix(1, n);
        x[n / 2] = 1.0;
        CHECK(scalar(loss_multinomial(tape.constant(Tensor::matrix(1, n, 0.3)), tape.constant(x))) ==
              doctest::Approx(std::log(static_cast<double>(n))));
    }
    Tape tape;
    Tensor x = Tensor::matrix({{0, 1, 0}, {0, 0, 0}});
    Tensor logits = Tensor::matrix({{0.1, 0.2, -0.3}, {5.0, -2.0, 1.0}});
    const double both = scalar(loss_multinomial(tape.constant(logits), tape.constant(x)));
    const double first_only = -std::log(std::exp(0.2) / (std::exp(0.1) + std::exp(0.2) + std::exp(-0.3)));
    CHECK(both == doctest::Approx(first_only / 2.0));
}

TEST_CASE("multinomial NLL decreases as the interacted item's logit rises") {
    double previous = INFINITY;
    for (double l = -3.0; l <= 3.0; l += 0.25) {
        Tape tape;
        const double loss = scalar(loss_multinomial(tape.constant(Tensor::matrix({{0.2, l, -0.5, 0.0}})),
                                                    tape.constant(Tensor::matrix({{0, 1, 0, 0}}))));
        CHECK(loss < previous);
        previous = loss;
    }
}

TEST_CASE("cross-entropy: ln 2 at uniform logits, vanishes at large margins, order free, skips unknowns") {
    Tape tape;
    const std::vector<int> labels{0, 1, 1};
    CHECK(scalar(loss_adversarial(tape.constant(Tensor::matrix(3, 2, 0.4)), labels)) == doctest::Approx(std::log(2.0)));
    CHECK(scalar(loss_adversarial(tape.constant(Tensor::matrix({{20, 0}, {0, 20}})), std::vector<int>{0, 1})) < 1e-8);

    const Tensor logits = Tensor::matrix({{0.3, -1.0}, {2.0, 0.5}, {-0.2, 0.1}});
    const Tensor permuted = Tensor::matrix({{-0.2, 0.1}, {0.3, -1.0}, {2.0, 0.5}});
    CHECK(scalar(loss_adversarial(tape.constant(logits), labels)) ==
          doctest::Approx(scalar(loss_adversarial(tape.constant(permuted), std::vector<int>{1, 0, 1}))));

    const std::vector<int> with_unknown{0, kUnknownLabel, 1};
    const double skipped = scalar(loss_adversarial(tape.constant(logits), with_unknown));
    const Tensor kept = Tensor::matrix({{0.3, -1.0}, {-0.2, 0.1}});
    CHECK(skipped == doctest::Approx(scalar(loss_adversarial(tape.constant(kept), std::vector<int>{0, 1}))));

    CHECK_THROWS(loss_adversarial(tape.constant(logits), std::vector<int>{0, 2, 1}));
}

TEST_CASE("total loss reduces to the multinomial term with beta 0 and no adversary") {
    ModelConfig cfg = toy_config(false);
    cfg.beta = 0.0;
    const ModelParameters params = ModelParameters::initialize(cfg, 1);
    Tape tape;
    const BoundModel bound = bind(tape, params);
    Rng d(1), s(2);
    const LossBreakdown loss = total_loss(bound, toy_batch(), kToyLabels, 0.0, true, {&d, &s});
    CHECK(scalar(loss.total) == loss.multinomial);
}

TEST_CASE("composite adversarial loss gradient matches finite differences on a 4 x 6 toy") {
    const ModelParameters base = ModelParameters::initialize(toy_config(true, 1.3), 5);
    // With the GRL the total gradient is not the derivative of the total loss.
    // At lambda 0 the encoder/decoder see d(rec) and the adversary d(ce).
    ModelParameters params = base;
    params.config.lambda = 0.0;
    const Tensor x = toy_batch();
    const Grads analytic = total_gradients(params, x, kToyLabels);

    auto loss_at = [&](const ModelParameters& p) {
        Tape tape;
        const BoundModel bound = bind(tape, p);
        Rng dropout(7, Stream::Dropout, 0), sampling(7, Stream::Sampling, 0);
        const LossBreakdown l = total_loss(bound, x, kToyLabels, p.config.beta, true, {&dropout, &sampling});
        return scalar(l.total);
    };
    auto names = params.named();
    const std::size_t reconstruction = 2 * (params.encoder.size() + params.decoder.size());
    double worst = 0.0;
    for (std::size_t t = 0; t < names.size(); ++t) {
        const Tensor numeric = oracle::numeric_gradient(*names[t].tensor, [&](const Tensor& v) {
            ModelParameters copy = params;
            *copy.named()[t].tensor = v;
            copy.config.adversarial = t >= reconstruction;
            return loss_at(copy);
        });
        worst = std::max(worst, oracle::max_relative_error(analytic.all[t], numeric, 1e-6));
    }
    CHECK(worst <= 1e-3);
}

TEST_CASE("lambda 0 leaves encoder and decoder gradients bit-identical to plain MultVAE") {
    const ModelParameters adv = ModelParameters::initialize(toy_config(true, 0.0), 9);
    const ModelParameters plain = ModelParameters::initialize(toy_config(false), 9);
    REQUIRE(adv.encoder == plain.encoder);
    REQUIRE(adv.decoder == plain.decoder);
    const Grads ga = total_gradients(adv, toy_batch(), kToyLabels);
    const Grads gp = total_gradients(plain, toy_batch(), kToyLabels);
    const std::size_t shared = 2 * (plain.encoder.size() + plain.decoder.size());
    REQUIRE(gp.all.size() == shared);
    for (std::size_t i = 0; i < shared; ++i) CHECK(ga.all[i] == gp.all[i]);
}

TEST_CASE("lambda scales only the reversed encoder contribution; the head sees the plain gradient") {
    auto grads = [](double lambda) {
        return total_gradients(ModelParameters::initialize(toy_config(true, lambda), 4), toy_batch(), kToyLabels).all;
    };
    const auto g0 = grads(0.0), g1 = grads(1.0), g2 = grads(2.0);
    const ModelParameters shape = ModelParameters::initialize(toy_config(true), 4);
    const std::size_t enc = 2 * shape.encoder.size(), dec = 2 * shape.decoder.size();
    for (std::size_t i = 0; i < enc; ++i) {
        for (std::size_t j = 0; j < g0[i].numel(); ++j) {
            const double c1 = g1[i][j] - g0[i][j];
            const double c2 = g2[i][j] - g0[i][j];
            CHECK(c2 == doctest::Approx(2.0 * c1).epsilon(1e-9).scale(1e-12));
        }
    }
    for (std::size_t i = enc; i < enc + dec; ++i) CHECK(g1[i] == g0[i]);
    for (std::size_t i = enc + dec; i < g0.size(); ++i) CHECK(g1[i] == g0[i]);
}

TEST_CASE("inference is deterministic and uses z = mu") {
    const ModelParameters params = ModelParameters::initialize(toy_config(true), 2);
    const ForwardOutput a = infer(params, toy_batch());
    const ForwardOutput b = infer(params, toy_batch());
    CHECK(a.z == a.mu);
    CHECK(a.logits == b.logits);
    CHECK(a.adv_logits.has_value());
}

TEST_CASE("top_k ordering, tie-breaking and exclusion") {
    const std::vector<double> s{0.1, 0.9, 0.5};
    CHECK(top_k(s, 2) == std::vector<std::size_t>{1, 2});
    const std::vector<double> flat(5, 0.0);
    CHECK(top_k(flat, 3) == std::vector<std::size_t>{0, 1, 2});
    const std::vector<double> mask{0, 1, 0};
    CHECK(top_k(s, 1, mask) == std::vector<std::size_t>{2});
    CHECK(top_k(s, 5, mask) == std::vector<std::size_t>{2, 0});
    CHECK_THROWS_AS(top_k(s, 0), ContractError);
}

TEST_CASE("recommend never returns masked items") {
    const ModelParameters params = ModelParameters::initialize(toy_config(false), 3);
    const Tensor x = toy_batch();
    const auto recs = recommend(params, x, 3, &x);
    for (std::size_t u = 0; u < recs.size(); ++u) {
        CHECK(recs[u].size() == 3);
        for (std::size_t i : recs[u]) CHECK(x.at(u, i) == 0.0);
    }
}

TEST_CASE("initialization is seeded, Xavier-bounded, with zero biases") {
    const ModelConfig cfg = toy_config(true);
    const ModelParameters a = ModelParameters::initialize(cfg, 17);
    CHECK(a == ModelParameters::initialize(cfg, 17));
    CHECK_FALSE(a == ModelParameters::initialize(cfg, 18));
    for (const auto& layer : a.encoder) {
        const double bound = std::sqrt(6.0 / static_cast<double>(layer.weight.rows() + layer.weight.cols()));
        for (double w : layer.weight.values()) CHECK(std::abs(w) <= bound);
        for (double b : layer.bias.values()) CHECK(b == 0.0);
    }
    CHECK(a.encoder.back().weight.cols() == 2 * cfg.latent);
    CHECK(a.decoder.back().weight.cols() == cfg.items);
    CHECK(a.adversary.back().weight.cols() == cfg.classes);
}

TEST_CASE("config text round trip and validation") {
    ModelConfig cfg = toy_config(true, 2.5);
    cfg.decoder_hidden = {7, 4};
    CHECK(ModelConfig::parse(cfg.to_text()) == cfg);
    ModelConfig bad = cfg;
    bad.input_dropout = 1.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = cfg;
    bad.lambda = -1.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("checkpoint round trip is bit-exact and corruption is rejected") {
    const ModelParameters params = ModelParameters::initialize(toy_config(true), 21);
    const std::string bytes = serialize_checkpoint(params);
    CHECK(deserialize_checkpoint(bytes) == params);
    CHECK(serialize_checkpoint(deserialize_checkpoint(bytes)) == bytes);

    const auto path = std::filesystem::temp_directory_path() / "advvae_test_ckpt" / "m.ckpt";
    save_checkpoint(params, path);
    CHECK(load_checkpoint(path) == params);
    std::filesystem::remove_all(path.parent_path());

    std::string bad_magic = bytes;
    bad_magic[0] = 'X';
    CHECK_THROWS_AS(deserialize_checkpoint(bad_magic), DataError);
    CHECK_THROWS_AS(deserialize_checkpoint(bytes.substr(0, bytes.size() - 3)), DataError);
    CHECK_THROWS_AS(deserialize_checkpoint(bytes + "x"), DataError);
}
