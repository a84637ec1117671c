#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "advvae/autodiff.hpp"
#include "advvae/tensor.hpp"

namespace advvae {

// Class label for users whose protected attribute is not known.
inline constexpr int kUnknownLabel = -1;

struct ModelConfig {
    std::size_t items = 0;
    std::vector<std::size_t> encoder_hidden{600};
    std::size_t latent = 200;
    // Empty means mirror of encoder_hidden.
    std::vector<std::size_t> decoder_hidden{};
    std::vector<std::size_t> adversary_hidden{200};
    double beta = 0.2;
    double lambda = 1.0;
    double input_dropout = 0.5;
    double hidden_dropout = 0.0;
    std::size_t classes = 2;
    // false builds plain MultVAE (no adversarial head).
    bool adversarial = true;

    std::vector<std::size_t> effective_decoder_hidden() const;
    void validate() const;

    // "key=value" lines; parse() accepts exactly what to_text() emits.
    std::string to_text() const;
    static ModelConfig parse(const std::string& text);
    bool operator==(const ModelConfig&) const = default;
};

struct Dense {
    Tensor weight;  // fan_in x fan_out
    Tensor bias;    // 1 x fan_out
    bool operator==(const Dense&) const = default;
};

struct ModelParameters {
    ModelConfig config;
    std::vector<Dense> encoder;    // last layer emits mu || log_var (2 * latent wide)
    std::vector<Dense> decoder;
    std::vector<Dense> adversary;  // empty for plain MultVAE

    // Xavier-uniform weights, zero biases. Each layer draws from its own
    // stream, so adding the adversary does not perturb encoder/decoder init.
    static ModelParameters initialize(const ModelConfig& config, std::uint64_t seed);

    struct Named {
        std::string name;
        Tensor* tensor;
    };
    struct ConstNamed {
        std::string name;
        const Tensor* tensor;
    };
    // Stable order: encoder, decoder, adversary; weight before bias.
    std::vector<Named> named();
    std::vector<ConstNamed> named() const;

    bool all_finite() const;
    bool operator==(const ModelParameters&) const = default;
};

// Checkpoint container. Layout (little-endian):
//   magic "AVCK", u32 version, u64 config-text length, config text,
//   u32 tensor count, then per tensor: u32 name length, name, u32 rank,
//   u64 dims[rank], f64 data[numel].
inline constexpr std::uint32_t kCheckpointVersion = 1;
std::string serialize_checkpoint(const ModelParameters& params);
ModelParameters deserialize_checkpoint(const std::string& bytes);
void save_checkpoint(const ModelParameters& params, const std::filesystem::path& path);
ModelParameters load_checkpoint(const std::filesystem::path& path);

struct BoundLayer {
    Var weight;
    Var bias;
};

// Parameters lifted onto a tape as trainable leaves.
struct BoundModel {
    const ModelConfig* config = nullptr;
    std::vector<BoundLayer> encoder;
    std::vector<BoundLayer> decoder;
    std::vector<BoundLayer> adversary;

    // Gradient of every parameter after Tape::backward, same order as ModelParameters::named().
    std::vector<Tensor> gradients() const;
};

BoundModel bind(Tape& tape, const ModelParameters& params);

struct Encoded {
    Var mu;
    Var log_var;
    Var z;
};

// Random streams consumed by one forward pass. Null streams are only allowed
// when training is false.
struct ForwardRng {
    Rng* dropout = nullptr;
    Rng* sampling = nullptr;
};

Encoded encode(const BoundModel& model, Var x, bool training, ForwardRng rng);
Var decode(const BoundModel& model, Var z, bool training, ForwardRng rng);
// Adversarial head over grl(z).
Var adversary_logits(const BoundModel& model, Var z, double lambda);

// -(1/batch) * sum_u sum_i x_ui * log softmax(logits_u)_i
Var loss_multinomial(Var logits, Var x);
// (1/batch) * sum_u -1/2 * sum_d (1 + log_var - mu^2 - exp(log_var))
Var loss_kl(Var mu, Var log_var);
// Mean softmax cross-entropy over users with a known label; kUnknownLabel rows are skipped.
Var loss_adversarial(Var adv_logits, std::span<const int> labels);

struct LossBreakdown {
    Var total;
    double multinomial = 0.0;
    double kl = 0.0;
    double adversarial = 0.0;
    Encoded encoded;
    Var logits;
    std::optional<Var> adv_logits;
};

// L = NLL_mult + beta * KL (+ CE(h(grl(z)), y) when the model is adversarial).
LossBreakdown total_loss(const BoundModel& model, const Tensor& x, std::span<const int> labels, double beta,
                         bool training, ForwardRng rng);

// Deterministic (training-off) pass without a persistent tape.
struct ForwardOutput {
    Tensor mu;
    Tensor log_var;
    Tensor z;
    Tensor logits;
    std::optional<Tensor> adv_logits;
};
ForwardOutput infer(const ModelParameters& params, const Tensor& x);

// Top-k item ids by score, skipping items whose mask entry is non-zero.
// Ties go to the lower item id. Returns fewer than k ids only when fewer
// items are unmasked.
std::vector<std::size_t> top_k(std::span<const double> scores, std::size_t k, std::span<const double> exclude = {});
std::vector<std::vector<std::size_t>> recommend(const ModelParameters& params, const Tensor& x, std::size_t k,
                                                const Tensor* exclude);

}  // namespace advvae
