#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "advvae/dataset.hpp"
#include "advvae/model.hpp"

namespace advvae {

struct AttackerConfig {
    std::size_t heads = 5;
    // Empty means one hidden layer as wide as the latent vector.
    std::vector<std::size_t> hidden{};
    std::size_t epochs = 50;
    std::size_t batch_size = 64;
    double lr = 1e-3;
    double weight_decay = 0.0;
    // Share of the attacker's training pool held out for checkpoint selection.
    double validation_fraction = 0.1;
    std::uint64_t seed = 0;

    void validate() const;
};

// Latent vectors (mu) with the matching protected labels.
struct LabeledLatents {
    std::vector<std::size_t> users;
    Tensor latents;  // users x latent
    std::vector<int> labels;
};

// Deterministic encoder pass (z = mu). Rows follow `users`. When `splits` is
// non-empty it must align with `users` and only each split's input items are
// fed to the encoder; otherwise the full interaction rows are used.
LabeledLatents extract_latents(const ModelParameters& params, const InteractionMatrix& matrix,
                               std::span<const std::size_t> users, std::span<const EvalSplit> splits = {});

struct HeadReport {
    double train_acc = 0.0;
    double train_bacc = 0.0;
    double validation_bacc = 0.0;
    std::size_t selected_epoch = 0;
    double test_acc = 0.0;
    double test_bacc = 0.0;
};

struct AttackReport {
    std::vector<HeadReport> heads;
    std::size_t reported_head = 0;  // argmax test BAcc, lowest index on ties
    double acc = 0.0;
    double bacc = 0.0;
    std::vector<std::size_t> test_users;
    std::vector<int> test_truth;
    std::vector<int> test_predicted;

    std::string to_json() const;
};

// Trains `heads` independently seeded classifiers on the train latents and
// reports the strongest on the evaluation latents. Unknown-label users are
// dropped. Head i depends only on (seed, i), so adding heads never lowers the
// reported BAcc.
AttackReport attack(const LabeledLatents& train, const LabeledLatents& eval, std::size_t classes,
                    const AttackerConfig& config);

// Tab-separated rows: user id, true label, predicted label, mu components.
std::string latent_export_tsv(const LabeledLatents& eval, const AttackReport& report,
                              const InteractionMatrix& matrix);

}  // namespace advvae
