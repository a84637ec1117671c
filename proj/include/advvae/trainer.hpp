#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "advvae/dataset.hpp"
#include "advvae/metrics.hpp"
#include "advvae/model.hpp"
#include "advvae/optim.hpp"

namespace advvae {

enum class SelectionRule { BestNdcg, LastEpoch, MinAdvBacc };

const char* selection_rule_name(SelectionRule rule) noexcept;
SelectionRule parse_selection_rule(const std::string& name);

struct TrainConfig {
    std::size_t epochs = 200;
    std::size_t batch_size = 500;
    double lr = 1e-3;
    double weight_decay = 0.0;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    std::uint64_t seed = 0;
    // Linear KL warm-up over this many optimizer steps; 0 keeps beta constant.
    std::size_t beta_warmup_steps = 0;
    std::size_t validate_every = 1;
    SelectionRule selection = SelectionRule::BestNdcg;
    std::size_t top_k = 10;

    void validate() const;
    AdamConfig adam() const { return {lr, adam_beta1, adam_beta2, adam_eps, weight_decay}; }
};

struct EpochRecord {
    std::size_t epoch = 0;  // 1-based
    double loss_total = 0.0;
    double loss_multinomial = 0.0;
    double loss_kl = 0.0;
    double loss_adversarial = 0.0;
    bool validated = false;
    double val_ndcg = 0.0;
    double val_recall = 0.0;
    double val_adv_bacc = 0.0;  // NaN when the model has no adversarial head
};

struct TrainLog {
    std::vector<EpochRecord> epochs;
    std::size_t selected_epoch = 0;
    double wall_seconds = 0.0;

    // One header line plus one tab-separated row per epoch.
    std::string to_tsv() const;
};

struct TrainResult {
    ModelParameters selected;
    ModelParameters last;
    std::optional<ModelParameters> best_ndcg;
    std::optional<ModelParameters> min_adv_bacc;
    std::size_t best_ndcg_epoch = 0;
    std::size_t min_adv_bacc_epoch = 0;
    TrainLog log;
};

// Index into `values` picked by the rule: earliest maximum for BestNdcg,
// latest minimum for MinAdvBacc, final entry for LastEpoch. NaN entries are
// never selected by the metric rules.
std::size_t select_index(std::span<const double> values, SelectionRule rule);

struct RankingEval {
    std::vector<std::size_t> users;  // users with at least one target
    std::vector<double> ndcg;
    std::vector<double> recall;
    double mean_ndcg() const { return mean(ndcg); }
    double mean_recall() const { return mean(recall); }
};

// Scores every user on its held-out targets, excluding input items from the ranking.
RankingEval evaluate_ranking(const ModelParameters& params, const InteractionMatrix& matrix,
                             std::span<const std::size_t> users, std::span<const EvalSplit> splits, std::size_t k,
                             RecallNormalization norm = RecallNormalization::MinKTargets);

// Rows of `users`, each restricted to its split's input items.
Tensor input_rows(const InteractionMatrix& matrix, std::span<const EvalSplit> splits);

struct AdversaryEval {
    double acc = 0.0;
    double bacc = 0.0;
    std::vector<int> predicted;  // per labelled user, in order
    std::vector<int> truth;
};

// Accuracy of the jointly trained head h on mu, over labelled users only.
// bacc is NaN when some class has no labelled member.
AdversaryEval evaluate_adversary(const ModelParameters& params, const InteractionMatrix& matrix,
                                 std::span<const EvalSplit> splits, std::span<const std::size_t> users);

TrainResult train(const ModelConfig& model_config, const InteractionMatrix& matrix, const FoldSplit& fold,
                  const TrainConfig& config);

struct GridCandidate {
    std::string label;
    ModelConfig model;
    TrainConfig train;
};

struct GridFamily {
    std::string name;
    std::vector<GridCandidate> candidates;
};

struct CandidateOutcome {
    std::vector<TrainLog> logs;             // per fold
    std::vector<double> fold_val_ndcg;      // validation NDCG@k of the selected checkpoint
    double mean_val_ndcg = 0.0;
};

struct FamilyOutcome {
    std::string name;
    std::vector<CandidateOutcome> candidates;
    std::size_t winner = 0;
    std::vector<TrainResult> winner_results;  // per fold
    std::vector<RankingEval> winner_test;     // per fold
};

// Trains every candidate of every family on every fold, picks each family's
// winner by mean validation NDCG@k (ties: first candidate) and evaluates the
// winner on the test users.
std::vector<FamilyOutcome> grid_run(std::span<const GridFamily> families, const InteractionMatrix& matrix,
                                    std::span<const FoldSplit> folds, std::size_t workers);

}  // namespace advvae
