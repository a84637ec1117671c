#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace advvae {

// Denominator of recall@k. MinKTargets is the normalized recall common in the
// VAE-for-CF literature; Targets is the textbook |relevant| denominator.
enum class RecallNormalization { MinKTargets, Targets };

// `ranked` is the recommendation list (best first, no duplicates); only the
// first k entries count. `targets` is the held-out relevant set; it must be
// non-empty (users without targets are filtered out before scoring).
double recall_at_k(std::span<const std::size_t> ranked, std::span<const std::size_t> targets, std::size_t k = 10,
                   RecallNormalization norm = RecallNormalization::MinKTargets);
double ndcg_at_k(std::span<const std::size_t> ranked, std::span<const std::size_t> targets, std::size_t k = 10);

struct ConfusionCounts {
    std::vector<std::size_t> true_positive;  // per true class
    std::vector<std::size_t> total;          // per true class

    explicit ConfusionCounts(std::size_t classes = 2) : true_positive(classes, 0), total(classes, 0) {}

    void add(int truth, int predicted);
    static ConfusionCounts from(std::span<const int> truth, std::span<const int> predicted, std::size_t classes);
};

double accuracy(const ConfusionCounts& counts);
// Mean per-class recall. Every class must have at least one member.
double balanced_accuracy(const ConfusionCounts& counts);

struct TestResult {
    double statistic = 0.0;
    double p_value = 1.0;
    bool significant = false;
    std::size_t n = 0;  // non-zero differences (Wilcoxon) or discordant pairs (McNemar)
    bool exact = false;
};

enum class WilcoxonMethod { Auto, Exact, Normal };

// Two-sided Wilcoxon signed-rank test on paired samples. Zero differences are
// dropped, tied magnitudes share their average rank. Auto uses the exact null
// distribution for n <= 25 and the tie- and continuity-corrected normal
// approximation above that. Statistic is min(W+, W-).
TestResult wilcoxon_signed_rank(std::span<const double> a, std::span<const double> b, double alpha = 0.05,
                                WilcoxonMethod method = WilcoxonMethod::Auto);

inline constexpr std::size_t kWilcoxonExactLimit = 25;
inline constexpr std::size_t kMcNemarExactLimit = 25;

// McNemar's test on per-item correctness of two classifiers.
// b = A right / B wrong, c = A wrong / B right.
TestResult mcnemar(const std::vector<bool>& correct_a, const std::vector<bool>& correct_b, double alpha = 0.05);
TestResult mcnemar_counts(std::size_t b, std::size_t c, double alpha = 0.05);

double mean(std::span<const double> values);

}  // namespace advvae
