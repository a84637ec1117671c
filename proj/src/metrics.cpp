#include "advvae/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "advvae/error.hpp"

namespace advvae {

namespace {

void check_ranking_args(std::span<const std::size_t> targets, std::size_t k) {
    if (k < 1) {
        throw ContractError("ranking metric: k must be >= 1");
    }
    if (targets.empty()) {
        throw ContractError("ranking metric: empty target set");
    }
}

std::vector<std::size_t> sorted_copy(std::span<const std::size_t> values) {
    std::vector<std::size_t> out(values.begin(), values.end());
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
}

}  // namespace

double recall_at_k(std::span<const std::size_t> ranked, std::span<const std::size_t> targets, std::size_t k,
                   RecallNormalization norm) {
    check_ranking_args(targets, k);
    const auto relevant = sorted_copy(targets);
    const std::size_t depth = std::min(k, ranked.size());
    std::size_t hits = 0;
    for (std::size_t i = 0; i < depth; ++i) {
        hits += std::binary_search(relevant.begin(), relevant.end(), ranked[i]) ? 1 : 0;
    }
    const std::size_t denom = norm == RecallNormalization::MinKTargets ? std::min(k, relevant.size()) : relevant.size();
    return static_cast<double>(hits) / static_cast<double>(denom);
}

double ndcg_at_k(std::span<const std::size_t> ranked, std::span<const std::size_t> targets, std::size_t k) {
    check_ranking_args(targets, k);
    const auto relevant = sorted_copy(targets);
    const std::size_t depth = std::min(k, ranked.size());
    double dcg = 0.0;
    for (std::size_t i = 0; i < depth; ++i) {
        if (std::binary_search(relevant.begin(), relevant.end(), ranked[i])) {
            dcg += 1.0 / std::log2(static_cast<double>(i) + 2.0);
        }
    }
    double idcg = 0.0;
    for (std::size_t i = 0; i < std::min(k, relevant.size()); ++i) {
        idcg += 1.0 / std::log2(static_cast<double>(i) + 2.0);
    }
    return dcg / idcg;
}

void ConfusionCounts::add(int truth, int predicted) {
    if (truth < 0 || static_cast<std::size_t>(truth) >= total.size()) {
        throw ContractError("confusion counts: class " + std::to_string(truth) + " out of range");
    }
    ++total[static_cast<std::size_t>(truth)];
    if (truth == predicted) {
        ++true_positive[static_cast<std::size_t>(truth)];
    }
}

ConfusionCounts ConfusionCounts::from(std::span<const int> truth, std::span<const int> predicted,
                                      std::size_t classes) {
    if (truth.size() != predicted.size()) {
        throw DimensionError("confusion counts: label vectors differ in length");
    }
    ConfusionCounts c(classes);
    for (std::size_t i = 0; i < truth.size(); ++i) c.add(truth[i], predicted[i]);
    return c;
}

double accuracy(const ConfusionCounts& counts) {
    const auto n = std::accumulate(counts.total.begin(), counts.total.end(), std::size_t{0});
    if (n == 0) {
        throw ContractError("accuracy: no samples");
    }
    const auto tp = std::accumulate(counts.true_positive.begin(), counts.true_positive.end(), std::size_t{0});
    return static_cast<double>(tp) / static_cast<double>(n);
}

double balanced_accuracy(const ConfusionCounts& counts) {
    if (counts.total.empty()) {
        throw ContractError("balanced accuracy: no classes");
    }
    double sum = 0.0;
    for (std::size_t c = 0; c < counts.total.size(); ++c) {
        if (counts.total[c] == 0) {
            throw ContractError("balanced accuracy: class " + std::to_string(c) + " has no members");
        }
        sum += static_cast<double>(counts.true_positive[c]) / static_cast<double>(counts.total[c]);
    }
    return sum / static_cast<double>(counts.total.size());
}

namespace {

double normal_two_sided(double z) {
    return std::erfc(std::abs(z) / std::sqrt(2.0));
}

}  // namespace

TestResult wilcoxon_signed_rank(std::span<const double> a, std::span<const double> b, double alpha,
                                WilcoxonMethod method) {
    if (a.size() != b.size()) {
        throw DimensionError("wilcoxon: paired samples differ in length");
    }
    if (a.empty()) {
        throw ContractError("wilcoxon: no paired samples");
    }
    std::vector<double> diffs;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        if (d != 0.0) {
            diffs.push_back(d);
        }
    }
    TestResult result;
    result.n = diffs.size();
    if (diffs.empty()) {
        return result;
    }
    const std::size_t n = diffs.size();

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&diffs](std::size_t x, std::size_t y) { return std::abs(diffs[x]) < std::abs(diffs[y]); });

    // Doubled average ranks are integers, which makes the exact DP integral.
    std::vector<std::size_t> doubled_rank(n);
    double tie_term = 0.0;
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j + 1 < n && std::abs(diffs[order[j + 1]]) == std::abs(diffs[order[i]])) ++j;
        const std::size_t twice_avg = (i + 1) + (j + 1);
        for (std::size_t t = i; t <= j; ++t) doubled_rank[order[t]] = twice_avg;
        const double ties = static_cast<double>(j - i + 1);
        tie_term += ties * ties * ties - ties;
        i = j + 1;
    }

    std::size_t w_plus2 = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (diffs[i] > 0.0) w_plus2 += doubled_rank[i];
    }
    const std::size_t total2 = n * (n + 1);
    const double w_plus = static_cast<double>(w_plus2) / 2.0;
    const double w_minus = static_cast<double>(total2 - w_plus2) / 2.0;
    result.statistic = std::min(w_plus, w_minus);

    const bool exact =
        method == WilcoxonMethod::Exact || (method == WilcoxonMethod::Auto && n <= kWilcoxonExactLimit);
    if (exact) {
        // counts[s]: number of sign assignments whose doubled positive-rank sum is s.
        std::vector<double> counts(total2 + 1, 0.0);
        counts[0] = 1.0;
        std::size_t reach = 0;
        for (std::size_t r : doubled_rank) {
            for (std::size_t s = reach + 1; s-- > 0;) {
                if (counts[s] != 0.0) counts[s + r] += counts[s];
            }
            reach += r;
        }
        const double all = std::ldexp(1.0, static_cast<int>(n));
        double lower = 0.0, upper = 0.0;
        for (std::size_t s = 0; s <= total2; ++s) {
            if (s <= w_plus2) lower += counts[s];
            if (s >= w_plus2) upper += counts[s];
        }
        result.p_value = std::min(1.0, 2.0 * std::min(lower, upper) / all);
        result.exact = true;
    } else {
        const double nd = static_cast<double>(n);
        const double mean_w = nd * (nd + 1.0) / 4.0;
        const double var_w = nd * (nd + 1.0) * (2.0 * nd + 1.0) / 24.0 - tie_term / 48.0;
        if (var_w <= 0.0) {
            result.p_value = 1.0;
        } else {
            const double z = std::max(0.0, std::abs(w_plus - mean_w) - 0.5) / std::sqrt(var_w);
            result.p_value = std::min(1.0, normal_two_sided(z));
        }
    }
    result.significant = result.p_value < alpha;
    return result;
}

TestResult mcnemar_counts(std::size_t b, std::size_t c, double alpha) {
    TestResult result;
    const std::size_t n = b + c;
    result.n = n;
    if (n == 0) {
        return result;
    }
    const double diff = std::max(0.0, std::abs(static_cast<double>(b) - static_cast<double>(c)) - 1.0);
    result.statistic = diff * diff / static_cast<double>(n);
    if (n < kMcNemarExactLimit) {
        // Two-sided exact binomial(n, 1/2) tail at min(b, c).
        const std::size_t m = std::min(b, c);
        double tail = 0.0;
        double coeff = 1.0;  // C(n, i)
        for (std::size_t i = 0; i <= m; ++i) {
            tail += coeff;
            coeff = coeff * static_cast<double>(n - i) / static_cast<double>(i + 1);
        }
        result.p_value = std::min(1.0, 2.0 * tail / std::ldexp(1.0, static_cast<int>(n)));
        result.exact = true;
    } else {
        result.p_value = std::erfc(std::sqrt(result.statistic / 2.0));
    }
    result.significant = result.p_value < alpha;
    return result;
}

TestResult mcnemar(const std::vector<bool>& correct_a, const std::vector<bool>& correct_b, double alpha) {
    if (correct_a.size() != correct_b.size()) {
        throw DimensionError("mcnemar: outcome vectors differ in length");
    }
    std::size_t b = 0, c = 0;
    for (std::size_t i = 0; i < correct_a.size(); ++i) {
        if (correct_a[i] && !correct_b[i]) ++b;
        if (!correct_a[i] && correct_b[i]) ++c;
    }
    return mcnemar_counts(b, c, alpha);
}

double mean(std::span<const double> values) {
    if (values.empty()) {
        return std::nan("");
    }
    return std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
}

}  // namespace advvae
