#pragma once

#include <cstdint>
#include <filesystem>
#include <istream>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "advvae/rng.hpp"
#include "advvae/tensor.hpp"

namespace advvae {

struct RawInteraction {
    std::string user;
    std::string item;
    double weight = 1.0;
    std::optional<std::int64_t> timestamp;
};

// Column layout of the interaction file and of the user-attribute file.
struct FormatSpec {
    std::string delimiter = "::";
    std::size_t user_column = 0;
    std::size_t item_column = 1;
    // Missing weight column means every line counts as weight 1.
    std::optional<std::size_t> weight_column = 2;
    std::optional<std::size_t> timestamp_column = 3;
    bool header = false;

    std::string user_delimiter = "::";
    std::size_t user_id_column = 0;
    std::size_t label_column = 1;
    bool user_header = false;
    // Label strings in class-id order; anything else is an unknown label.
    std::vector<std::string> class_names{"M", "F"};

    // ratings.dat / users.dat
    static FormatSpec movielens();
    // Tab-separated user, track, play count; users file: user, gender.
    static FormatSpec lfm();
};

struct RawDataset {
    std::vector<RawInteraction> interactions;
    std::map<std::string, int> labels;  // user id -> class id (kUnknownLabel allowed)
    std::vector<std::string> class_names;
};

std::vector<RawInteraction> parse_interactions(std::istream& in, const FormatSpec& format);
std::map<std::string, int> parse_user_labels(std::istream& in, const FormatSpec& format);
RawDataset ingest(const std::filesystem::path& interactions, const std::optional<std::filesystem::path>& users,
                  const FormatSpec& format);

struct PreprocessOptions {
    double min_weight = 0.0;
    std::size_t min_user_degree = 5;
    std::size_t min_item_degree = 5;
    // Keep this many randomly chosen items before degree filtering; 0 keeps all.
    std::size_t item_sample = 0;
    std::uint64_t seed = 0;
};

// Binary user x item matrix in CSR form. Row entries are sorted item indices.
struct InteractionMatrix {
    std::vector<std::string> user_ids;
    std::vector<std::string> item_ids;
    std::vector<std::size_t> row_ptr{0};
    std::vector<std::uint32_t> col_idx;
    std::vector<int> labels;  // per user, kUnknownLabel if not known
    std::vector<std::string> class_names;

    std::size_t users() const noexcept { return user_ids.size(); }
    std::size_t items() const noexcept { return item_ids.size(); }
    std::size_t nnz() const noexcept { return col_idx.size(); }
    std::size_t classes() const noexcept { return class_names.size(); }
    std::span<const std::uint32_t> row(std::size_t user) const {
        return {col_idx.data() + row_ptr[user], row_ptr[user + 1] - row_ptr[user]};
    }

    // Rows of `users` as a dense batch x items 0/1 tensor.
    Tensor dense_rows(std::span<const std::size_t> users) const;
    bool operator==(const InteractionMatrix&) const = default;
};

// Drops interactions below min_weight, binarizes, optionally subsamples items,
// then removes low-degree users and items until both thresholds hold at once.
InteractionMatrix preprocess(const RawDataset& raw, const PreprocessOptions& options);
RawDataset to_raw(const InteractionMatrix& matrix);

struct ClassStats {
    std::string name;
    std::size_t users = 0;
    std::size_t interactions = 0;
};

struct DatasetStats {
    std::size_t users = 0;
    std::size_t items = 0;
    std::size_t interactions = 0;
    std::vector<ClassStats> per_class;
    std::size_t unknown_users = 0;
};

DatasetStats statistics(const InteractionMatrix& matrix);
std::string format_statistics(const DatasetStats& stats, const std::string& name);

// Versioned binary cache: magic "AVDS", u32 version, fingerprint, class names,
// user and item id maps, CSR arrays, labels.
inline constexpr std::uint32_t kDatasetCacheVersion = 1;
std::string serialize_dataset(const InteractionMatrix& matrix, const std::string& fingerprint);
InteractionMatrix deserialize_dataset(const std::string& bytes, std::string* fingerprint = nullptr);
void save_dataset(const InteractionMatrix& matrix, const std::string& fingerprint, const std::filesystem::path& path);
InteractionMatrix load_dataset(const std::filesystem::path& path, std::string* fingerprint = nullptr);

struct EvalSplit {
    std::vector<std::size_t> input;   // ceil(80%) of the user's items, model input
    std::vector<std::size_t> target;  // remaining items, scored against the ranking
};

struct FoldSplit {
    std::size_t fold = 0;
    std::vector<std::size_t> train_users;  // after upsampling, with repeats
    std::vector<std::size_t> validation_users;
    std::vector<std::size_t> test_users;
    std::vector<EvalSplit> validation_splits;  // aligned with validation_users
    std::vector<EvalSplit> test_splits;        // aligned with test_users
};

inline constexpr double kInputFraction = 0.8;

// Seeded per-(fold, user) interaction split; input and target are disjoint
// and cover every item.
EvalSplit split_interactions(std::span<const std::uint32_t> items, std::uint64_t seed, std::size_t fold,
                             std::size_t user, double input_fraction = kInputFraction);

// Resamples minority-class users with replacement until every class has as many
// members as the largest one. Unknown-label users are kept once. The returned
// list is `users` followed by the added copies.
std::vector<std::size_t> upsample_minority(std::span<const std::size_t> users, std::span<const int> labels,
                                           std::size_t classes, Rng& rng);

// User-split cross-validation. Fold i tests on part i, validates on part
// (i + 1) mod n and trains on the rest.
std::vector<FoldSplit> make_folds(const InteractionMatrix& matrix, std::size_t n_folds, std::uint64_t seed);

// Desk-scale biased dataset: two equal user classes, items in a block
// preferred by each class plus a shared block.
struct SyntheticSpec {
    std::size_t users = 400;
    std::size_t items = 60;
    double p_own = 0.6;
    double p_other = 0.05;
    double p_shared = 0.3;
    std::uint64_t seed = 7;
};

struct SyntheticFiles {
    std::string ratings;  // movielens ratings.dat format
    std::string users;    // movielens users.dat format
};

SyntheticFiles generate_synthetic(const SyntheticSpec& spec);

}  // namespace advvae
