#include "advvae/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "advvae/error.hpp"
#include "advvae/model.hpp"
#include "binary_io.hpp"
#include "text_util.hpp"

namespace advvae {

FormatSpec FormatSpec::movielens() {
    return FormatSpec{};
}

FormatSpec FormatSpec::lfm() {
    FormatSpec f;
    f.delimiter = "\t";
    f.weight_column = 2;
    f.timestamp_column = std::nullopt;
    f.user_delimiter = "\t";
    f.user_id_column = 0;
    f.label_column = 1;
    f.class_names = {"m", "f"};
    return f;
}

namespace {

bool all_digits(std::string_view s) {
    return !s.empty() && std::all_of(s.begin(), s.end(), [](char c) { return c >= '0' && c <= '9'; });
}

// Numeric ids sort numerically, everything else lexicographically after them.
bool natural_less(const std::string& a, const std::string& b) {
    const bool da = all_digits(a), db = all_digits(b);
    if (da != db) {
        return da;
    }
    if (da) {
        const auto sa = std::string_view(a).substr(std::min(a.find_first_not_of('0'), a.size()));
        const auto sb = std::string_view(b).substr(std::min(b.find_first_not_of('0'), b.size()));
        if (sa.size() != sb.size()) {
            return sa.size() < sb.size();
        }
        if (sa != sb) {
            return sa < sb;
        }
    }
    return a < b;
}

std::string_view field(const std::vector<std::string_view>& fields, std::size_t column, std::size_t line,
                       const char* what) {
    if (column >= fields.size()) {
        throw ParseError(std::string("missing ") + what + " column " + std::to_string(column), line);
    }
    return detail::trim(fields[column]);
}

}  // namespace

std::vector<RawInteraction> parse_interactions(std::istream& in, const FormatSpec& format) {
    std::vector<RawInteraction> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (format.header && line_no == 1) {
            continue;
        }
        if (detail::trim(line).empty()) {
            continue;
        }
        const auto fields = detail::split(line, format.delimiter);
        RawInteraction r;
        r.user = std::string(field(fields, format.user_column, line_no, "user"));
        r.item = std::string(field(fields, format.item_column, line_no, "item"));
        if (r.user.empty() || r.item.empty()) {
            throw ParseError("empty user or item id", line_no);
        }
        try {
            if (format.weight_column) {
                r.weight = detail::parse_double(field(fields, *format.weight_column, line_no, "weight"), "weight");
            }
            if (format.timestamp_column) {
                r.timestamp = static_cast<std::int64_t>(
                    detail::parse_double(field(fields, *format.timestamp_column, line_no, "timestamp"), "timestamp"));
            }
        } catch (const ConfigError& e) {
            throw ParseError(e.what(), line_no);
        }
        if (!(r.weight >= 0.0)) {
            throw ParseError("negative interaction weight", line_no);
        }
        out.push_back(std::move(r));
    }
    return out;
}

std::map<std::string, int> parse_user_labels(std::istream& in, const FormatSpec& format) {
    std::map<std::string, int> labels;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (format.user_header && line_no == 1) {
            continue;
        }
        if (detail::trim(line).empty()) {
            continue;
        }
        const auto fields = detail::split(line, format.user_delimiter);
        const std::string user(field(fields, format.user_id_column, line_no, "user"));
        const auto value = field(fields, format.label_column, line_no, "label");
        int label = kUnknownLabel;
        for (std::size_t c = 0; c < format.class_names.size(); ++c) {
            if (value == format.class_names[c]) {
                label = static_cast<int>(c);
            }
        }
        labels[user] = label;
    }
    return labels;
}

RawDataset ingest(const std::filesystem::path& interactions, const std::optional<std::filesystem::path>& users,
                  const FormatSpec& format) {
    std::ifstream in(interactions);
    if (!in) {
        throw ConfigError("cannot open interaction file '" + interactions.string() + "'");
    }
    RawDataset raw;
    raw.class_names = format.class_names;
    raw.interactions = parse_interactions(in, format);
    if (users) {
        std::ifstream uin(*users);
        if (!uin) {
            throw ConfigError("cannot open user file '" + users->string() + "'");
        }
        raw.labels = parse_user_labels(uin, format);
    }
    return raw;
}

Tensor InteractionMatrix::dense_rows(std::span<const std::size_t> users) const {
    Tensor out = Tensor::matrix(users.size(), items());
    for (std::size_t r = 0; r < users.size(); ++r) {
        for (std::uint32_t item : row(users[r])) {
            out.at(r, item) = 1.0;
        }
    }
    return out;
}

InteractionMatrix preprocess(const RawDataset& raw, const PreprocessOptions& options) {
    if (!(options.min_weight >= 0.0)) {
        throw ConfigError("preprocess: min_weight must be >= 0");
    }
    // Weight filter and binarization; duplicate (user, item) lines collapse.
    std::set<std::pair<std::string, std::string>> kept;
    for (const auto& r : raw.interactions) {
        if (r.weight >= options.min_weight) {
            kept.emplace(r.user, r.item);
        }
    }

    if (options.item_sample > 0) {
        std::vector<std::string> items;
        for (const auto& [u, i] : kept) items.push_back(i);
        std::sort(items.begin(), items.end(), natural_less);
        items.erase(std::unique(items.begin(), items.end()), items.end());
        if (items.size() > options.item_sample) {
            Rng rng(options.seed, Stream::ItemSample);
            rng.shuffle(items);
            items.resize(options.item_sample);
            const std::unordered_set<std::string> chosen(items.begin(), items.end());
            std::erase_if(kept, [&chosen](const auto& p) { return !chosen.contains(p.second); });
        }
    }

    // Degree filtering to a fixpoint.
    for (;;) {
        std::unordered_map<std::string, std::size_t> user_deg, item_deg;
        for (const auto& [u, i] : kept) {
            ++user_deg[u];
            ++item_deg[i];
        }
        const std::size_t before = kept.size();
        std::erase_if(kept, [&](const auto& p) {
            return user_deg[p.first] < options.min_user_degree || item_deg[p.second] < options.min_item_degree;
        });
        if (kept.size() == before) {
            break;
        }
    }
    if (kept.empty()) {
        throw DataError("preprocess: no interactions survive filtering");
    }

    InteractionMatrix m;
    m.class_names = raw.class_names;
    std::set<std::string, decltype(&natural_less)> users(natural_less), items(natural_less);
    for (const auto& [u, i] : kept) {
        users.insert(u);
        items.insert(i);
    }
    m.user_ids.assign(users.begin(), users.end());
    m.item_ids.assign(items.begin(), items.end());
    std::unordered_map<std::string, std::uint32_t> item_index;
    for (std::size_t i = 0; i < m.item_ids.size(); ++i) item_index[m.item_ids[i]] = static_cast<std::uint32_t>(i);
    std::unordered_map<std::string, std::vector<std::uint32_t>> rows;
    for (const auto& [u, i] : kept) rows[u].push_back(item_index.at(i));
    for (const auto& u : m.user_ids) {
        auto& r = rows[u];
        std::sort(r.begin(), r.end());
        m.col_idx.insert(m.col_idx.end(), r.begin(), r.end());
        m.row_ptr.push_back(m.col_idx.size());
        const auto it = raw.labels.find(u);
        m.labels.push_back(it == raw.labels.end() ? kUnknownLabel : it->second);
    }
    return m;
}

RawDataset to_raw(const InteractionMatrix& matrix) {
    RawDataset raw;
    raw.class_names = matrix.class_names;
    for (std::size_t u = 0; u < matrix.users(); ++u) {
        for (std::uint32_t i : matrix.row(u)) {
            raw.interactions.push_back({matrix.user_ids[u], matrix.item_ids[i], 1.0, std::nullopt});
        }
        raw.labels[matrix.user_ids[u]] = matrix.labels[u];
    }
    return raw;
}

DatasetStats statistics(const InteractionMatrix& matrix) {
    DatasetStats s;
    s.users = matrix.users();
    s.items = matrix.items();
    s.interactions = matrix.nnz();
    for (const auto& name : matrix.class_names) s.per_class.push_back({name, 0, 0});
    for (std::size_t u = 0; u < matrix.users(); ++u) {
        const int y = matrix.labels[u];
        if (y == kUnknownLabel) {
            ++s.unknown_users;
            continue;
        }
        auto& c = s.per_class.at(static_cast<std::size_t>(y));
        ++c.users;
        c.interactions += matrix.row(u).size();
    }
    return s;
}

std::string format_statistics(const DatasetStats& stats, const std::string& name) {
    std::ostringstream out;
    out << "dataset\tgroup\tusers\titems\tinteractions\n";
    out << name << "\tall\t" << stats.users << '\t' << stats.items << '\t' << stats.interactions << '\n';
    for (const auto& c : stats.per_class) {
        out << name << '\t' << c.name << '\t' << c.users << '\t' << stats.items << '\t' << c.interactions << '\n';
    }
    if (stats.unknown_users) {
        out << name << "\tunknown\t" << stats.unknown_users << '\t' << stats.items << "\t-\n";
    }
    return out.str();
}

std::string serialize_dataset(const InteractionMatrix& matrix, const std::string& fingerprint) {
    detail::ByteWriter w;
    w.raw("AVDS");
    w.u32(kDatasetCacheVersion);
    w.str64(fingerprint);
    w.u32(static_cast<std::uint32_t>(matrix.class_names.size()));
    for (const auto& c : matrix.class_names) w.str32(c);
    w.u64(matrix.users());
    for (const auto& u : matrix.user_ids) w.str32(u);
    w.u64(matrix.items());
    for (const auto& i : matrix.item_ids) w.str32(i);
    for (std::size_t p : matrix.row_ptr) w.u64(p);
    for (std::uint32_t c : matrix.col_idx) w.u32(c);
    for (int y : matrix.labels) w.i32(y);
    return w.take();
}

InteractionMatrix deserialize_dataset(const std::string& bytes, std::string* fingerprint) {
    detail::ByteReader r(bytes, "dataset cache");
    if (r.raw(4) != "AVDS") {
        throw DataError("dataset cache: bad magic");
    }
    if (const auto v = r.u32(); v != kDatasetCacheVersion) {
        throw DataError("dataset cache: unsupported version " + std::to_string(v));
    }
    InteractionMatrix m;
    std::string fp = r.str64();
    if (fingerprint) {
        *fingerprint = std::move(fp);
    }
    const std::uint32_t classes = r.u32();
    for (std::uint32_t c = 0; c < classes; ++c) m.class_names.push_back(r.str32());
    const std::uint64_t users = r.u64();
    r.need(users * 4);
    for (std::uint64_t u = 0; u < users; ++u) m.user_ids.push_back(r.str32());
    const std::uint64_t items = r.u64();
    r.need(items * 4);
    for (std::uint64_t i = 0; i < items; ++i) m.item_ids.push_back(r.str32());
    r.need((users + 1) * 8);
    m.row_ptr.assign(users + 1, 0);
    for (auto& p : m.row_ptr) p = r.u64();
    const std::size_t nnz = m.row_ptr.back();
    r.need(nnz * 4);
    m.col_idx.resize(nnz);
    for (auto& c : m.col_idx) {
        c = r.u32();
        if (c >= items) {
            throw DataError("dataset cache: item index out of range");
        }
    }
    r.need(users * 4);
    m.labels.resize(users);
    for (auto& y : m.labels) y = r.i32();
    if (!r.done()) {
        throw DataError("dataset cache: trailing bytes");
    }
    return m;
}

void save_dataset(const InteractionMatrix& matrix, const std::string& fingerprint, const std::filesystem::path& path) {
    detail::write_file_atomic(path.string(), serialize_dataset(matrix, fingerprint));
}

InteractionMatrix load_dataset(const std::filesystem::path& path, std::string* fingerprint) {
    return deserialize_dataset(detail::read_file(path.string()), fingerprint);
}

EvalSplit split_interactions(std::span<const std::uint32_t> items, std::uint64_t seed, std::size_t fold,
                             std::size_t user, double input_fraction) {
    std::vector<std::size_t> order(items.begin(), items.end());
    Rng rng(seed, Stream::EvalSplit, (static_cast<std::uint64_t>(fold) << 40) ^ user);
    rng.shuffle(order);
    const auto n_input = static_cast<std::size_t>(
        std::ceil(input_fraction * static_cast<double>(order.size()) - 1e-9));
    EvalSplit split;
    split.input.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_input));
    split.target.assign(order.begin() + static_cast<std::ptrdiff_t>(n_input), order.end());
    std::sort(split.input.begin(), split.input.end());
    std::sort(split.target.begin(), split.target.end());
    return split;
}

std::vector<std::size_t> upsample_minority(std::span<const std::size_t> users, std::span<const int> labels,
                                           std::size_t classes, Rng& rng) {
    std::vector<std::vector<std::size_t>> by_class(classes);
    for (std::size_t u : users) {
        const int y = labels[u];
        if (y == kUnknownLabel) {
            continue;
        }
        if (y < 0 || static_cast<std::size_t>(y) >= classes) {
            throw DataError("upsample: label " + std::to_string(y) + " out of range");
        }
        by_class[static_cast<std::size_t>(y)].push_back(u);
    }
    std::vector<std::size_t> out(users.begin(), users.end());
    std::size_t largest = 0;
    for (const auto& members : by_class) largest = std::max(largest, members.size());
    if (largest == 0) {
        return out;
    }
    for (std::size_t c = 0; c < classes; ++c) {
        const auto& members = by_class[c];
        if (members.empty()) {
            throw DataError("upsample: class " + std::to_string(c) + " has no training users");
        }
        for (std::size_t k = members.size(); k < largest; ++k) {
            out.push_back(members[rng.below(members.size())]);
        }
    }
    return out;
}

std::vector<FoldSplit> make_folds(const InteractionMatrix& matrix, std::size_t n_folds, std::uint64_t seed) {
    if (n_folds < 3) {
        throw ConfigError("make_folds: need at least 3 folds");
    }
    const std::size_t n = matrix.users();
    if (n < n_folds) {
        throw DataError("make_folds: fewer users than folds");
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng(seed, Stream::Folds);
    shuffle_rng.shuffle(order);

    std::vector<std::vector<std::size_t>> parts(n_folds);
    for (std::size_t f = 0; f < n_folds; ++f) {
        const std::size_t begin = f * n / n_folds, end = (f + 1) * n / n_folds;
        parts[f].assign(order.begin() + static_cast<std::ptrdiff_t>(begin),
                        order.begin() + static_cast<std::ptrdiff_t>(end));
    }

    std::vector<FoldSplit> folds;
    for (std::size_t f = 0; f < n_folds; ++f) {
        FoldSplit split;
        split.fold = f;
        split.test_users = parts[f];
        split.validation_users = parts[(f + 1) % n_folds];
        std::vector<std::size_t> train;
        for (std::size_t k = 2; k < n_folds; ++k) {
            const auto& p = parts[(f + k) % n_folds];
            train.insert(train.end(), p.begin(), p.end());
        }
        Rng up_rng(seed, Stream::Upsample, f);
        split.train_users = upsample_minority(train, matrix.labels, matrix.classes(), up_rng);
        for (std::size_t u : split.validation_users) {
            split.validation_splits.push_back(split_interactions(matrix.row(u), seed, f, u));
        }
        for (std::size_t u : split.test_users) {
            split.test_splits.push_back(split_interactions(matrix.row(u), seed, f, u));
        }
        folds.push_back(std::move(split));
    }
    return folds;
}

SyntheticFiles generate_synthetic(const SyntheticSpec& spec) {
    if (spec.users < 2 || spec.users % 2 != 0) {
        throw ConfigError("genseed: users must be an even number >= 2");
    }
    if (spec.items < 3) {
        throw ConfigError("genseed: need at least 3 items");
    }
    for (double p : {spec.p_own, spec.p_other, spec.p_shared}) {
        if (!(p >= 0.0 && p <= 1.0)) {
            throw ConfigError("genseed: probabilities must lie in [0, 1]");
        }
    }
    // Item blocks: [0, b) preferred by class 0, [b, 2b) by class 1, rest shared.
    const std::size_t block = spec.items / 3;
    std::vector<int> labels(spec.users);
    for (std::size_t u = 0; u < spec.users; ++u) labels[u] = u < spec.users / 2 ? 0 : 1;
    Rng label_rng(spec.seed, Stream::Generator, 0);
    label_rng.shuffle(labels);

    std::ostringstream ratings, users;
    for (std::size_t u = 0; u < spec.users; ++u) {
        Rng rng(spec.seed, Stream::Generator, u + 1);
        const int y = labels[u];
        for (std::size_t i = 0; i < spec.items; ++i) {
            double p = spec.p_shared;
            if (i < 2 * block) {
                const int owner = i < block ? 0 : 1;
                p = owner == y ? spec.p_own : spec.p_other;
            }
            if (rng.bernoulli(p)) {
                ratings << (u + 1) << "::" << (i + 1) << "::1::0\n";
            }
        }
        users << (u + 1) << "::" << (y == 0 ? "M" : "F") << "::1::0::00000\n";
    }
    return {ratings.str(), users.str()};
}

}  // namespace advvae
