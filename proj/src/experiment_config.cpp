#include <fstream>
#include <sstream>

#include <openssl/evp.h>

#include "advvae/error.hpp"
#include "advvae/experiment.hpp"
#include "text_util.hpp"

namespace advvae {

const char* family_name(Family family) noexcept {
    return family == Family::MultVae ? "multvae" : "adv-multvae";
}

Family parse_family(const std::string& name) {
    if (name == "multvae") return Family::MultVae;
    if (name == "adv-multvae") return Family::AdvMultVae;
    throw ConfigError("unknown model family '" + name + "' (expected multvae or adv-multvae)");
}

const std::vector<ModelKind>& model_kinds() {
    static const std::vector<ModelKind> kinds{
        {"multvae-best", Family::MultVae, "best"},
        {"multvae-last", Family::MultVae, "last"},
        {"adv-multvae", Family::AdvMultVae, "selected"},
    };
    return kinds;
}

std::string sha256_hex(std::string_view bytes) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
        throw Error("sha256 failed");
    }
    static constexpr char hex[] = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out += hex[digest[i] >> 4];
        out += hex[digest[i] & 0xf];
    }
    return out;
}

namespace {

using detail::parse_bool;
using detail::parse_double;
using detail::parse_double_list;
using detail::parse_size_list;
using detail::parse_u64;

std::string unescape(std::string_view s) {
    std::string out;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (s[i] == '\\' && i + 1 < s.size()) {
            const char c = s[++i];
            out += c == 't' ? '\t' : c == 'n' ? '\n' : c == 's' ? ' ' : c;
        } else {
            out += s[i];
        }
    }
    return out;
}

std::optional<std::size_t> optional_column(std::string_view v, std::string_view key) {
    if (detail::trim(v) == "none") return std::nullopt;
    return static_cast<std::size_t>(parse_u64(v, key));
}

std::vector<std::string> parse_string_list(std::string_view v) {
    std::vector<std::string> out;
    for (auto part : detail::split(v, ",")) {
        const auto t = detail::trim(part);
        if (!t.empty()) out.emplace_back(t);
    }
    return out;
}

}  // namespace

void ExperimentConfig::set(const std::string& key, const std::string& raw_value) {
    const std::string value(detail::trim(raw_value));
    const auto u64 = [&] { return parse_u64(value, key); };
    const auto dbl = [&] { return parse_double(value, key); };

    if (key.rfind("grid.", 0) == 0) {
        GridAxis axis{key.substr(5), {}};
        for (auto part : detail::split(value, "|")) axis.values.emplace_back(detail::trim(part));
        if (axis.values.empty() || axis.key.rfind("grid.", 0) == 0) {
            throw ConfigError("grid axis '" + key + "' is empty or nested");
        }
        // Validate by applying each value to a scratch copy.
        for (const auto& v : axis.values) {
            ExperimentConfig scratch = *this;
            scratch.set(axis.key, v);
        }
        std::erase_if(grid, [&](const GridAxis& a) { return a.key == axis.key; });
        grid.push_back(std::move(axis));
        return;
    }

    if (key == "name") name = value;
    else if (key == "output") output = value;
    else if (key == "workers") workers = u64();
    else if (key == "seed") seed = u64();
    else if (key == "data.format") {
        if (value == "movielens") format = FormatSpec::movielens();
        else if (value == "lfm") format = FormatSpec::lfm();
        else if (value != "custom") throw ConfigError("data.format: expected movielens, lfm or custom");
    }
    else if (key == "data.ratings") ratings_path = value;
    else if (key == "data.users") users_path = value;
    else if (key == "data.delimiter") format.delimiter = unescape(value);
    else if (key == "data.user_column") format.user_column = u64();
    else if (key == "data.item_column") format.item_column = u64();
    else if (key == "data.weight_column") format.weight_column = optional_column(value, key);
    else if (key == "data.timestamp_column") format.timestamp_column = optional_column(value, key);
    else if (key == "data.header") format.header = parse_bool(value, key);
    else if (key == "data.user_delimiter") format.user_delimiter = unescape(value);
    else if (key == "data.user_id_column") format.user_id_column = u64();
    else if (key == "data.label_column") format.label_column = u64();
    else if (key == "data.user_header") format.user_header = parse_bool(value, key);
    else if (key == "data.classes") format.class_names = parse_string_list(value);
    else if (key == "prep.min_weight") prep.min_weight = dbl();
    else if (key == "prep.min_user_degree") prep.min_user_degree = u64();
    else if (key == "prep.min_item_degree") prep.min_item_degree = u64();
    else if (key == "prep.item_sample") prep.item_sample = u64();
    else if (key == "folds.count") n_folds = u64();
    else if (key == "folds.run") run_folds = parse_size_list(value, key);
    else if (key == "model.encoder_hidden") model.encoder_hidden = parse_size_list(value, key);
    else if (key == "model.latent") model.latent = u64();
    else if (key == "model.decoder_hidden") model.decoder_hidden = parse_size_list(value, key);
    else if (key == "model.adversary_hidden") model.adversary_hidden = parse_size_list(value, key);
    else if (key == "model.beta") model.beta = dbl();
    else if (key == "model.lambda") model.lambda = dbl();
    else if (key == "model.input_dropout") model.input_dropout = dbl();
    else if (key == "model.hidden_dropout") model.hidden_dropout = dbl();
    else if (key == "train.epochs") train.epochs = u64();
    else if (key == "train.batch_size") train.batch_size = u64();
    else if (key == "train.lr") train.lr = dbl();
    else if (key == "train.weight_decay") train.weight_decay = dbl();
    else if (key == "train.adam_beta1") train.adam_beta1 = dbl();
    else if (key == "train.adam_beta2") train.adam_beta2 = dbl();
    else if (key == "train.adam_eps") train.adam_eps = dbl();
    else if (key == "train.beta_warmup_steps") train.beta_warmup_steps = u64();
    else if (key == "train.validate_every") train.validate_every = u64();
    else if (key == "train.k") train.top_k = u64();
    else if (key == "train.adv_selection") adv_selection = parse_selection_rule(value);
    else if (key == "train.adv_epochs") adv_epochs = u64();
    else if (key == "attack.heads") attacker.heads = u64();
    else if (key == "attack.hidden") attacker.hidden = parse_size_list(value, key);
    else if (key == "attack.epochs") attacker.epochs = u64();
    else if (key == "attack.batch_size") attacker.batch_size = u64();
    else if (key == "attack.lr") attacker.lr = dbl();
    else if (key == "attack.weight_decay") attacker.weight_decay = dbl();
    else if (key == "attack.validation_fraction") attacker.validation_fraction = dbl();
    else if (key == "sweep.lambdas") lambdas = parse_double_list(value, key);
    else if (key == "sweep.folds") sweep_folds = parse_size_list(value, key);
    else if (key == "genseed.users") synthetic.users = u64();
    else if (key == "genseed.items") synthetic.items = u64();
    else if (key == "genseed.p_own") synthetic.p_own = dbl();
    else if (key == "genseed.p_other") synthetic.p_other = dbl();
    else if (key == "genseed.p_shared") synthetic.p_shared = dbl();
    else if (key == "genseed.seed") synthetic.seed = u64();
    else if (key == "genseed.dir") synthetic_dir = value;
    else throw ConfigError("unknown config key '" + key + "'");
}

ExperimentConfig ExperimentConfig::parse(const std::string& text, const std::filesystem::path& base_dir) {
    ExperimentConfig cfg;
    cfg.base_dir = base_dir;
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find('#');
        const auto body = detail::trim(std::string_view(line).substr(0, hash));
        if (body.empty()) {
            continue;
        }
        const auto eq = body.find('=');
        if (eq == std::string_view::npos) {
            throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
        }
        try {
            cfg.set(std::string(detail::trim(body.substr(0, eq))), std::string(body.substr(eq + 1)));
        } catch (const ConfigError& e) {
            throw ConfigError("config line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    if (cfg.lambdas.empty()) {
        throw ConfigError("sweep.lambdas must not be empty");
    }
    return cfg;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("cannot open config file '" + path.string() + "'");
    }
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse(buf.str(), path.has_parent_path() ? path.parent_path() : std::filesystem::path("."));
}

std::filesystem::path ExperimentConfig::out_dir() const {
    const std::filesystem::path p(output);
    return p.is_absolute() ? p : base_dir / p;
}

std::filesystem::path ExperimentConfig::resolve(const std::string& path) const {
    std::string expanded = path;
    const std::string token = "${out}";
    for (auto pos = expanded.find(token); pos != std::string::npos; pos = expanded.find(token)) {
        expanded.replace(pos, token.size(), out_dir().string());
    }
    const std::filesystem::path p(expanded);
    return p.is_absolute() ? p : base_dir / p;
}

std::vector<std::size_t> ExperimentConfig::folds_to_run() const {
    if (run_folds.empty()) {
        std::vector<std::size_t> all(n_folds);
        for (std::size_t i = 0; i < n_folds; ++i) all[i] = i;
        return all;
    }
    for (std::size_t f : run_folds) {
        if (f >= n_folds) throw ConfigError("folds.run: fold " + std::to_string(f) + " out of range");
    }
    return run_folds;
}

std::vector<std::size_t> ExperimentConfig::folds_to_sweep() const {
    if (sweep_folds.empty()) {
        return folds_to_run();
    }
    for (std::size_t f : sweep_folds) {
        if (f >= n_folds) throw ConfigError("sweep.folds: fold " + std::to_string(f) + " out of range");
    }
    return sweep_folds;
}

std::vector<std::pair<std::string, ExperimentConfig>> ExperimentConfig::expand_grid() const {
    std::vector<std::pair<std::string, ExperimentConfig>> out{{"base", *this}};
    for (const auto& axis : grid) {
        std::vector<std::pair<std::string, ExperimentConfig>> next;
        for (const auto& [label, cfg] : out) {
            for (const auto& v : axis.values) {
                ExperimentConfig c = cfg;
                c.set(axis.key, v);
                next.emplace_back((label == "base" ? std::string() : label + ";") + axis.key + "=" + v, c);
            }
        }
        out = std::move(next);
    }
    for (auto& entry : out) entry.second.grid.clear();
    return out;
}

ModelConfig ExperimentConfig::model_for(Family family, std::size_t items) const {
    ModelConfig m = model;
    m.items = items;
    m.adversarial = family == Family::AdvMultVae;
    m.classes = std::max<std::size_t>(1, format.class_names.size());
    m.validate();
    return m;
}

TrainConfig ExperimentConfig::train_for(Family family) const {
    TrainConfig t = train;
    t.seed = seed;
    t.selection = family == Family::AdvMultVae ? adv_selection : SelectionRule::BestNdcg;
    if (family == Family::AdvMultVae && adv_epochs > 0) t.epochs = adv_epochs;
    t.validate();
    return t;
}

}  // namespace advvae
