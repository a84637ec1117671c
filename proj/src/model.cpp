#include "advvae/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "advvae/error.hpp"
#include "binary_io.hpp"
#include "text_util.hpp"

namespace advvae {

using detail::join;

std::vector<std::size_t> ModelConfig::effective_decoder_hidden() const {
    if (!decoder_hidden.empty()) {
        return decoder_hidden;
    }
    return {encoder_hidden.rbegin(), encoder_hidden.rend()};
}

void ModelConfig::validate() const {
    auto positive = [](const std::vector<std::size_t>& sizes) {
        return std::all_of(sizes.begin(), sizes.end(), [](std::size_t s) { return s >= 1; });
    };
    if (items < 1 || latent < 1 || classes < 1) {
        throw ConfigError("model: items, latent and classes must be >= 1");
    }
    if (!positive(encoder_hidden) || !positive(decoder_hidden) || !positive(adversary_hidden)) {
        throw ConfigError("model: layer sizes must be >= 1");
    }
    if (!(beta >= 0.0) || !(lambda >= 0.0)) {
        throw ConfigError("model: beta and lambda must be non-negative");
    }
    if (!(input_dropout >= 0.0 && input_dropout < 1.0) || !(hidden_dropout >= 0.0 && hidden_dropout < 1.0)) {
        throw ConfigError("model: dropout must lie in [0, 1)");
    }
}

std::string ModelConfig::to_text() const {
    std::ostringstream out;
    out << "items=" << items << '\n'
        << "encoder_hidden=" << join(encoder_hidden) << '\n'
        << "latent=" << latent << '\n'
        << "decoder_hidden=" << join(decoder_hidden) << '\n'
        << "adversary_hidden=" << join(adversary_hidden) << '\n'
        << "beta=" << detail::format_double(beta) << '\n'
        << "lambda=" << detail::format_double(lambda) << '\n'
        << "input_dropout=" << detail::format_double(input_dropout) << '\n'
        << "hidden_dropout=" << detail::format_double(hidden_dropout) << '\n'
        << "classes=" << classes << '\n'
        << "adversarial=" << (adversarial ? "true" : "false") << '\n';
    return out.str();
}

ModelConfig ModelConfig::parse(const std::string& text) {
    ModelConfig cfg;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        const auto t = detail::trim(line);
        if (t.empty()) {
            continue;
        }
        const auto eq = t.find('=');
        if (eq == std::string_view::npos) {
            throw ConfigError("model config: missing '=' in '" + std::string(t) + "'");
        }
        const auto key = detail::trim(t.substr(0, eq));
        const auto value = detail::trim(t.substr(eq + 1));
        if (key == "items") cfg.items = detail::parse_u64(value, key);
        else if (key == "encoder_hidden") cfg.encoder_hidden = detail::parse_size_list(value, key);
        else if (key == "latent") cfg.latent = detail::parse_u64(value, key);
        else if (key == "decoder_hidden") cfg.decoder_hidden = detail::parse_size_list(value, key);
        else if (key == "adversary_hidden") cfg.adversary_hidden = detail::parse_size_list(value, key);
        else if (key == "beta") cfg.beta = detail::parse_double(value, key);
        else if (key == "lambda") cfg.lambda = detail::parse_double(value, key);
        else if (key == "input_dropout") cfg.input_dropout = detail::parse_double(value, key);
        else if (key == "hidden_dropout") cfg.hidden_dropout = detail::parse_double(value, key);
        else if (key == "classes") cfg.classes = detail::parse_u64(value, key);
        else if (key == "adversarial") cfg.adversarial = detail::parse_bool(value, key);
        else throw ConfigError("model config: unknown key '" + std::string(key) + "'");
    }
    return cfg;
}

namespace {

constexpr std::uint64_t kEncoderStream = 0;
constexpr std::uint64_t kDecoderStream = 1000;
constexpr std::uint64_t kAdversaryStream = 2000;

Dense xavier_layer(std::size_t fan_in, std::size_t fan_out, Rng rng) {
    Dense layer{Tensor::matrix(fan_in, fan_out), Tensor::matrix(1, fan_out)};
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    for (auto& w : layer.weight.values()) {
        w = (2.0 * rng.uniform() - 1.0) * limit;
    }
    return layer;
}

std::vector<Dense> build_stack(std::size_t in, const std::vector<std::size_t>& hidden, std::size_t out,
                               std::uint64_t seed, std::uint64_t stream_base) {
    std::vector<Dense> layers;
    std::size_t width = in;
    std::uint64_t counter = stream_base;
    for (std::size_t h : hidden) {
        layers.push_back(xavier_layer(width, h, Rng(seed, Stream::Init, counter++)));
        width = h;
    }
    layers.push_back(xavier_layer(width, out, Rng(seed, Stream::Init, counter)));
    return layers;
}

}  // namespace

ModelParameters ModelParameters::initialize(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    ModelParameters p;
    p.config = config;
    p.encoder = build_stack(config.items, config.encoder_hidden, 2 * config.latent, seed, kEncoderStream);
    p.decoder = build_stack(config.latent, config.effective_decoder_hidden(), config.items, seed, kDecoderStream);
    if (config.adversarial) {
        p.adversary = build_stack(config.latent, config.adversary_hidden, config.classes, seed, kAdversaryStream);
    }
    return p;
}

namespace {

template <typename Layers, typename Out>
void append_named(Layers& layers, const std::string& prefix, Out& out) {
    for (std::size_t i = 0; i < layers.size(); ++i) {
        out.push_back({prefix + "." + std::to_string(i) + ".weight", &layers[i].weight});
        out.push_back({prefix + "." + std::to_string(i) + ".bias", &layers[i].bias});
    }
}

}  // namespace

std::vector<ModelParameters::Named> ModelParameters::named() {
    std::vector<Named> out;
    append_named(encoder, "encoder", out);
    append_named(decoder, "decoder", out);
    append_named(adversary, "adversary", out);
    return out;
}

std::vector<ModelParameters::ConstNamed> ModelParameters::named() const {
    std::vector<ConstNamed> out;
    append_named(encoder, "encoder", out);
    append_named(decoder, "decoder", out);
    append_named(adversary, "adversary", out);
    return out;
}

bool ModelParameters::all_finite() const {
    const auto list = named();
    return std::all_of(list.begin(), list.end(), [](const ConstNamed& n) { return n.tensor->all_finite(); });
}

std::string serialize_checkpoint(const ModelParameters& params) {
    detail::ByteWriter w;
    w.raw("AVCK");
    w.u32(kCheckpointVersion);
    w.str64(params.config.to_text());
    const auto tensors = params.named();
    w.u32(static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
        w.str32(name);
        w.u32(static_cast<std::uint32_t>(t->rank()));
        for (std::size_t d : t->shape()) w.u64(d);
        for (double v : t->data()) w.f64(v);
    }
    return w.take();
}

ModelParameters deserialize_checkpoint(const std::string& bytes) {
    detail::ByteReader r(bytes, "checkpoint");
    if (r.raw(4) != "AVCK") {
        throw DataError("checkpoint: bad magic");
    }
    const std::uint32_t version = r.u32();
    if (version != kCheckpointVersion) {
        throw DataError("checkpoint: unsupported version " + std::to_string(version));
    }
    const ModelConfig config = ModelConfig::parse(r.str64());
    // Shapes come from the config; the stored tensors must match them exactly.
    ModelParameters params = ModelParameters::initialize(config, 0);
    auto slots = params.named();
    const std::uint32_t count = r.u32();
    if (count != slots.size()) {
        throw DataError("checkpoint: expected " + std::to_string(slots.size()) + " tensors, found " +
                        std::to_string(count));
    }
    for (auto& slot : slots) {
        const std::string name = r.str32();
        if (name != slot.name) {
            throw DataError("checkpoint: expected tensor '" + slot.name + "', found '" + name + "'");
        }
        const std::uint32_t rank = r.u32();
        Shape shape(rank);
        for (auto& d : shape) d = r.u64();
        if (shape != slot.tensor->shape()) {
            throw DataError("checkpoint: tensor '" + name + "' has shape " + shape_string(shape) + ", config implies " +
                            shape_string(slot.tensor->shape()));
        }
        r.need(slot.tensor->numel() * 8);
        for (auto& v : slot.tensor->values()) v = r.f64();
    }
    if (!r.done()) {
        throw DataError("checkpoint: trailing bytes");
    }
    return params;
}

void save_checkpoint(const ModelParameters& params, const std::filesystem::path& path) {
    detail::write_file_atomic(path.string(), serialize_checkpoint(params));
}

ModelParameters load_checkpoint(const std::filesystem::path& path) {
    return deserialize_checkpoint(detail::read_file(path.string()));
}

std::vector<Tensor> BoundModel::gradients() const {
    std::vector<Tensor> out;
    for (const auto* stack : {&encoder, &decoder, &adversary}) {
        for (const auto& layer : *stack) {
            out.push_back(layer.weight.grad());
            out.push_back(layer.bias.grad());
        }
    }
    return out;
}

BoundModel bind(Tape& tape, const ModelParameters& params) {
    BoundModel m;
    m.config = &params.config;
    auto lift = [&tape](const std::vector<Dense>& layers, std::vector<BoundLayer>& out) {
        for (const auto& l : layers) out.push_back({tape.parameter(l.weight), tape.parameter(l.bias)});
    };
    lift(params.encoder, m.encoder);
    lift(params.decoder, m.decoder);
    lift(params.adversary, m.adversary);
    return m;
}

namespace {

Var dense(const BoundLayer& layer, Var x) {
    return ops::add_row(ops::matmul(x, layer.weight), layer.bias);
}

void require_rng(bool training, Rng* rng, const char* what) {
    if (training && rng == nullptr) {
        throw ContractError(std::string(what) + " stream required when training");
    }
}

}  // namespace

Encoded encode(const BoundModel& model, Var x, bool training, ForwardRng rng) {
    const ModelConfig& cfg = *model.config;
    if (x.value().cols() != cfg.items) {
        throw DimensionError("encode: input width " + std::to_string(x.value().cols()) + ", model expects " +
                             std::to_string(cfg.items));
    }
    require_rng(training && (cfg.input_dropout > 0.0 || cfg.hidden_dropout > 0.0), rng.dropout, "dropout");
    require_rng(training, rng.sampling, "sampling");

    Var h = ops::l2_normalize_rows(x);
    if (training && cfg.input_dropout > 0.0) {
        h = ops::dropout(h, cfg.input_dropout, true, *rng.dropout);
    }
    for (std::size_t i = 0; i + 1 < model.encoder.size(); ++i) {
        h = ops::tanh(dense(model.encoder[i], h));
        if (training && cfg.hidden_dropout > 0.0) {
            h = ops::dropout(h, cfg.hidden_dropout, true, *rng.dropout);
        }
    }
    const Var head = dense(model.encoder.back(), h);
    Encoded e;
    e.mu = ops::slice_cols(head, 0, cfg.latent);
    e.log_var = ops::slice_cols(head, cfg.latent, cfg.latent);
    e.z = training ? ops::gaussian_sample(e.mu, e.log_var, *rng.sampling) : e.mu;
    return e;
}

Var decode(const BoundModel& model, Var z, bool training, ForwardRng rng) {
    const ModelConfig& cfg = *model.config;
    if (z.value().cols() != cfg.latent) {
        throw DimensionError("decode: latent width " + std::to_string(z.value().cols()) + ", model expects " +
                             std::to_string(cfg.latent));
    }
    require_rng(training && cfg.hidden_dropout > 0.0, rng.dropout, "dropout");
    Var h = z;
    for (std::size_t i = 0; i + 1 < model.decoder.size(); ++i) {
        h = ops::tanh(dense(model.decoder[i], h));
        if (training && cfg.hidden_dropout > 0.0) {
            h = ops::dropout(h, cfg.hidden_dropout, true, *rng.dropout);
        }
    }
    return dense(model.decoder.back(), h);
}

Var adversary_logits(const BoundModel& model, Var z, double lambda) {
    if (model.adversary.empty()) {
        throw ContractError("adversary_logits: model has no adversarial head");
    }
    Var h = ops::grl(z, GrlConfig{lambda});
    for (std::size_t i = 0; i + 1 < model.adversary.size(); ++i) {
        h = ops::relu(dense(model.adversary[i], h));
    }
    return dense(model.adversary.back(), h);
}

Var loss_multinomial(Var logits, Var x) {
    if (logits.value().shape() != x.value().shape()) {
        throw DimensionError("loss_multinomial: logits " + shape_string(logits.value().shape()) + " vs input " +
                             shape_string(x.value().shape()));
    }
    const double batch = static_cast<double>(x.value().rows());
    return ops::scale(ops::sum(ops::mul(ops::log_softmax_rows(logits), x)), -1.0 / batch);
}

Var loss_kl(Var mu, Var log_var) {
    const double batch = static_cast<double>(mu.value().rows());
    // 1 + log_var - mu^2 - exp(log_var)
    Var inner = ops::add_scalar(ops::add(log_var, ops::scale(ops::add(ops::square(mu), ops::exp(log_var)), -1.0)), 1.0);
    return ops::scale(ops::sum(inner), -0.5 / batch);
}

Var loss_adversarial(Var adv_logits, std::span<const int> labels) {
    const Tensor& logits = adv_logits.value();
    const std::size_t rows = logits.rows(), classes = logits.cols();
    if (labels.size() != rows) {
        throw DimensionError("loss_adversarial: " + std::to_string(labels.size()) + " labels for " +
                             std::to_string(rows) + " rows");
    }
    Tensor onehot = Tensor::matrix(rows, classes);
    std::size_t known = 0;
    for (std::size_t r = 0; r < rows; ++r) {
        const int y = labels[r];
        if (y == kUnknownLabel) {
            continue;
        }
        if (y < 0 || static_cast<std::size_t>(y) >= classes) {
            throw ContractError("loss_adversarial: label " + std::to_string(y) + " outside [0, " +
                                std::to_string(classes) + ")");
        }
        onehot.at(r, static_cast<std::size_t>(y)) = 1.0;
        ++known;
    }
    Tape& tape = adv_logits.tape();
    const Var picked = ops::mul(ops::log_softmax_rows(adv_logits), tape.constant(std::move(onehot)));
    // No labelled rows: the term vanishes but stays connected to the graph.
    const double denom = known ? static_cast<double>(known) : 1.0;
    return ops::scale(ops::sum(picked), -1.0 / denom);
}

LossBreakdown total_loss(const BoundModel& model, const Tensor& x, std::span<const int> labels, double beta,
                         bool training, ForwardRng rng) {
    const ModelConfig& cfg = *model.config;
    Tape& tape = model.encoder.front().weight.tape();
    const Var input = tape.constant(x);

    LossBreakdown out;
    out.encoded = encode(model, input, training, rng);
    out.logits = decode(model, out.encoded.z, training, rng);
    const Var mult = loss_multinomial(out.logits, input);
    const Var kl = loss_kl(out.encoded.mu, out.encoded.log_var);
    out.multinomial = mult.value().item();
    out.kl = kl.value().item();
    Var total = beta == 0.0 ? mult : ops::add(mult, ops::scale(kl, beta));
    if (cfg.adversarial && !model.adversary.empty()) {
        const Var adv = adversary_logits(model, out.encoded.z, cfg.lambda);
        const Var ce = loss_adversarial(adv, labels);
        out.adv_logits = adv;
        out.adversarial = ce.value().item();
        total = ops::add(total, ce);
    }
    out.total = total;
    return out;
}

ForwardOutput infer(const ModelParameters& params, const Tensor& x) {
    Tape tape;
    const BoundModel model = bind(tape, params);
    const Var input = tape.constant(x);
    const Encoded e = encode(model, input, false, {});
    ForwardOutput out;
    out.mu = e.mu.value();
    out.log_var = e.log_var.value();
    out.z = e.z.value();
    out.logits = decode(model, e.z, false, {}).value();
    if (!model.adversary.empty()) {
        out.adv_logits = adversary_logits(model, e.z, params.config.lambda).value();
    }
    return out;
}

std::vector<std::size_t> top_k(std::span<const double> scores, std::size_t k, std::span<const double> exclude) {
    if (k < 1) {
        throw ContractError("top_k: k must be >= 1");
    }
    if (!exclude.empty() && exclude.size() != scores.size()) {
        throw DimensionError("top_k: mask width does not match scores");
    }
    std::vector<std::size_t> candidates;
    candidates.reserve(scores.size());
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (exclude.empty() || exclude[i] == 0.0) {
            candidates.push_back(i);
        }
    }
    const std::size_t take = std::min(k, candidates.size());
    auto better = [&scores](std::size_t a, std::size_t b) {
        return scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
    };
    std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(take), candidates.end(),
                      better);
    candidates.resize(take);
    return candidates;
}

std::vector<std::vector<std::size_t>> recommend(const ModelParameters& params, const Tensor& x, std::size_t k,
                                                const Tensor* exclude) {
    if (k < 1) {
        throw ContractError("recommend: k must be >= 1");
    }
    if (exclude && exclude->shape() != x.shape()) {
        throw DimensionError("recommend: exclusion mask shape differs from input");
    }
    const Tensor logits = infer(params, x).logits;
    std::vector<std::vector<std::size_t>> out;
    out.reserve(logits.rows());
    for (std::size_t r = 0; r < logits.rows(); ++r) {
        out.push_back(top_k(logits.row_span(r), k, exclude ? exclude->row_span(r) : std::span<const double>{}));
    }
    return out;
}

}  // namespace advvae
