#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "advvae/attacker.hpp"
#include "advvae/dataset.hpp"
#include "advvae/error.hpp"
#include "advvae/experiment.hpp"
#include "advvae/metrics.hpp"
#include "advvae/model.hpp"
#include "advvae/trainer.hpp"

namespace py = pybind11;
using namespace advvae;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
    if (a.ndim() != 2) throw DimensionError("expected a 2-d array");
    const auto rows = static_cast<std::size_t>(a.shape(0)), cols = static_cast<std::size_t>(a.shape(1));
    return Tensor({rows, cols}, std::vector<double>(a.data(), a.data() + rows * cols));
}

Array to_array(const Tensor& t) {
    Array out({t.rows(), t.cols()});
    std::copy(t.values().begin(), t.values().end(), out.mutable_data());
    return out;
}

py::dict test_dict(const TestResult& r) {
    py::dict d;
    d["statistic"] = r.statistic;
    d["p_value"] = r.p_value;
    d["significant"] = r.significant;
    d["n"] = r.n;
    d["exact"] = r.exact;
    return d;
}

InteractionMatrix load_matrix(const std::string& ratings, const std::optional<std::string>& users,
                              const std::string& format, const PreprocessOptions& options) {
    const FormatSpec spec = format == "lfm" ? FormatSpec::lfm() : FormatSpec::movielens();
    std::optional<std::filesystem::path> users_path;
    if (users) users_path = *users;
    return preprocess(ingest(ratings, users_path, spec), options);
}

InteractionMatrix matrix_from_text(const std::string& ratings, const std::string& users, const std::string& format,
                                   const PreprocessOptions& options) {
    const FormatSpec spec = format == "lfm" ? FormatSpec::lfm() : FormatSpec::movielens();
    std::istringstream r(ratings), u(users);
    RawDataset raw{parse_interactions(r, spec), parse_user_labels(u, spec), spec.class_names};
    return preprocess(raw, options);
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "MultVAE and adversarial MultVAE with gradient reversal, attacker probes and evaluation metrics.";

    py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
    py::register_exception<DataError>(m, "DataError", PyExc_ValueError);
    py::register_exception<DivergenceError>(m, "DivergenceError", PyExc_ArithmeticError);
    py::register_exception<Error>(m, "Error", PyExc_RuntimeError);

    m.attr("UNKNOWN_LABEL") = kUnknownLabel;

    // Dataset
    py::class_<PreprocessOptions>(m, "PreprocessOptions")
        .def(py::init<>())
        .def_readwrite("min_weight", &PreprocessOptions::min_weight)
        .def_readwrite("min_user_degree", &PreprocessOptions::min_user_degree)
        .def_readwrite("min_item_degree", &PreprocessOptions::min_item_degree)
        .def_readwrite("item_sample", &PreprocessOptions::item_sample)
        .def_readwrite("seed", &PreprocessOptions::seed);

    py::class_<InteractionMatrix>(m, "InteractionMatrix")
        .def_property_readonly("users", &InteractionMatrix::users)
        .def_property_readonly("items", &InteractionMatrix::items)
        .def_property_readonly("nnz", &InteractionMatrix::nnz)
        .def_readonly("user_ids", &InteractionMatrix::user_ids)
        .def_readonly("item_ids", &InteractionMatrix::item_ids)
        .def_readonly("labels", &InteractionMatrix::labels)
        .def_readonly("class_names", &InteractionMatrix::class_names)
        .def("row", [](const InteractionMatrix& mat, std::size_t u) {
            if (u >= mat.users()) throw py::index_error("user index out of range");
            const auto r = mat.row(u);
            return std::vector<std::uint32_t>(r.begin(), r.end());
        })
        .def("dense_rows", [](const InteractionMatrix& mat, const std::vector<std::size_t>& users) {
            return to_array(mat.dense_rows(users));
        })
        .def("statistics", [](const InteractionMatrix& mat) {
            const DatasetStats s = statistics(mat);
            py::dict d, per_class;
            d["users"] = s.users;
            d["items"] = s.items;
            d["interactions"] = s.interactions;
            d["unknown_users"] = s.unknown_users;
            for (const auto& c : s.per_class) per_class[py::str(c.name)] = py::make_tuple(c.users, c.interactions);
            d["per_class"] = per_class;
            return d;
        });

    m.def("load_matrix", &load_matrix, py::arg("ratings"), py::arg("users") = py::none(),
          py::arg("format") = "movielens", py::arg("options") = PreprocessOptions{},
          "Parse interaction and user files, then binarize and degree-filter.");
    m.def("matrix_from_text", &matrix_from_text, py::arg("ratings"), py::arg("users"), py::arg("format") = "movielens",
          py::arg("options") = PreprocessOptions{});
    m.def("load_dataset_cache", [](const std::string& path) { return load_dataset(path); });

    m.def(
        "generate_synthetic",
        [](std::size_t users, std::size_t items, double p_own, double p_other, double p_shared, std::uint64_t seed) {
            const SyntheticFiles f = generate_synthetic({users, items, p_own, p_other, p_shared, seed});
            return py::make_tuple(f.ratings, f.users);
        },
        py::arg("users") = 400, py::arg("items") = 60, py::arg("p_own") = 0.6, py::arg("p_other") = 0.05,
        py::arg("p_shared") = 0.3, py::arg("seed") = 7, "Returns (ratings.dat text, users.dat text).");

    py::class_<EvalSplit>(m, "EvalSplit")
        .def_readonly("input", &EvalSplit::input)
        .def_readonly("target", &EvalSplit::target);
    py::class_<FoldSplit>(m, "FoldSplit")
        .def_readonly("fold", &FoldSplit::fold)
        .def_readonly("train_users", &FoldSplit::train_users)
        .def_readonly("validation_users", &FoldSplit::validation_users)
        .def_readonly("test_users", &FoldSplit::test_users)
        .def_readonly("validation_splits", &FoldSplit::validation_splits)
        .def_readonly("test_splits", &FoldSplit::test_splits);
    m.def("make_folds", &make_folds, py::arg("matrix"), py::arg("n_folds") = 5, py::arg("seed") = 0);

    // Metrics
    m.def(
        "ndcg_at_k",
        [](const std::vector<std::size_t>& ranked, const std::vector<std::size_t>& targets, std::size_t k) {
            return ndcg_at_k(ranked, targets, k);
        },
        py::arg("ranked"), py::arg("targets"), py::arg("k") = 10);
    m.def(
        "recall_at_k",
        [](const std::vector<std::size_t>& ranked, const std::vector<std::size_t>& targets, std::size_t k) {
            return recall_at_k(ranked, targets, k);
        },
        py::arg("ranked"), py::arg("targets"), py::arg("k") = 10);
    m.def(
        "balanced_accuracy",
        [](const std::vector<int>& truth, const std::vector<int>& predicted, std::size_t classes) {
            return balanced_accuracy(ConfusionCounts::from(truth, predicted, classes));
        },
        py::arg("truth"), py::arg("predicted"), py::arg("classes") = 2);
    m.def(
        "accuracy",
        [](const std::vector<int>& truth, const std::vector<int>& predicted, std::size_t classes) {
            return accuracy(ConfusionCounts::from(truth, predicted, classes));
        },
        py::arg("truth"), py::arg("predicted"), py::arg("classes") = 2);
    m.def(
        "wilcoxon",
        [](const std::vector<double>& a, const std::vector<double>& b, double alpha) {
            return test_dict(wilcoxon_signed_rank(a, b, alpha));
        },
        py::arg("a"), py::arg("b"), py::arg("alpha") = 0.05);
    m.def(
        "mcnemar",
        [](const std::vector<bool>& a, const std::vector<bool>& b, double alpha) {
            return test_dict(mcnemar(a, b, alpha));
        },
        py::arg("correct_a"), py::arg("correct_b"), py::arg("alpha") = 0.05);

    // Model
    py::class_<ModelConfig>(m, "ModelConfig")
        .def(py::init<>())
        .def_readwrite("items", &ModelConfig::items)
        .def_readwrite("encoder_hidden", &ModelConfig::encoder_hidden)
        .def_readwrite("latent", &ModelConfig::latent)
        .def_readwrite("decoder_hidden", &ModelConfig::decoder_hidden)
        .def_readwrite("adversary_hidden", &ModelConfig::adversary_hidden)
        .def_readwrite("beta", &ModelConfig::beta)
        .def_readwrite("lambda_", &ModelConfig::lambda)
        .def_readwrite("input_dropout", &ModelConfig::input_dropout)
        .def_readwrite("hidden_dropout", &ModelConfig::hidden_dropout)
        .def_readwrite("classes", &ModelConfig::classes)
        .def_readwrite("adversarial", &ModelConfig::adversarial)
        .def("to_text", &ModelConfig::to_text);

    py::class_<ModelParameters>(m, "ModelParameters")
        .def_static("initialize", &ModelParameters::initialize, py::arg("config"), py::arg("seed") = 0)
        .def_readonly("config", &ModelParameters::config)
        .def("infer",
             [](const ModelParameters& p, const Array& x) {
                 const ForwardOutput out = infer(p, to_tensor(x));
                 py::dict d;
                 d["mu"] = to_array(out.mu);
                 d["log_var"] = to_array(out.log_var);
                 d["logits"] = to_array(out.logits);
                 if (out.adv_logits) d["adv_logits"] = to_array(*out.adv_logits);
                 return d;
             })
        .def(
            "recommend",
            [](const ModelParameters& p, const Array& x, std::size_t k, bool exclude_input) {
                const Tensor t = to_tensor(x);
                return recommend(p, t, k, exclude_input ? &t : nullptr);
            },
            py::arg("x"), py::arg("k") = 10, py::arg("exclude_input") = true)
        .def("to_bytes", [](const ModelParameters& p) { return py::bytes(serialize_checkpoint(p)); })
        .def_static("from_bytes", [](const py::bytes& b) { return deserialize_checkpoint(std::string(b)); })
        .def("save", [](const ModelParameters& p, const std::string& path) { save_checkpoint(p, path); })
        .def_static("load", [](const std::string& path) { return load_checkpoint(path); })
        .def("__eq__", [](const ModelParameters& a, const ModelParameters& b) { return a == b; });

    // Training
    py::enum_<SelectionRule>(m, "SelectionRule")
        .value("BEST_NDCG", SelectionRule::BestNdcg)
        .value("LAST_EPOCH", SelectionRule::LastEpoch)
        .value("MIN_ADV_BACC", SelectionRule::MinAdvBacc);

    py::class_<TrainConfig>(m, "TrainConfig")
        .def(py::init<>())
        .def_readwrite("epochs", &TrainConfig::epochs)
        .def_readwrite("batch_size", &TrainConfig::batch_size)
        .def_readwrite("lr", &TrainConfig::lr)
        .def_readwrite("weight_decay", &TrainConfig::weight_decay)
        .def_readwrite("seed", &TrainConfig::seed)
        .def_readwrite("beta_warmup_steps", &TrainConfig::beta_warmup_steps)
        .def_readwrite("validate_every", &TrainConfig::validate_every)
        .def_readwrite("selection", &TrainConfig::selection)
        .def_readwrite("top_k", &TrainConfig::top_k);

    py::class_<TrainResult>(m, "TrainResult")
        .def_readonly("selected", &TrainResult::selected)
        .def_readonly("last", &TrainResult::last)
        .def_property_readonly("selected_epoch", [](const TrainResult& r) { return r.log.selected_epoch; })
        .def_property_readonly("log_tsv", [](const TrainResult& r) { return r.log.to_tsv(); });

    m.def("train", &train, py::arg("model_config"), py::arg("matrix"), py::arg("fold"), py::arg("train_config"),
          py::call_guard<py::gil_scoped_release>());
    m.def(
        "evaluate_ranking",
        [](const ModelParameters& p, const InteractionMatrix& mat, const std::vector<std::size_t>& users,
           const std::vector<EvalSplit>& splits, std::size_t k) {
            const RankingEval e = evaluate_ranking(p, mat, users, splits, k);
            return py::make_tuple(e.mean_ndcg(), e.mean_recall());
        },
        py::arg("params"), py::arg("matrix"), py::arg("users"), py::arg("splits"), py::arg("k") = 10,
        "Mean (NDCG@k, recall@k) over users with held-out targets.");

    // Attacker
    py::class_<AttackerConfig>(m, "AttackerConfig")
        .def(py::init<>())
        .def_readwrite("heads", &AttackerConfig::heads)
        .def_readwrite("hidden", &AttackerConfig::hidden)
        .def_readwrite("epochs", &AttackerConfig::epochs)
        .def_readwrite("batch_size", &AttackerConfig::batch_size)
        .def_readwrite("lr", &AttackerConfig::lr)
        .def_readwrite("weight_decay", &AttackerConfig::weight_decay)
        .def_readwrite("validation_fraction", &AttackerConfig::validation_fraction)
        .def_readwrite("seed", &AttackerConfig::seed);

    m.def(
        "attack",
        [](const Array& train_latents, const std::vector<int>& train_labels, const Array& test_latents,
           const std::vector<int>& test_labels, std::size_t classes, const AttackerConfig& config) {
            auto pack = [](const Array& a, const std::vector<int>& labels) {
                LabeledLatents l;
                l.latents = to_tensor(a);
                if (labels.size() != l.latents.rows()) throw DimensionError("labels do not match latent rows");
                l.labels = labels;
                l.users.resize(labels.size());
                for (std::size_t i = 0; i < labels.size(); ++i) l.users[i] = i;
                return l;
            };
            const AttackReport r = attack(pack(train_latents, train_labels), pack(test_latents, test_labels), classes,
                                          config);
            py::dict d;
            d["acc"] = r.acc;
            d["bacc"] = r.bacc;
            d["reported_head"] = r.reported_head;
            py::list heads;
            for (const auto& h : r.heads) heads.append(h.test_bacc);
            d["head_bacc"] = heads;
            d["predicted"] = r.test_predicted;
            return d;
        },
        py::arg("train_latents"), py::arg("train_labels"), py::arg("test_latents"), py::arg("test_labels"),
        py::arg("classes") = 2, py::arg("config") = AttackerConfig{});

    // CLI
    m.def(
        "run_cli",
        [](const std::vector<std::string>& args) {
            std::vector<std::string> owned{"advvae"};
            owned.insert(owned.end(), args.begin(), args.end());
            std::vector<char*> argv;
            for (auto& s : owned) argv.push_back(s.data());
            argv.push_back(nullptr);
            py::gil_scoped_release release;
            return run_cli(static_cast<int>(owned.size()), argv.data());
        },
        py::arg("args"), "Run the command-line interface in-process and return its exit code.");
}
