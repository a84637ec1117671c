#include "advvae/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "advvae/error.hpp"
#include "advvae/parallel.hpp"
#include "binary_io.hpp"
#include "text_util.hpp"

namespace advvae {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using detail::format_double;

namespace {

json num(double v) {
    return std::isfinite(v) ? json(v) : json(nullptr);
}

double json_number(const json& j, const char* key) {
    return j.contains(key) && j[key].is_number() ? j[key].get<double>() : std::nan("");
}

std::string fmt(double v) {
    return std::isnan(v) ? std::string("nan") : format_double(v);
}

void write_text(const fs::path& path, std::string_view text) {
    detail::write_file_atomic(path.string(), text);
}

std::string read_text(const fs::path& path) {
    return detail::read_file(path.string());
}

json read_json(const fs::path& path) {
    try {
        return json::parse(read_text(path));
    } catch (const json::parse_error& e) {
        throw DataError("malformed JSON in '" + path.string() + "': " + e.what());
    }
}

std::string dump(const json& j) {
    return j.dump(2) + "\n";
}

std::string lambda_label(double lambda) {
    return "lambda_" + format_double(lambda);
}

std::string format_text(const FormatSpec& f) {
    std::ostringstream out;
    out << "delimiter=" << f.delimiter << "\nuser_column=" << f.user_column << "\nitem_column=" << f.item_column
        << "\nweight_column=" << (f.weight_column ? std::to_string(*f.weight_column) : "none")
        << "\ntimestamp_column=" << (f.timestamp_column ? std::to_string(*f.timestamp_column) : "none")
        << "\nheader=" << f.header << "\nuser_delimiter=" << f.user_delimiter
        << "\nuser_id_column=" << f.user_id_column << "\nlabel_column=" << f.label_column
        << "\nuser_header=" << f.user_header << "\nclasses=" << detail::join(f.class_names) << '\n';
    return out.str();
}

std::string train_text(const TrainConfig& t) {
    std::ostringstream out;
    out << "epochs=" << t.epochs << "\nbatch_size=" << t.batch_size << "\nlr=" << format_double(t.lr)
        << "\nweight_decay=" << format_double(t.weight_decay) << "\nadam_beta1=" << format_double(t.adam_beta1)
        << "\nadam_beta2=" << format_double(t.adam_beta2) << "\nadam_eps=" << format_double(t.adam_eps)
        << "\nseed=" << t.seed << "\nbeta_warmup_steps=" << t.beta_warmup_steps
        << "\nvalidate_every=" << t.validate_every << "\nselection=" << selection_rule_name(t.selection)
        << "\nk=" << t.top_k << '\n';
    return out.str();
}

struct CachedData {
    InteractionMatrix matrix;
    std::string hash;
};

fs::path dataset_path(const ExperimentConfig& config) {
    return config.out_dir() / "dataset.bin";
}

CachedData load_cached(const ExperimentConfig& config) {
    const fs::path path = dataset_path(config);
    if (!fs::exists(path)) {
        throw DataError("no dataset cache at '" + path.string() + "'; run the preprocess command first");
    }
    const std::string bytes = read_text(path);
    return {deserialize_dataset(bytes), sha256_hex(bytes)};
}

fs::path family_dir(const ExperimentConfig& config, Family family) {
    return config.out_dir() / "runs" / family_name(family);
}

fs::path fold_dir(const fs::path& root, std::size_t fold) {
    return root / ("fold" + std::to_string(fold));
}

fs::path candidate_dir(const fs::path& family_root, std::size_t candidate) {
    return family_root / ("c" + std::to_string(candidate));
}

std::vector<std::size_t> unique_sorted(std::vector<std::size_t> users) {
    std::sort(users.begin(), users.end());
    users.erase(std::unique(users.begin(), users.end()), users.end());
    return users;
}

std::string ranking_tsv(const RankingEval& eval, const InteractionMatrix& matrix) {
    std::ostringstream out;
    out << "user\tndcg\trecall\n";
    for (std::size_t i = 0; i < eval.users.size(); ++i) {
        out << matrix.user_ids[eval.users[i]] << '\t' << format_double(eval.ndcg[i]) << '\t'
            << format_double(eval.recall[i]) << '\n';
    }
    return out.str();
}

struct RankingRows {
    std::vector<std::string> users;
    std::vector<double> ndcg;
    std::vector<double> recall;
};

RankingRows read_ranking_tsv(const fs::path& path) {
    RankingRows rows;
    std::istringstream in(read_text(path));
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto parts = detail::split(line, "\t");
        if (parts.size() != 3) {
            throw DataError("malformed row in '" + path.string() + "'");
        }
        rows.users.emplace_back(parts[0]);
        rows.ndcg.push_back(detail::parse_double(parts[1], "ndcg"));
        rows.recall.push_back(detail::parse_double(parts[2], "recall"));
    }
    return rows;
}

json test_json(const TestResult& r) {
    return json{{"statistic", num(r.statistic)},
                {"p_value", num(r.p_value)},
                {"significant", r.significant},
                {"n", r.n},
                {"exact", r.exact}};
}

struct FoldAttack {
    LabeledLatents eval;
    AttackReport report;
};

// Attacker trained on the fold's (deduplicated) training users, scored on its test users.
FoldAttack attack_fold(const ModelParameters& params, const InteractionMatrix& matrix, const FoldSplit& fold,
                       const ExperimentConfig& config) {
    AttackerConfig cfg = config.attacker;
    cfg.seed = config.seed;
    const auto train_users = unique_sorted(fold.train_users);
    const LabeledLatents train_lat = extract_latents(params, matrix, train_users);
    FoldAttack out;
    out.eval = extract_latents(params, matrix, fold.test_users, fold.test_splits);
    out.report = attack(train_lat, out.eval, matrix.classes(), cfg);
    return out;
}

// Attacks a checkpoint file and verifies the file and the decoded model are untouched afterwards.
json attack_checkpoint(const fs::path& ckpt, const InteractionMatrix& matrix, const FoldSplit& fold,
                       const ExperimentConfig& config, const fs::path& out_dir, const std::string& kind) {
    const std::string before = read_text(ckpt);
    const ModelParameters params = deserialize_checkpoint(before);
    const std::string hash_before = sha256_hex(before);
    const FoldAttack result = attack_fold(params, matrix, fold, config);
    if (serialize_checkpoint(params) != before || sha256_hex(read_text(ckpt)) != hash_before) {
        throw Error("frozen-model check failed for '" + ckpt.string() + "'");
    }
    json j;
    j["kind"] = kind;
    j["fold"] = fold.fold;
    j["checkpoint_sha256"] = hash_before;
    j["frozen_check"] = "pass";
    if (!params.adversary.empty()) {
        const AdversaryEval head = evaluate_adversary(params, matrix, fold.test_splits, fold.test_users);
        j["adversary_head"] = json{{"acc", num(head.acc)}, {"bacc", num(head.bacc)}};
    }
    j["attacker"] = json::parse(result.report.to_json());
    write_text(out_dir / "report.json", dump(j));
    write_text(out_dir / "latents.tsv", latent_export_tsv(result.eval, result.report, matrix));
    return j;
}

std::string run_key(const CachedData& data, const ExperimentConfig& config, Family family,
                    const std::vector<GridCandidate>& candidates) {
    std::ostringstream text;
    text << "dataset=" << data.hash << "\nseed=" << config.seed << "\nfolds=" << config.n_folds
         << "\nfamily=" << family_name(family) << '\n';
    for (const auto& c : candidates) {
        text << "[candidate " << c.label << "]\n" << c.model.to_text() << train_text(c.train);
    }
    return sha256_hex(text.str());
}

json manifest_json(const std::string& key, const CachedData& data, const ExperimentConfig& config, Family family,
                   const std::vector<std::size_t>& planned, const std::set<std::size_t>& completed) {
    const bool complete =
        std::all_of(planned.begin(), planned.end(), [&](std::size_t f) { return completed.contains(f); });
    return json{{"family", family_name(family)},
                {"run_key", key},
                {"dataset_sha256", data.hash},
                {"seed", config.seed},
                {"n_folds", config.n_folds},
                {"folds", planned},
                {"completed", std::vector<std::size_t>(completed.begin(), completed.end())},
                {"complete", complete}};
}

void train_candidate_fold(const GridCandidate& cand, Family family, const InteractionMatrix& matrix,
                          const FoldSplit& fold, const fs::path& dir) {
    TrainResult r = train(cand.model, matrix, fold, cand.train);
    fs::create_directories(dir);
    std::vector<std::pair<std::string, const ModelParameters*>> saved;
    if (family == Family::MultVae) {
        saved = {{"best", &r.selected}, {"last", &r.last}};
    } else {
        saved = {{"selected", &r.selected}, {"last", &r.last}};
    }
    for (const auto& [name, params] : saved) {
        write_text(dir / (name + ".ckpt"), serialize_checkpoint(*params));
        const RankingEval test =
            evaluate_ranking(*params, matrix, fold.test_users, fold.test_splits, cand.train.top_k);
        write_text(dir / ("test_" + name + ".tsv"), ranking_tsv(test, matrix));
    }
    write_text(dir / "train_log.tsv", r.log.to_tsv());
    const RankingEval val =
        evaluate_ranking(r.selected, matrix, fold.validation_users, fold.validation_splits, cand.train.top_k);
    json j{{"fold", fold.fold},
           {"selected_epoch", r.log.selected_epoch},
           {"val_ndcg", num(val.mean_ndcg())},
           {"val_recall", num(val.mean_recall())},
           {"val_ndcg_last", num(evaluate_ranking(r.last, matrix, fold.validation_users, fold.validation_splits,
                                                  cand.train.top_k)
                                     .mean_ndcg())}};
    if (family == Family::AdvMultVae) {
        j["val_adv_bacc"] =
            num(evaluate_adversary(r.selected, matrix, fold.validation_splits, fold.validation_users).bacc);
    }
    write_text(dir / "val.json", dump(j));
}

std::vector<GridCandidate> build_candidates(const ExperimentConfig& config, Family family, std::size_t items) {
    std::vector<GridCandidate> out;
    for (const auto& [label, cfg] : config.expand_grid()) {
        out.push_back({label, cfg.model_for(family, items), cfg.train_for(family)});
    }
    return out;
}

void write_winner(const fs::path& root, const std::vector<GridCandidate>& candidates,
                  const std::vector<std::size_t>& folds, std::ostream& log, Family family) {
    std::ostringstream grid;
    grid << "candidate\tlabel";
    for (std::size_t f : folds) grid << "\tfold" << f;
    grid << "\tmean_val_ndcg\n";
    std::size_t winner = 0;
    std::vector<double> means;
    for (std::size_t c = 0; c < candidates.size(); ++c) {
        std::vector<double> vals;
        for (std::size_t f : folds) {
            const json v = read_json(fold_dir(candidate_dir(root, c), f) / "val.json");
            vals.push_back(v["val_ndcg"].is_null() ? std::nan("") : v["val_ndcg"].get<double>());
        }
        means.push_back(mean(vals));
        grid << c << '\t' << candidates[c].label;
        for (double v : vals) grid << '\t' << fmt(v);
        grid << '\t' << fmt(means.back()) << '\n';
        if (means.back() > means[winner]) winner = c;
    }
    write_text(root / "grid.tsv", grid.str());
    json w{{"family", family_name(family)},
           {"candidate", winner},
           {"label", candidates[winner].label},
           {"mean_val_ndcg", num(means[winner])},
           {"folds", folds}};
    write_text(root / "winner.json", dump(w));
    log << family_name(family) << ": winner c" << winner << " (" << candidates[winner].label
        << "), mean validation NDCG " << fmt(means[winner]) << '\n';
}

struct WinnerRun {
    fs::path dir;  // candidate directory
    std::vector<std::size_t> folds;
    json manifest;
};

std::optional<WinnerRun> find_winner(const ExperimentConfig& config, Family family) {
    const fs::path root = family_dir(config, family);
    if (!fs::exists(root / "winner.json") || !fs::exists(root / "manifest.json")) {
        return std::nullopt;
    }
    const json w = read_json(root / "winner.json");
    WinnerRun run{candidate_dir(root, w["candidate"].get<std::size_t>()),
                  w["folds"].get<std::vector<std::size_t>>(), read_json(root / "manifest.json")};
    return run;
}

void check_manifest(const json& manifest, const CachedData& data, const ExperimentConfig& config) {
    if (manifest["dataset_sha256"] != data.hash || manifest["seed"] != config.seed ||
        manifest["n_folds"] != config.n_folds) {
        throw DataError("run manifest for " + manifest["family"].get<std::string>() +
                        " does not match the current dataset, seed or fold count; rerun it");
    }
}

}  // namespace

PreprocessOutcome cmd_preprocess(const ExperimentConfig& config, std::ostream& log) {
    if (config.ratings_path.empty()) {
        throw ConfigError("data.ratings is not set");
    }
    const fs::path ratings = config.resolve(config.ratings_path);
    std::optional<fs::path> users;
    if (!config.users_path.empty()) users = config.resolve(config.users_path);
    for (const auto& p : {std::optional<fs::path>(ratings), users}) {
        if (p && !fs::exists(*p)) throw ConfigError("input file '" + p->string() + "' does not exist");
    }
    PreprocessOptions prep = config.prep;
    prep.seed = config.seed;

    std::ostringstream fp;
    fp << "ratings=" << sha256_hex(read_text(ratings)) << "\nusers=" << (users ? sha256_hex(read_text(*users)) : "-")
       << '\n'
       << format_text(config.format) << "min_weight=" << format_double(prep.min_weight)
       << "\nmin_user_degree=" << prep.min_user_degree << "\nmin_item_degree=" << prep.min_item_degree
       << "\nitem_sample=" << prep.item_sample << "\nseed=" << prep.seed << '\n';
    const std::string fingerprint = sha256_hex(fp.str());

    const fs::path cache = dataset_path(config);
    PreprocessOutcome out;
    if (fs::exists(cache)) {
        std::string cached_fp;
        try {
            out.matrix = load_dataset(cache, &cached_fp);
            out.cache_hit = cached_fp == fingerprint;
        } catch (const DataError&) {
            out.cache_hit = false;
        }
    }
    if (!out.cache_hit) {
        out.matrix = preprocess(ingest(ratings, users, config.format), prep);
        save_dataset(out.matrix, fingerprint, cache);
    }
    out.stats = statistics(out.matrix);
    out.artifact_hash = sha256_hex(read_text(cache));
    const std::string table = format_statistics(out.stats, config.name);
    write_text(config.out_dir() / "dataset_stats.tsv", table);
    log << (out.cache_hit ? "dataset cache hit: " : "dataset written: ") << cache.string() << '\n' << table;
    return out;
}

void cmd_run(const ExperimentConfig& config, Family family, std::ostream& log, RunOptions options) {
    const CachedData data = load_cached(config);
    const std::vector<FoldSplit> folds = make_folds(data.matrix, config.n_folds, config.seed);
    const std::vector<GridCandidate> candidates = build_candidates(config, family, data.matrix.items());
    const std::vector<std::size_t> planned = config.folds_to_run();
    const std::string key = run_key(data, config, family, candidates);
    const fs::path root = family_dir(config, family);
    const fs::path manifest_path = root / "manifest.json";

    std::set<std::size_t> completed;
    if (fs::exists(manifest_path)) {
        const json m = read_json(manifest_path);
        if (m.value("run_key", "") == key) {
            for (std::size_t f : m["completed"].get<std::vector<std::size_t>>()) completed.insert(f);
        } else {
            log << family_name(family) << ": configuration changed, discarding previous results\n";
            fs::remove_all(root);
        }
    }
    fs::create_directories(root);

    std::size_t newly = 0;
    for (std::size_t f : planned) {
        if (completed.contains(f)) {
            log << family_name(family) << ": fold " << f << " already complete\n";
            continue;
        }
        if (options.stop_after_folds && newly >= *options.stop_after_folds) {
            log << family_name(family) << ": stopping before fold " << f << '\n';
            return;
        }
        parallel_for(candidates.size(), config.workers, [&](std::size_t c) {
            train_candidate_fold(candidates[c], family, data.matrix, folds[f], fold_dir(candidate_dir(root, c), f));
        });
        completed.insert(f);
        ++newly;
        write_text(manifest_path, dump(manifest_json(key, data, config, family, planned, completed)));
        log << family_name(family) << ": fold " << f << " done\n";
    }
    write_text(manifest_path, dump(manifest_json(key, data, config, family, planned, completed)));
    write_winner(root, candidates, planned, log, family);
}

void cmd_attack(const ExperimentConfig& config, std::ostream& log) {
    const CachedData data = load_cached(config);
    const std::vector<FoldSplit> folds = make_folds(data.matrix, config.n_folds, config.seed);
    struct Task {
        ModelKind kind;
        fs::path ckpt;
        std::size_t fold;
    };
    std::vector<Task> tasks;
    for (const auto& kind : model_kinds()) {
        const auto run = find_winner(config, kind.family);
        if (!run) continue;
        check_manifest(run->manifest, data, config);
        for (std::size_t f : run->folds) {
            tasks.push_back({kind, fold_dir(run->dir, f) / (kind.checkpoint + ".ckpt"), f});
        }
    }
    if (tasks.empty()) {
        throw DataError("no completed model runs to attack; run the run command first");
    }
    std::vector<json> reports(tasks.size());
    parallel_for(tasks.size(), config.workers, [&](std::size_t i) {
        const Task& t = tasks[i];
        const fs::path out = fold_dir(config.out_dir() / "attacks" / t.kind.name, t.fold);
        fs::create_directories(out);
        reports[i] = attack_checkpoint(t.ckpt, data.matrix, folds[t.fold], config, out, t.kind.name);
    });
    for (std::size_t i = 0; i < tasks.size(); ++i) {
        const json& a = reports[i]["attacker"];
        log << tasks[i].kind.name << " fold " << tasks[i].fold << ": attacker acc " << fmt(json_number(a, "acc"))
            << ", bacc " << fmt(json_number(a, "bacc")) << '\n';
    }
}

namespace {

struct KindResult {
    std::string name;
    std::vector<std::size_t> folds;
    std::vector<double> ndcg, recall, acc, bacc;  // per fold
    std::vector<double> pooled_ndcg, pooled_recall;
    std::vector<std::string> pooled_users;
    std::vector<bool> attack_correct;
    std::vector<int> attack_truth;
    bool attacked = true;
};

KindResult collect(const ExperimentConfig& config, const ModelKind& kind, const WinnerRun& run) {
    KindResult r;
    r.name = kind.name;
    r.folds = run.folds;
    for (std::size_t f : run.folds) {
        const RankingRows rows = read_ranking_tsv(fold_dir(run.dir, f) / ("test_" + kind.checkpoint + ".tsv"));
        r.ndcg.push_back(mean(rows.ndcg));
        r.recall.push_back(mean(rows.recall));
        r.pooled_ndcg.insert(r.pooled_ndcg.end(), rows.ndcg.begin(), rows.ndcg.end());
        r.pooled_recall.insert(r.pooled_recall.end(), rows.recall.begin(), rows.recall.end());
        for (auto& u : rows.users) r.pooled_users.push_back(std::to_string(f) + ":" + u);

        const fs::path report = fold_dir(config.out_dir() / "attacks" / kind.name, f) / "report.json";
        if (!fs::exists(report)) {
            r.attacked = false;
            r.acc.push_back(std::nan(""));
            r.bacc.push_back(std::nan(""));
            continue;
        }
        const json j = read_json(report);
        const json& a = j["attacker"];
        r.acc.push_back(json_number(a, "acc"));
        r.bacc.push_back(json_number(a, "bacc"));
        const auto truth = a["test_truth"].get<std::vector<int>>();
        const auto pred = a["test_predicted"].get<std::vector<int>>();
        for (std::size_t i = 0; i < truth.size(); ++i) {
            r.attack_truth.push_back(truth[i]);
            r.attack_correct.push_back(truth[i] == pred[i]);
        }
    }
    return r;
}

std::optional<TestResult> paired_wilcoxon(const KindResult& a, const KindResult& b, bool ndcg) {
    if (a.pooled_users != b.pooled_users) return std::nullopt;
    return ndcg ? wilcoxon_signed_rank(a.pooled_ndcg, b.pooled_ndcg)
                : wilcoxon_signed_rank(a.pooled_recall, b.pooled_recall);
}

std::optional<TestResult> paired_mcnemar(const KindResult& a, const KindResult& b) {
    if (!a.attacked || !b.attacked || a.attack_truth != b.attack_truth || a.attack_truth.empty()) {
        return std::nullopt;
    }
    return mcnemar(a.attack_correct, b.attack_correct);
}

json optional_test(const std::optional<TestResult>& t) {
    return t ? test_json(*t) : json(nullptr);
}

}  // namespace

void cmd_report(const ExperimentConfig& config, std::ostream& log) {
    const CachedData data = load_cached(config);
    std::vector<KindResult> results;
    std::map<Family, WinnerRun> runs;
    for (Family family : {Family::MultVae, Family::AdvMultVae}) {
        if (auto run = find_winner(config, family)) {
            check_manifest(run->manifest, data, config);
            runs.emplace(family, std::move(*run));
        }
    }
    if (runs.empty()) {
        throw DataError("no completed model runs to report; run the run command first");
    }
    if (runs.size() == 2 && (runs.at(Family::MultVae).manifest["folds"] != runs.at(Family::AdvMultVae).manifest["folds"])) {
        throw DataError("model families were run on different folds");
    }
    for (const auto& kind : model_kinds()) {
        if (runs.contains(kind.family)) results.push_back(collect(config, kind, runs.at(kind.family)));
    }
    const auto find = [&](const std::string& name) -> const KindResult* {
        for (const auto& r : results) {
            if (r.name == name) return &r;
        }
        return nullptr;
    };
    const KindResult* best = find("multvae-best");
    const KindResult* last = find("multvae-last");
    const KindResult* adv = find("adv-multvae");
    const std::size_t k = config.train.top_k;
    const std::string note = "hyperparameters and grids are this project's defaults, not the original authors' settings";

    std::ostringstream tsv;
    tsv << "# " << config.name << ": " << note << '\n'
        << "# \xE2\x80\xA0 marks a two-sided Wilcoxon signed-rank p < 0.05 against multvae-best, users pooled over folds\n"
        << "model\tfold\tndcg@" << k << "\trecall@" << k << "\tacc\tbacc\tndcg_p\tndcg_sig\trecall_p\trecall_sig\n";
    json models = json::object();
    for (const auto& r : results) {
        json folds_json = json::array();
        for (std::size_t i = 0; i < r.folds.size(); ++i) {
            tsv << r.name << '\t' << r.folds[i] << '\t' << fmt(r.ndcg[i]) << '\t' << fmt(r.recall[i]) << '\t'
                << fmt(r.acc[i]) << '\t' << fmt(r.bacc[i]) << "\t\t\t\t\n";
            folds_json.push_back(json{{"fold", r.folds[i]},
                                      {"ndcg", num(r.ndcg[i])},
                                      {"recall", num(r.recall[i])},
                                      {"acc", num(r.acc[i])},
                                      {"bacc", num(r.bacc[i])}});
        }
        std::optional<TestResult> w_ndcg, w_recall;
        if (best && &r != best) {
            w_ndcg = paired_wilcoxon(r, *best, true);
            w_recall = paired_wilcoxon(r, *best, false);
        }
        const auto mark = [](const std::optional<TestResult>& t) {
            return t && t->significant ? std::string("\xE2\x80\xA0") : std::string();
        };
        const auto pval = [](const std::optional<TestResult>& t) { return t ? fmt(t->p_value) : std::string(); };
        const double m_ndcg = mean(r.ndcg), m_recall = mean(r.recall), m_acc = mean(r.acc), m_bacc = mean(r.bacc);
        tsv << r.name << "\tmean\t" << fmt(m_ndcg) << '\t' << fmt(m_recall) << '\t' << fmt(m_acc) << '\t'
            << fmt(m_bacc) << '\t' << pval(w_ndcg) << '\t' << mark(w_ndcg) << '\t' << pval(w_recall) << '\t'
            << mark(w_recall) << '\n';
        models[r.name] = json{{"folds", folds_json},
                              {"mean",
                               {{"ndcg", num(m_ndcg)},
                                {"recall", num(m_recall)},
                                {"acc", num(m_acc)},
                                {"bacc", num(m_bacc)}}},
                              {"wilcoxon_vs_multvae_best",
                               {{"ndcg", optional_test(w_ndcg)}, {"recall", optional_test(w_recall)}}}};
    }

    json summary;
    summary["name"] = config.name;
    summary["note"] = note;
    summary["k"] = k;
    summary["manifest"] = json{{"dataset_sha256", data.hash}, {"seed", config.seed}, {"n_folds", config.n_folds}};
    summary["models"] = models;
    json extra = json::object();
    if (adv && last) {
        extra["ndcg"] = optional_test(paired_wilcoxon(*adv, *last, true));
        extra["recall"] = optional_test(paired_wilcoxon(*adv, *last, false));
    }
    summary["wilcoxon_adv_vs_multvae_last"] = extra;
    json mc = json::object();
    if (adv && best) mc["adv-multvae_vs_multvae-best"] = optional_test(paired_mcnemar(*adv, *best));
    if (adv && last) mc["adv-multvae_vs_multvae-last"] = optional_test(paired_mcnemar(*adv, *last));
    summary["mcnemar_attackers"] = mc;

    std::ostringstream curves;
    curves << "family\tfold\t";
    bool header_done = false;
    for (const auto& [family, run] : runs) {
        for (std::size_t f : run.folds) {
            std::istringstream in(read_text(fold_dir(run.dir, f) / "train_log.tsv"));
            std::string line;
            std::getline(in, line);
            if (!header_done) {
                curves << line << '\n';
                header_done = true;
            }
            while (std::getline(in, line)) {
                if (!line.empty()) curves << family_name(family) << '\t' << f << '\t' << line << '\n';
            }
        }
    }

    const fs::path sweep = config.out_dir() / "sweep" / "sweep.tsv";
    const std::string sweep_text =
        fs::exists(sweep) ? read_text(sweep) : std::string("lambda\tadversary_bacc\tattacker_bacc\tval_ndcg\ttest_ndcg\n");

    const fs::path dir = config.out_dir() / "report";
    fs::create_directories(dir);
    write_text(dir / "summary.tsv", tsv.str());
    write_text(dir / "summary.json", dump(summary));
    write_text(dir / "training_curves.tsv", curves.str());
    write_text(dir / "lambda_sweep.tsv", sweep_text);
    log << tsv.str();
}

void cmd_sweep(const ExperimentConfig& config, std::ostream& log) {
    if (config.lambdas.empty()) {
        throw ConfigError("sweep.lambdas must not be empty");
    }
    const CachedData data = load_cached(config);
    const std::vector<FoldSplit> folds = make_folds(data.matrix, config.n_folds, config.seed);
    const std::vector<std::size_t> sweep_folds = config.folds_to_sweep();
    struct Row {
        double adversary_bacc = 0, attacker_bacc = 0, val_ndcg = 0, test_ndcg = 0;
        std::size_t selected_epoch = 0;
    };
    const std::size_t nf = sweep_folds.size();
    std::vector<Row> rows(config.lambdas.size() * nf);
    const fs::path root = config.out_dir() / "sweep";
    parallel_for(rows.size(), config.workers, [&](std::size_t i) {
        const double lambda = config.lambdas[i / nf];
        const FoldSplit& fold = folds[sweep_folds[i % nf]];
        ExperimentConfig cfg = config;
        cfg.model.lambda = lambda;
        const ModelConfig model = cfg.model_for(Family::AdvMultVae, data.matrix.items());
        const TrainConfig train_cfg = cfg.train_for(Family::AdvMultVae);
        const TrainResult r = train(model, data.matrix, fold, train_cfg);
        const fs::path dir = fold_dir(root / lambda_label(lambda), fold.fold);
        fs::create_directories(dir);
        write_text(dir / "selected.ckpt", serialize_checkpoint(r.selected));
        write_text(dir / "train_log.tsv", r.log.to_tsv());
        const json report = attack_checkpoint(dir / "selected.ckpt", data.matrix, fold, config, dir, "adv-multvae");
        Row& row = rows[i];
        row.adversary_bacc = json_number(report["adversary_head"], "bacc");
        row.attacker_bacc = json_number(report["attacker"], "bacc");
        row.val_ndcg = evaluate_ranking(r.selected, data.matrix, fold.validation_users, fold.validation_splits,
                                        train_cfg.top_k)
                           .mean_ndcg();
        row.test_ndcg =
            evaluate_ranking(r.selected, data.matrix, fold.test_users, fold.test_splits, train_cfg.top_k).mean_ndcg();
        row.selected_epoch = r.log.selected_epoch;
    });

    std::ostringstream per_fold, summary;
    per_fold << "lambda\tfold\tadversary_bacc\tattacker_bacc\tval_ndcg\ttest_ndcg\tselected_epoch\n";
    summary << "lambda\tadversary_bacc\tattacker_bacc\tval_ndcg\ttest_ndcg\n";
    for (std::size_t l = 0; l < config.lambdas.size(); ++l) {
        std::vector<double> adv, att, val, test;
        for (std::size_t f = 0; f < nf; ++f) {
            const Row& row = rows[l * nf + f];
            per_fold << format_double(config.lambdas[l]) << '\t' << sweep_folds[f] << '\t' << fmt(row.adversary_bacc)
                     << '\t' << fmt(row.attacker_bacc) << '\t' << fmt(row.val_ndcg) << '\t' << fmt(row.test_ndcg)
                     << '\t' << row.selected_epoch << '\n';
            adv.push_back(row.adversary_bacc);
            att.push_back(row.attacker_bacc);
            val.push_back(row.val_ndcg);
            test.push_back(row.test_ndcg);
        }
        summary << format_double(config.lambdas[l]) << '\t' << fmt(mean(adv)) << '\t' << fmt(mean(att)) << '\t'
                << fmt(mean(val)) << '\t' << fmt(mean(test)) << '\n';
    }
    write_text(root / "sweep_folds.tsv", per_fold.str());
    write_text(root / "sweep.tsv", summary.str());
    log << summary.str();
}

void cmd_genseed(const ExperimentConfig& config, std::ostream& log) {
    const SyntheticFiles files = generate_synthetic(config.synthetic);
    const fs::path dir = config.resolve(config.synthetic_dir);
    write_text(dir / "ratings.dat", files.ratings);
    write_text(dir / "users.dat", files.users);
    log << "ratings.dat " << sha256_hex(files.ratings) << '\n' << "users.dat " << sha256_hex(files.users) << '\n';
}

int run_cli(int argc, char** argv) {
    CLI::App app{"MultVAE and adversarial MultVAE experiments"};
    app.fallthrough();
    app.require_subcommand(1);
    std::string config_path;
    std::string out;
    std::optional<std::size_t> workers;
    std::optional<std::uint64_t> seed;
    app.add_option("--config", config_path, "Configuration file (default: $ADVVAE_CONFIG)");
    app.add_option("--out", out, "Output directory (overrides the config)");
    app.add_option("--workers", workers, "Worker threads (overrides the config)");
    app.add_option("--seed", seed, "Seed (overrides the config)");

    app.add_subcommand("preprocess", "Parse, filter and cache the dataset");
    auto* run = app.add_subcommand("run", "Train a model family on every fold");
    std::vector<std::string> families;
    std::optional<std::size_t> stop_after;
    run->add_option("--family", families, "multvae and/or adv-multvae (default: both)");
    run->add_option("--stop-after-folds", stop_after)->group("");
    app.add_subcommand("attack", "Train attackers on frozen latents");
    app.add_subcommand("report", "Write summary tables and data series");
    app.add_subcommand("sweep", "Train and attack adv-multvae over the lambda list");
    app.add_subcommand("genseed", "Write the synthetic biased dataset");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitConfig;
    }

    try {
        if (config_path.empty()) {
            if (const char* env = std::getenv("ADVVAE_CONFIG")) config_path = env;
        }
        ExperimentConfig config = config_path.empty() ? ExperimentConfig{} : ExperimentConfig::load(config_path);
        if (!out.empty()) config.output = fs::absolute(out).string();
        if (workers) config.workers = *workers;
        if (seed) config.seed = *seed;

        const std::string verb = app.get_subcommands().front()->get_name();
        if (verb == "preprocess") {
            cmd_preprocess(config, std::cout);
        } else if (verb == "run") {
            if (families.empty()) families = {"multvae", "adv-multvae"};
            for (const auto& f : families) cmd_run(config, parse_family(f), std::cout, {stop_after});
        } else if (verb == "attack") {
            cmd_attack(config, std::cout);
        } else if (verb == "report") {
            cmd_report(config, std::cout);
        } else if (verb == "sweep") {
            cmd_sweep(config, std::cout);
        } else {
            cmd_genseed(config, std::cout);
        }
        return kExitOk;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return kExitData;
    } catch (const DivergenceError& e) {
        std::cerr << "training diverged: " << e.what() << '\n';
        return kExitDivergence;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitFailure;
    }
}

}  // namespace advvae
