#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "advvae/attacker.hpp"
#include "advvae/dataset.hpp"
#include "advvae/model.hpp"
#include "advvae/trainer.hpp"

namespace advvae {

enum class Family { MultVae, AdvMultVae };

const char* family_name(Family family) noexcept;
Family parse_family(const std::string& name);

// A checkpoint flavour that downstream commands evaluate and attack.
struct ModelKind {
    std::string name;        // multvae-best | multvae-last | adv-multvae
    Family family;
    std::string checkpoint;  // best | last | selected
};

const std::vector<ModelKind>& model_kinds();

// One grid axis: a config key and the values it sweeps.
struct GridAxis {
    std::string key;
    std::vector<std::string> values;
};

// Flat "section.key = value" file. Relative paths resolve against the config
// file's directory, and "${out}" expands to the output directory.
struct ExperimentConfig {
    std::filesystem::path base_dir = ".";
    std::string name = "experiment";
    std::string output = "out";
    std::size_t workers = 1;
    std::uint64_t seed = 42;

    std::string ratings_path;
    std::string users_path;
    FormatSpec format;
    PreprocessOptions prep;

    std::size_t n_folds = 5;
    std::vector<std::size_t> run_folds;  // empty = all folds

    ModelConfig model;
    TrainConfig train;
    SelectionRule adv_selection = SelectionRule::MinAdvBacc;
    std::size_t adv_epochs = 0;  // 0 = train.epochs
    AttackerConfig attacker;

    std::vector<double> lambdas{0.0, 0.5, 1.0, 2.0, 4.0};
    std::vector<std::size_t> sweep_folds;  // empty = run_folds

    std::vector<GridAxis> grid;
    SyntheticSpec synthetic;
    std::string synthetic_dir = "${out}/data";

    void set(const std::string& key, const std::string& value);
    static ExperimentConfig parse(const std::string& text, const std::filesystem::path& base_dir = ".");
    static ExperimentConfig load(const std::filesystem::path& path);

    std::filesystem::path out_dir() const;
    std::filesystem::path resolve(const std::string& path) const;
    std::vector<std::size_t> folds_to_run() const;
    std::vector<std::size_t> folds_to_sweep() const;

    // Cartesian product of the grid axes over this config; one entry when no grid.
    std::vector<std::pair<std::string, ExperimentConfig>> expand_grid() const;
    ModelConfig model_for(Family family, std::size_t items) const;
    TrainConfig train_for(Family family) const;
};

std::string sha256_hex(std::string_view bytes);

// Exit codes of the CLI.
enum ExitCode : int {
    kExitOk = 0,
    kExitFailure = 1,
    kExitConfig = 2,
    kExitData = 3,
    kExitDivergence = 4,
};

struct PreprocessOutcome {
    InteractionMatrix matrix;
    DatasetStats stats;
    std::string artifact_hash;
    bool cache_hit = false;
};

PreprocessOutcome cmd_preprocess(const ExperimentConfig& config, std::ostream& log);

struct RunOptions {
    // Stop after this many newly completed folds (simulates an interrupted run).
    std::optional<std::size_t> stop_after_folds;
};

void cmd_run(const ExperimentConfig& config, Family family, std::ostream& log, RunOptions options = {});
void cmd_attack(const ExperimentConfig& config, std::ostream& log);
void cmd_report(const ExperimentConfig& config, std::ostream& log);
void cmd_sweep(const ExperimentConfig& config, std::ostream& log);
void cmd_genseed(const ExperimentConfig& config, std::ostream& log);

// CLI entry point shared by the executable and the tests.
int run_cli(int argc, char** argv);

}  // namespace advvae
