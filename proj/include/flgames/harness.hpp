#pragma once

// Experiment plumbing: config files, dataset assembly, repeated runs,
// sweeps, metrics and on-disk artifacts.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "flgames/datagen.hpp"
#include "flgames/orchestrator.hpp"

namespace flgames {

enum class DatasetKind {
    SyntheticSem,
    ColoredMnist,
    ColoredFashion,
    SpuriousCifarPatch,
    MulticlassMnist,
    MulticlassFashion,
    Cache,  // previously written by gen-data
};

std::string dataset_name(DatasetKind kind);
DatasetKind parse_dataset(const std::string& name);

// "standard" is the fixed two-client layout p = (0.2, 0.1); "extended"
// spaces p evenly over [p_min, p_max] for any client count.
enum class Benchmark { Standard, Extended };

struct DataConfig {
    DatasetKind kind = DatasetKind::SyntheticSem;
    Benchmark benchmark = Benchmark::Standard;
    std::filesystem::path root;  // IDX/CIFAR directory or gen-data cache
    std::size_t samples_per_client = 20000;      // synthetic data
    std::optional<std::size_t> train_pool;       // default: everything available
    std::size_t test_samples = 10000;
    ClientSpecOptions specs;
    SemOptions sem;
};

enum class Method { Game, FedAvg, FedSgd };

struct ExperimentConfig {
    std::string name = "experiment";
    Method method = Method::Game;
    DataConfig data;
    GameConfig game;
    BaselineConfig baseline;
    std::size_t n_clients = 2;
    int n_classes = 2;
    std::size_t repeat = 1;
    std::uint64_t master_seed = 0;
    std::filesystem::path output_dir = "runs";
    std::size_t oscillation_window = 200;
    std::vector<std::size_t> sweep_clients;
    std::vector<std::string> sweep_variants;

    void validate() const;
    // Per-repeat seeds: splitmix64(master_seed + i).
    std::vector<std::uint64_t> seeds() const;
    // Tag of the configured method, e.g. "F-FLG-par-smooth" or "fedavg".
    std::string variant() const;
};

// Parses flat `key = value` text with dotted section names; `#` starts a
// comment. Unknown keys, malformed values and missing required keys throw
// ConfigError naming the key.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);

// Applies a variant tag (F-FLG-seq, V-FLG-par-smooth-fast, fedavg, fedsgd).
void apply_variant(ExperimentConfig& config, const std::string& tag);

// Train clients and test environment for one run.
struct ExperimentData {
    std::vector<SpuriousDataset> train;
    SpuriousDataset test;
};

ExperimentData build_data(const ExperimentConfig& config, std::uint64_t data_seed);

struct OscillationMetrics {
    double frequency = 0.0;  // sign changes of first differences / (window - 1)
    double interval = 0.0;   // mean rounds between sign changes, 0 if fewer than 2
};

// Over the trailing `window` first differences; zero differences carry no
// direction and are skipped. Requires series.size() > window >= 2.
OscillationMetrics oscillation_metrics(const std::vector<double>& series, std::size_t window);

struct MeanStd {
    double mean = 0.0;
    double std = 0.0;  // sample standard deviation, 0 for a single value
};

MeanStd mean_std(const std::vector<double>& values);

struct RunRecord {
    std::uint64_t seed = 0;
    bool stopped = false;
    std::size_t stop_round = 0;
    std::size_t rounds_to_stop = 0;  // communication rounds at the stop
    double final_train = 0.0;        // full train pool
    double final_test = 0.0;         // full test set
    double last_train = 0.0;         // last logged round (eval subsets)
    double last_test = 0.0;
    std::size_t oscillation_window = 0;
    OscillationMetrics oscillation;
};

struct MetricsSummary {
    std::string name;
    std::string variant;
    std::string dataset;
    std::size_t n_clients = 0;
    std::uint64_t master_seed = 0;
    std::vector<RunRecord> runs;
    MeanStd train_acc;
    MeanStd test_acc;
    MeanStd rounds_to_stop;
    MeanStd oscillation_frequency;
    MeanStd oscillation_interval;
};

// Per-repeat outcome before it is written out.
struct RunOutput {
    RunRecord record;
    std::vector<RoundLog> logs;
};

RunOutput run_single(const ExperimentConfig& config, std::uint64_t seed);

// Accuracy series the oscillation metric looks at: train accuracy after
// every predictor round.
std::vector<double> predictor_round_series(const std::vector<RoundLog>& logs);

RunRecord summarize_run(std::uint64_t seed, const std::vector<RoundLog>& logs, bool stopped,
                        std::size_t stop_round, const EnsembleScores& final_scores,
                        std::size_t window);

MetricsSummary summarize(const ExperimentConfig& config, std::vector<RunRecord> runs);

// Round-log CSV; the first line is a schema comment carrying the version.
inline constexpr int kRoundsCsvVersion = 1;
std::string rounds_csv(const std::vector<RoundLog>& logs, std::size_t n_clients);
std::vector<RoundLog> parse_rounds_csv(const std::string& text);

std::string summary_json(const MetricsSummary& summary);
std::string plot_csv_header();
std::string plot_csv_rows(const std::vector<RoundLog>& logs, const std::string& variant, std::uint64_t seed);

// Runs every repeat and writes rounds_<seed>.csv, plot.csv and summary.json
// into config.output_dir. A failing run is rethrown with its seed.
MetricsSummary run_experiment(const ExperimentConfig& config);

// One cell per (variant, n_clients); each cell gets its own subdirectory and
// the grid is collected into sweep.csv / sweep.json.
std::vector<MetricsSummary> run_sweep(const ExperimentConfig& config);

// Writes client_<k>.flgd and test.flgd for the first repeat seed.
std::vector<std::filesystem::path> generate_data(const ExperimentConfig& config);

std::string read_text(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, const std::string& text);

// Directory holding dataset files when a config leaves data.root empty.
inline constexpr const char* kDataRootEnv = "FLGAMES_DATA_ROOT";

}  // namespace flgames
