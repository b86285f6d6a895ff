#include "flgames/harness.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>
#include <system_error>

#include "json.hpp"

#include "flgames/errors.hpp"
#include "flgames/rng.hpp"

namespace flgames {

namespace {

constexpr std::uint64_t kTestDataStream = 99;
constexpr std::uint64_t kClientDataStream = 100;
constexpr std::uint64_t kPartitionStream = 5;
constexpr std::uint64_t kDataSeedStream = 7;

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& expected, const std::string& value) {
    throw ConfigError("config key '" + key + "': expected " + expected + ", got '" + value + "'");
}

std::size_t to_size(const std::string& key, const std::string& v) {
    std::size_t out = 0;
    auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size() || v.empty()) bad_value(key, "unsigned integer", v);
    return out;
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
    std::uint64_t out = 0;
    auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size() || v.empty()) bad_value(key, "unsigned integer", v);
    return out;
}

double to_double(const std::string& key, const std::string& v) {
    double out = 0.0;
    auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size() || v.empty() || !std::isfinite(out)) {
        bad_value(key, "number", v);
    }
    return out;
}

bool to_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    bad_value(key, "boolean", v);
}

std::vector<std::string> split_list(const std::string& v) {
    std::vector<std::string> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

std::vector<std::size_t> to_size_list(const std::string& key, const std::string& v) {
    std::vector<std::size_t> out;
    for (const auto& item : split_list(v)) out.push_back(to_size(key, item));
    if (out.empty()) bad_value(key, "comma-separated unsigned integers", v);
    return out;
}

OptimizerKind to_optimizer(const std::string& key, const std::string& v) {
    if (v == "adam") return OptimizerKind::Adam;
    if (v == "sgd") return OptimizerKind::Sgd;
    bad_value(key, "adam or sgd", v);
}

using Setter = std::function<void(ExperimentConfig&, const std::string& key, const std::string& value)>;

const std::map<std::string, Setter>& setters() {
    static const std::map<std::string, Setter> table = {
        {"name", [](auto& c, auto&, auto& v) { c.name = v; }},
        {"method", [](auto& c, auto& k, auto& v) {
             if (v == "game") c.method = Method::Game;
             else if (v == "fedavg") c.method = Method::FedAvg;
             else if (v == "fedsgd") c.method = Method::FedSgd;
             else bad_value(k, "game, fedavg or fedsgd", v);
         }},
        {"variant", [](auto& c, auto&, auto& v) { apply_variant(c, v); }},
        {"seed", [](auto& c, auto& k, auto& v) { c.master_seed = to_u64(k, v); }},
        {"repeat", [](auto& c, auto& k, auto& v) { c.repeat = to_size(k, v); }},
        {"out", [](auto& c, auto&, auto& v) { c.output_dir = v; }},
        {"n_clients", [](auto& c, auto& k, auto& v) { c.n_clients = to_size(k, v); }},
        {"n_classes", [](auto& c, auto& k, auto& v) { c.n_classes = static_cast<int>(to_size(k, v)); }},
        {"threads", [](auto& c, auto& k, auto& v) { c.game.threads = c.baseline.threads = to_size(k, v); }},

        {"data.kind", [](auto& c, auto&, auto& v) { c.data.kind = parse_dataset(v); }},
        {"data.benchmark", [](auto& c, auto& k, auto& v) {
             if (v == "standard") c.data.benchmark = Benchmark::Standard;
             else if (v == "extended") c.data.benchmark = Benchmark::Extended;
             else bad_value(k, "standard or extended", v);
         }},
        {"data.root", [](auto& c, auto&, auto& v) { c.data.root = v; }},
        {"data.samples_per_client", [](auto& c, auto& k, auto& v) { c.data.samples_per_client = to_size(k, v); }},
        {"data.train_pool", [](auto& c, auto& k, auto& v) { c.data.train_pool = to_size(k, v); }},
        {"data.test_samples", [](auto& c, auto& k, auto& v) { c.data.test_samples = to_size(k, v); }},
        {"data.delta", [](auto& c, auto& k, auto& v) { c.data.specs.delta = to_double(k, v); }},
        {"data.p_min", [](auto& c, auto& k, auto& v) { c.data.specs.p_min = to_double(k, v); }},
        {"data.p_max", [](auto& c, auto& k, auto& v) { c.data.specs.p_max = to_double(k, v); }},
        {"data.p_test", [](auto& c, auto& k, auto& v) { c.data.specs.p_test = to_double(k, v); }},
        {"data.client_sizes", [](auto& c, auto& k, auto& v) { c.data.specs.uneven_sizes = to_size_list(k, v); }},
        {"data.sem.causal_dims", [](auto& c, auto& k, auto& v) { c.data.sem.causal_dims = to_size(k, v); }},
        {"data.sem.spurious_dims", [](auto& c, auto& k, auto& v) { c.data.sem.spurious_dims = to_size(k, v); }},
        {"data.sem.noise_dims", [](auto& c, auto& k, auto& v) { c.data.sem.noise_dims = to_size(k, v); }},
        {"data.sem.causal_signal", [](auto& c, auto& k, auto& v) { c.data.sem.causal_signal = to_double(k, v); }},
        {"data.sem.spurious_signal", [](auto& c, auto& k, auto& v) { c.data.sem.spurious_signal = to_double(k, v); }},
        {"data.sem.centered", [](auto& c, auto& k, auto& v) { c.data.sem.centered = to_bool(k, v); }},

        {"game.phi", [](auto& c, auto& k, auto& v) {
             if (v == "fixed") c.game.variant_phi = PhiVariant::Fixed;
             else if (v == "variable") c.game.variant_phi = PhiVariant::Variable;
             else bad_value(k, "fixed or variable", v);
         }},
        {"game.schedule", [](auto& c, auto& k, auto& v) {
             if (v == "sequential") c.game.schedule = Schedule::Sequential;
             else if (v == "parallel") c.game.schedule = Schedule::Parallel;
             else bad_value(k, "sequential or parallel", v);
         }},
        {"game.smooth", [](auto& c, auto& k, auto& v) { c.game.smooth = to_bool(k, v); }},
        {"game.fast", [](auto& c, auto& k, auto& v) { c.game.fast_phi = to_bool(k, v); }},
        {"game.buffer", [](auto& c, auto& k, auto& v) { c.game.buffer_capacity = to_size(k, v); }},
        {"game.c_percent", [](auto& c, auto& k, auto& v) { c.game.c_percent = to_double(k, v); }},
        {"game.local_steps", [](auto& c, auto& k, auto& v) { c.game.local_steps = to_size(k, v); }},
        {"game.predictor_c_percent", [](auto& c, auto& k, auto& v) { c.game.predictor_c_percent = to_double(k, v); }},
        {"game.batch_size", [](auto& c, auto& k, auto& v) {
             c.game.batch_size = c.baseline.batch_size = to_size(k, v);
         }},
        {"game.lr_phi", [](auto& c, auto& k, auto& v) { c.game.lr_phi = to_double(k, v); }},
        {"game.lr_predictor", [](auto& c, auto& k, auto& v) { c.game.lr_predictor = to_double(k, v); }},
        {"game.optimizer", [](auto& c, auto& k, auto& v) { c.game.predictor_optimizer = to_optimizer(k, v); }},
        {"game.divisor", [](auto& c, auto& k, auto& v) {
             if (v == "clients") c.game.divisor = EnsembleDivisor::ClientCount;
             else if (v == "terms") c.game.divisor = EnsembleDivisor::TermCount;
             else bad_value(k, "clients or terms", v);
         }},
        {"game.max_rounds", [](auto& c, auto& k, auto& v) { c.game.max_rounds = to_size(k, v); }},
        {"game.stop", [](auto& c, auto& k, auto& v) { c.game.stop_enabled = to_bool(k, v); }},
        {"game.stop_threshold", [](auto& c, auto& k, auto& v) { c.game.stop_threshold = to_double(k, v); }},
        {"game.stop_after_peak", [](auto& c, auto& k, auto& v) { c.game.stop_after_peak = to_bool(k, v); }},
        {"game.warm_start", [](auto& c, auto& k, auto& v) { c.game.warm_start_override = to_size(k, v); }},
        {"game.skip_phi_rounds", [](auto& c, auto& k, auto& v) { c.game.skip_phi_rounds = to_bool(k, v); }},
        {"game.eval_cap", [](auto& c, auto& k, auto& v) { c.game.eval_cap = to_size(k, v); }},

        {"model.hidden", [](auto& c, auto& k, auto& v) {
             c.game.model.predictor_hidden = c.baseline.hidden = to_size_list(k, v);
         }},
        {"model.phi_width", [](auto& c, auto& k, auto& v) { c.game.model.phi_width = to_size(k, v); }},

        {"baseline.rounds", [](auto& c, auto& k, auto& v) { c.baseline.rounds = to_size(k, v); }},
        {"baseline.local_epochs", [](auto& c, auto& k, auto& v) { c.baseline.local_epochs = to_size(k, v); }},
        {"baseline.lr", [](auto& c, auto& k, auto& v) { c.baseline.learning_rate = to_double(k, v); }},
        {"baseline.optimizer", [](auto& c, auto& k, auto& v) { c.baseline.optimizer = to_optimizer(k, v); }},

        {"metrics.window", [](auto& c, auto& k, auto& v) { c.oscillation_window = to_size(k, v); }},
        {"sweep.n_clients", [](auto& c, auto& k, auto& v) { c.sweep_clients = to_size_list(k, v); }},
        {"sweep.variants", [](auto& c, auto&, auto& v) { c.sweep_variants = split_list(v); }},
    };
    return table;
}

std::string format_double(double v) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    if (ec != std::errc()) throw std::runtime_error("format_double failed");
    return std::string(buf, ptr);
}

std::filesystem::path data_root(const DataConfig& data) {
    if (!data.root.empty()) return data.root;
    if (const char* env = std::getenv(kDataRootEnv)) return env;
    return {};
}

// `base` or `base.gz` under root.
std::filesystem::path find_source(const std::filesystem::path& root, const std::string& base) {
    for (const auto& name : {base, base + ".gz"}) {
        const auto p = root / name;
        if (std::filesystem::exists(p)) return p;
    }
    throw ConfigError("dataset file " + (root / base).string() + " (or .gz) not found");
}

struct ImageSources {
    RawImageSet train;
    RawImageSet test;
};

ImageSources load_sources(const DataConfig& data) {
    const auto root = data_root(data);
    if (root.empty()) {
        throw ConfigError(std::string("data.root is empty and ") + kDataRootEnv + " is not set");
    }
    ImageSources src;
    if (data.kind == DatasetKind::SpuriousCifarPatch) {
        for (int b = 1; b <= 5; ++b) {
            const auto part = parse_cifar10(read_file_bytes(find_source(root, "data_batch_" + std::to_string(b) + ".bin")));
            if (b == 1) {
                src.train = part;
            } else {
                src.train.pixels.insert(src.train.pixels.end(), part.pixels.begin(), part.pixels.end());
                src.train.labels.insert(src.train.labels.end(), part.labels.begin(), part.labels.end());
                src.train.count += part.count;
            }
        }
        src.test = parse_cifar10(read_file_bytes(find_source(root, "test_batch.bin")));
        return src;
    }
    src.train = load_idx(find_source(root, "train-images-idx3-ubyte"), find_source(root, "train-labels-idx1-ubyte"));
    src.test = load_idx(find_source(root, "t10k-images-idx3-ubyte"), find_source(root, "t10k-labels-idx1-ubyte"));
    return src;
}

LabelRule rule_for(const ExperimentConfig& config) {
    switch (config.data.kind) {
        case DatasetKind::ColoredMnist: return mnist_binary_rule();
        case DatasetKind::ColoredFashion: return fashion_binary_rule();
        case DatasetKind::SpuriousCifarPatch: return cifar_binary_rule();
        case DatasetKind::MulticlassMnist:
        case DatasetKind::MulticlassFashion: return grouped_rule(10, config.n_classes);
        default: throw ConfigError("no label rule for " + dataset_name(config.data.kind));
    }
}

SpuriousMechanism mechanism_for(DatasetKind kind) {
    switch (kind) {
        case DatasetKind::SpuriousCifarPatch: return SpuriousMechanism::Patch;
        case DatasetKind::MulticlassMnist:
        case DatasetKind::MulticlassFashion: return SpuriousMechanism::Palette;
        default: return SpuriousMechanism::Color;
    }
}

ClientSpecOptions spec_options(const ExperimentConfig& config, std::size_t pool) {
    ClientSpecOptions opts = config.data.specs;
    if (config.data.benchmark == Benchmark::Standard) {
        opts.p_min = 0.1;
        opts.p_max = 0.2;
    }
    opts.train_pool = pool;
    opts.test_samples = config.data.test_samples;
    return opts;
}

std::vector<std::size_t> sizes_of(const ClientSpecs& specs) {
    std::vector<std::size_t> out;
    for (const auto& s : specs.train) out.push_back(s.n_samples);
    return out;
}

ExperimentData build_image_data(const ExperimentConfig& config, std::uint64_t data_seed) {
    const auto src = load_sources(config.data);
    const auto rule = rule_for(config);
    const auto train = binarize_labels(src.train, rule);
    const auto test = binarize_labels(src.test, rule);
    const std::size_t pool = config.data.train_pool.value_or(train.images.count);
    if (pool > train.images.count) {
        throw ConfigError("data.train_pool " + std::to_string(pool) + " exceeds the " +
                          std::to_string(train.images.count) + " available training images");
    }
    auto opts = spec_options(config, pool);
    opts.test_samples = std::min(config.data.test_samples, test.images.count);
    const auto specs = make_client_specs(config.n_clients, opts);
    const auto mechanism = mechanism_for(config.data.kind);

    // Unused images beyond the pool form one extra, discarded part.
    std::vector<std::size_t> pool_sizes = sizes_of(specs);
    if (pool < train.images.count) pool_sizes.push_back(train.images.count - pool);
    const auto parts = partition_indices(train.images.count, pool_sizes, derive_seed(data_seed, kPartitionStream));

    ExperimentData out;
    for (std::size_t k = 0; k < specs.train.size(); ++k) {
        out.train.push_back(build_image_environment(train, parts[k], specs.train[k], mechanism, rule.num_classes,
                                                    derive_seed(data_seed, kClientDataStream + k)));
    }
    std::vector<std::size_t> test_rows(opts.test_samples);
    std::iota(test_rows.begin(), test_rows.end(), std::size_t{0});
    out.test = build_image_environment(test, test_rows, specs.test, mechanism, rule.num_classes,
                                       derive_seed(data_seed, kTestDataStream));
    return out;
}

ExperimentData load_cached_data(const ExperimentConfig& config) {
    const auto root = data_root(config.data);
    if (root.empty()) throw ConfigError("cache dataset needs data.root");
    ExperimentData out;
    for (std::size_t k = 0; k < config.n_clients; ++k) {
        out.train.push_back(load_dataset(root / ("client_" + std::to_string(k) + ".flgd")));
    }
    out.test = load_dataset(root / "test.flgd");
    return out;
}

nlohmann::ordered_json mean_std_json(const MeanStd& m) {
    nlohmann::ordered_json j;
    j["mean"] = m.mean;
    j["std"] = m.std;
    return j;
}

std::string join_ids(const std::vector<int>& ids) {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (i) out += ';';
        out += std::to_string(ids[i]);
    }
    return out;
}

}  // namespace

std::string dataset_name(DatasetKind kind) {
    switch (kind) {
        case DatasetKind::SyntheticSem: return "synthetic-sem";
        case DatasetKind::ColoredMnist: return "colored-mnist";
        case DatasetKind::ColoredFashion: return "colored-fashion";
        case DatasetKind::SpuriousCifarPatch: return "spurious-cifar-patch";
        case DatasetKind::MulticlassMnist: return "multiclass-mnist";
        case DatasetKind::MulticlassFashion: return "multiclass-fashion";
        case DatasetKind::Cache: return "cache";
    }
    return "unknown";
}

DatasetKind parse_dataset(const std::string& name) {
    for (auto kind : {DatasetKind::SyntheticSem, DatasetKind::ColoredMnist, DatasetKind::ColoredFashion,
                      DatasetKind::SpuriousCifarPatch, DatasetKind::MulticlassMnist,
                      DatasetKind::MulticlassFashion, DatasetKind::Cache}) {
        if (dataset_name(kind) == name) return kind;
    }
    throw ConfigError("unknown dataset '" + name + "'");
}

void ExperimentConfig::validate() const {
    if (repeat < 1) throw ConfigError("repeat must be at least 1");
    if (n_clients < 1) throw ConfigError("n_clients must be at least 1");
    if (oscillation_window < 2) throw ConfigError("metrics.window must be at least 2");
    const bool multiclass =
        data.kind == DatasetKind::MulticlassMnist || data.kind == DatasetKind::MulticlassFashion;
    if (multiclass) {
        if (n_classes < 2 || n_classes > 10) throw ConfigError("n_classes must lie in [2, 10]");
    } else if (n_classes != 2 && data.kind != DatasetKind::Cache) {
        throw ConfigError("n_classes must be 2 for " + dataset_name(data.kind));
    }
    if (data.benchmark == Benchmark::Standard && n_clients != 2 && sweep_clients.empty()) {
        throw ConfigError("the standard benchmark has exactly 2 clients; use data.benchmark = extended");
    }
    if (data.kind != DatasetKind::SyntheticSem && data.kind != DatasetKind::Cache) {
        const auto root = data_root(data);
        if (!root.empty() && !std::filesystem::exists(root)) {
            throw ConfigError("data.root " + root.string() + " does not exist");
        }
    }
    if (method == Method::Game) {
        game.validate();
    } else if (baseline.rounds < 1) {
        throw ConfigError("baseline.rounds must be positive");
    }
}

std::vector<std::uint64_t> ExperimentConfig::seeds() const {
    std::vector<std::uint64_t> out;
    for (std::size_t i = 0; i < repeat; ++i) out.push_back(splitmix64(master_seed + i));
    return out;
}

std::string ExperimentConfig::variant() const {
    switch (method) {
        case Method::FedAvg: return "fedavg";
        case Method::FedSgd: return "fedsgd";
        case Method::Game: break;
    }
    return game.variant_name();
}

void apply_variant(ExperimentConfig& config, const std::string& tag) {
    if (tag == "fedavg") {
        config.method = Method::FedAvg;
        return;
    }
    if (tag == "fedsgd") {
        config.method = Method::FedSgd;
        return;
    }
    std::vector<std::string> parts;
    std::stringstream ss(tag);
    std::string item;
    while (std::getline(ss, item, '-')) parts.push_back(item);
    if (parts.size() < 3 || parts[1] != "FLG" || (parts[0] != "F" && parts[0] != "V") ||
        (parts[2] != "seq" && parts[2] != "par")) {
        throw ConfigError("unknown variant '" + tag + "' (expected e.g. F-FLG-par-smooth or fedavg)");
    }
    config.method = Method::Game;
    config.game.variant_phi = parts[0] == "F" ? PhiVariant::Fixed : PhiVariant::Variable;
    config.game.schedule = parts[2] == "par" ? Schedule::Parallel : Schedule::Sequential;
    config.game.smooth = false;
    config.game.fast_phi = false;
    for (std::size_t i = 3; i < parts.size(); ++i) {
        if (parts[i] == "smooth") config.game.smooth = true;
        else if (parts[i] == "fast") config.game.fast_phi = true;
        else throw ConfigError("unknown variant suffix '" + parts[i] + "' in '" + tag + "'");
    }
}

ExperimentConfig parse_config(const std::string& text) {
    ExperimentConfig config;
    std::set<std::string> seen;
    std::stringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    // Variant tags reset several game fields, so they are applied first.
    std::vector<std::pair<std::string, std::string>> entries;
    while (std::getline(in, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
        }
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (!setters().contains(key)) throw ConfigError("unknown config key '" + key + "'");
        if (!seen.insert(key).second) throw ConfigError("config key '" + key + "' given twice");
        if (value.empty()) throw ConfigError("config key '" + key + "' has no value");
        entries.emplace_back(key, value);
    }
    std::stable_partition(entries.begin(), entries.end(), [](const auto& e) { return e.first == "variant"; });
    for (const auto& [key, value] : entries) setters().at(key)(config, key, value);

    if (!seen.contains("data.kind")) throw ConfigError("missing required config key 'data.kind'");
    if (config.method == Method::Game && config.game.stop_enabled && !seen.contains("game.stop_threshold")) {
        throw ConfigError("missing required config key 'game.stop_threshold' (or set game.stop = false)");
    }
    config.validate();
    return config;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
    return parse_config(read_text(path));
}

ExperimentData build_data(const ExperimentConfig& config, std::uint64_t data_seed) {
    switch (config.data.kind) {
        case DatasetKind::SyntheticSem: {
            const std::size_t pool =
                config.data.train_pool.value_or(config.data.samples_per_client * config.n_clients);
            const auto specs = make_client_specs(config.n_clients, spec_options(config, pool));
            ExperimentData out;
            for (const auto& s : specs.train) {
                out.train.push_back(synth_sem_generate(
                    s, config.data.sem, derive_seed(data_seed, kClientDataStream + static_cast<std::uint64_t>(s.client_id))));
            }
            out.test = synth_sem_generate(specs.test, config.data.sem, derive_seed(data_seed, kTestDataStream));
            return out;
        }
        case DatasetKind::Cache: return load_cached_data(config);
        default: return build_image_data(config, data_seed);
    }
}

OscillationMetrics oscillation_metrics(const std::vector<double>& series, std::size_t window) {
    if (window < 2) throw ConfigError("oscillation_metrics: window must be at least 2");
    if (series.size() <= window) {
        throw ConfigError("oscillation_metrics: series of length " + std::to_string(series.size()) +
                          " is too short for window " + std::to_string(window));
    }
    const std::size_t start = series.size() - window;
    std::vector<std::size_t> changes;
    int last_sign = 0;
    for (std::size_t i = start; i < series.size(); ++i) {
        const double d = series[i] - series[i - 1];
        const int sign = (d > 0.0) - (d < 0.0);
        if (sign == 0) continue;
        if (last_sign != 0 && sign != last_sign) changes.push_back(i);
        last_sign = sign;
    }
    OscillationMetrics m;
    m.frequency = static_cast<double>(changes.size()) / static_cast<double>(window - 1);
    if (changes.size() >= 2) {
        m.interval = static_cast<double>(changes.back() - changes.front()) / static_cast<double>(changes.size() - 1);
    }
    return m;
}

MeanStd mean_std(const std::vector<double>& values) {
    MeanStd out;
    if (values.empty()) return out;
    double sum = 0.0;
    for (double v : values) sum += v;
    out.mean = sum / static_cast<double>(values.size());
    if (values.size() > 1) {
        double sq = 0.0;
        for (double v : values) sq += (v - out.mean) * (v - out.mean);
        out.std = std::sqrt(sq / static_cast<double>(values.size() - 1));
    }
    return out;
}

std::vector<double> predictor_round_series(const std::vector<RoundLog>& logs) {
    std::vector<double> out;
    for (const auto& l : logs) {
        if (!l.phi_round) out.push_back(l.train_acc);
    }
    return out;
}

RunRecord summarize_run(std::uint64_t seed, const std::vector<RoundLog>& logs, bool stopped,
                        std::size_t stop_round, const EnsembleScores& final_scores, std::size_t window) {
    RunRecord r;
    r.seed = seed;
    r.stopped = stopped;
    r.stop_round = stop_round;
    r.final_train = final_scores.train_acc;
    r.final_test = final_scores.test_acc;
    if (!logs.empty()) {
        r.rounds_to_stop = logs.back().communication_rounds;
        r.last_train = logs.back().train_acc;
        r.last_test = logs.back().test_acc;
    }
    const auto series = predictor_round_series(logs);
    // Short runs use the longest window they support.
    if (series.size() >= 3) {
        r.oscillation_window = std::min(window, series.size() - 1);
        r.oscillation = oscillation_metrics(series, r.oscillation_window);
    }
    return r;
}

RunOutput run_single(const ExperimentConfig& config, std::uint64_t seed) {
    auto data = build_data(config, derive_seed(seed, kDataSeedStream));
    // Final scores use every row, the per-round curve the capped subsets.
    const auto full = make_federation(data.train, data.test, std::numeric_limits<std::size_t>::max());
    const auto fed = make_federation(std::move(data.train), std::move(data.test), config.game.eval_cap);
    RunOutput out;
    if (config.method == Method::Game) {
        auto result = run_training(fed, config.game, seed);
        result.state.eval_cache = {};
        const auto final_scores = evaluate_ensemble(result.state, full);
        out.logs = std::move(result.logs);
        out.record = summarize_run(seed, out.logs, result.stopped, result.stop_round, final_scores,
                                   config.oscillation_window);
    } else {
        auto result = config.method == Method::FedAvg ? run_fedavg_baseline(fed, config.baseline, seed)
                                                      : run_fedsgd_baseline(fed, config.baseline, seed);
        EnsembleScores final_scores;
        final_scores.train_acc = accuracy(predict(result.model, full.train_eval.inputs), full.train_eval.labels);
        final_scores.test_acc = accuracy(predict(result.model, full.test_eval.inputs), full.test_eval.labels);
        out.logs = std::move(result.logs);
        out.record = summarize_run(seed, out.logs, false, out.logs.size(), final_scores, config.oscillation_window);
    }
    return out;
}

MetricsSummary summarize(const ExperimentConfig& config, std::vector<RunRecord> runs) {
    MetricsSummary s;
    s.name = config.name;
    s.variant = config.variant();
    s.dataset = dataset_name(config.data.kind);
    s.n_clients = config.n_clients;
    s.master_seed = config.master_seed;
    std::vector<double> train, test, rounds, freq, interval;
    for (const auto& r : runs) {
        train.push_back(r.final_train);
        test.push_back(r.final_test);
        rounds.push_back(static_cast<double>(r.rounds_to_stop));
        freq.push_back(r.oscillation.frequency);
        interval.push_back(r.oscillation.interval);
    }
    s.train_acc = mean_std(train);
    s.test_acc = mean_std(test);
    s.rounds_to_stop = mean_std(rounds);
    s.oscillation_frequency = mean_std(freq);
    s.oscillation_interval = mean_std(interval);
    s.runs = std::move(runs);
    return s;
}

std::string rounds_csv(const std::vector<RoundLog>& logs, std::size_t n_clients) {
    std::string out = "# flgames rounds v" + std::to_string(kRoundsCsvVersion) + "\n";
    out += "round,predictor_round,communication_rounds,acting,train_acc,test_acc,phi_round";
    for (std::size_t k = 0; k < n_clients; ++k) out += ",loss_" + std::to_string(k);
    out += '\n';
    for (const auto& l : logs) {
        out += std::to_string(l.round) + ',' + std::to_string(l.predictor_round) + ',' +
               std::to_string(l.communication_rounds) + ',' + join_ids(l.acting) + ',' +
               format_double(l.train_acc) + ',' + format_double(l.test_acc) + ',' + (l.phi_round ? "1" : "0");
        for (std::size_t k = 0; k < n_clients; ++k) {
            out += ',';
            if (k < l.client_loss.size() && l.client_loss[k]) out += format_double(*l.client_loss[k]);
        }
        out += '\n';
    }
    return out;
}

std::vector<RoundLog> parse_rounds_csv(const std::string& text) {
    std::stringstream in(text);
    std::string line;
    std::getline(in, line);
    const std::string magic = "# flgames rounds v";
    if (line.rfind(magic, 0) != 0) throw FormatError("rounds CSV: missing version comment");
    if (to_size("version", line.substr(magic.size())) != static_cast<std::size_t>(kRoundsCsvVersion)) {
        throw FormatError("rounds CSV: unsupported version " + line.substr(magic.size()));
    }
    std::getline(in, line);
    const std::size_t columns = static_cast<std::size_t>(std::count(line.begin(), line.end(), ',')) + 1;
    if (columns < 7) throw FormatError("rounds CSV: short header");
    const std::size_t n_clients = columns - 7;
    std::vector<RoundLog> logs;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::size_t pos = 0;
        while (true) {
            const auto comma = line.find(',', pos);
            cells.push_back(line.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos));
            if (comma == std::string::npos) break;
            pos = comma + 1;
        }
        if (cells.size() != columns) throw FormatError("rounds CSV: row has " + std::to_string(cells.size()) + " cells");
        RoundLog l;
        l.round = to_size("round", cells[0]);
        l.predictor_round = to_size("predictor_round", cells[1]);
        l.communication_rounds = to_size("communication_rounds", cells[2]);
        std::stringstream ids(cells[3]);
        std::string id;
        while (std::getline(ids, id, ';')) {
            if (!id.empty()) l.acting.push_back(static_cast<int>(to_size("acting", id)));
        }
        l.train_acc = to_double("train_acc", cells[4]);
        l.test_acc = to_double("test_acc", cells[5]);
        l.phi_round = cells[6] == "1";
        l.client_loss.assign(n_clients, std::nullopt);
        for (std::size_t k = 0; k < n_clients; ++k) {
            if (!cells[7 + k].empty()) l.client_loss[k] = to_double("loss", cells[7 + k]);
        }
        logs.push_back(std::move(l));
    }
    return logs;
}

std::string summary_json(const MetricsSummary& s) {
    nlohmann::ordered_json j;
    j["name"] = s.name;
    j["variant"] = s.variant;
    j["dataset"] = s.dataset;
    j["n_clients"] = s.n_clients;
    j["master_seed"] = s.master_seed;
    j["train_acc"] = mean_std_json(s.train_acc);
    j["test_acc"] = mean_std_json(s.test_acc);
    j["rounds_to_stop"] = mean_std_json(s.rounds_to_stop);
    j["oscillation_frequency"] = mean_std_json(s.oscillation_frequency);
    j["oscillation_interval"] = mean_std_json(s.oscillation_interval);
    auto runs = nlohmann::ordered_json::array();
    for (const auto& r : s.runs) {
        nlohmann::ordered_json jr;
        jr["seed"] = r.seed;
        jr["stopped"] = r.stopped;
        jr["stop_round"] = r.stop_round;
        jr["rounds_to_stop"] = r.rounds_to_stop;
        jr["final_train_acc"] = r.final_train;
        jr["final_test_acc"] = r.final_test;
        jr["last_train_acc"] = r.last_train;
        jr["last_test_acc"] = r.last_test;
        jr["oscillation_window"] = r.oscillation_window;
        jr["oscillation_frequency"] = r.oscillation.frequency;
        jr["oscillation_interval"] = r.oscillation.interval;
        runs.push_back(std::move(jr));
    }
    j["runs"] = std::move(runs);
    return j.dump(2) + "\n";
}

std::string plot_csv_header() { return "round,metric,value,variant,seed\n"; }

std::string plot_csv_rows(const std::vector<RoundLog>& logs, const std::string& variant, std::uint64_t seed) {
    std::string out;
    const std::string tail = ',' + variant + ',' + std::to_string(seed) + '\n';
    for (const auto& l : logs) {
        const std::string r = std::to_string(l.round);
        out += r + ",train_acc," + format_double(l.train_acc) + tail;
        out += r + ",test_acc," + format_double(l.test_acc) + tail;
        out += r + ",communication_rounds," + std::to_string(l.communication_rounds) + tail;
    }
    return out;
}

MetricsSummary run_experiment(const ExperimentConfig& config) {
    config.validate();
    std::filesystem::create_directories(config.output_dir);
    std::vector<RunRecord> records;
    std::string plot = plot_csv_header();
    const std::string variant = config.variant();
    for (const auto seed : config.seeds()) {
        RunOutput run;
        try {
            run = run_single(config, seed);
        } catch (const std::exception& e) {
            throw Error("run with seed " + std::to_string(seed) + " failed: " + e.what());
        }
        write_text(config.output_dir / ("rounds_" + std::to_string(seed) + ".csv"),
                   rounds_csv(run.logs, config.n_clients));
        plot += plot_csv_rows(run.logs, variant, seed);
        records.push_back(run.record);
    }
    auto summary = summarize(config, std::move(records));
    write_text(config.output_dir / "plot.csv", plot);
    write_text(config.output_dir / "summary.json", summary_json(summary));
    return summary;
}

std::vector<MetricsSummary> run_sweep(const ExperimentConfig& config) {
    const auto clients = config.sweep_clients.empty() ? std::vector<std::size_t>{config.n_clients} : config.sweep_clients;
    const auto variants = config.sweep_variants.empty() ? std::vector<std::string>{config.variant()} : config.sweep_variants;
    std::vector<MetricsSummary> cells;
    std::string table =
        "variant,n_clients,rounds_to_stop_mean,rounds_to_stop_std,train_acc_mean,train_acc_std,"
        "test_acc_mean,test_acc_std,oscillation_frequency_mean\n";
    nlohmann::ordered_json grid = nlohmann::ordered_json::array();
    for (const auto& tag : variants) {
        for (const auto n : clients) {
            ExperimentConfig cell = config;
            apply_variant(cell, tag);
            cell.n_clients = n;
            if (n != 2) cell.data.benchmark = Benchmark::Extended;
            cell.sweep_clients.clear();
            cell.sweep_variants.clear();
            cell.output_dir = config.output_dir / tag / ("n" + std::to_string(n));
            auto s = run_experiment(cell);
            table += s.variant + ',' + std::to_string(n) + ',' + format_double(s.rounds_to_stop.mean) + ',' +
                     format_double(s.rounds_to_stop.std) + ',' + format_double(s.train_acc.mean) + ',' +
                     format_double(s.train_acc.std) + ',' + format_double(s.test_acc.mean) + ',' +
                     format_double(s.test_acc.std) + ',' + format_double(s.oscillation_frequency.mean) + '\n';
            grid.push_back(nlohmann::ordered_json::parse(summary_json(s)));
            cells.push_back(std::move(s));
        }
    }
    write_text(config.output_dir / "sweep.csv", table);
    write_text(config.output_dir / "sweep.json", grid.dump(2) + "\n");
    return cells;
}

std::vector<std::filesystem::path> generate_data(const ExperimentConfig& config) {
    config.validate();
    const auto seed = config.seeds().front();
    const auto data = build_data(config, derive_seed(seed, kDataSeedStream));
    std::filesystem::create_directories(config.output_dir);
    std::vector<std::filesystem::path> written;
    for (std::size_t k = 0; k < data.train.size(); ++k) {
        written.push_back(config.output_dir / ("client_" + std::to_string(k) + ".flgd"));
        save_dataset(data.train[k], written.back());
    }
    written.push_back(config.output_dir / "test.flgd");
    save_dataset(data.test, written.back());
    return written;
}

std::string read_text(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + path.string());
    out << text;
    if (!out) throw Error("write failed for " + path.string());
}

}  // namespace flgames
