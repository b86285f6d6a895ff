#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "doctest.h"
#include "flgames/errors.hpp"
#include "flgames/harness.hpp"
#include "flgames/rng.hpp"
#include "json.hpp"

using namespace flgames;

namespace {

std::filesystem::path scratch(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("flgames_test_" + name);
    std::filesystem::remove_all(p);
    return p;
}

const char* kTiny = R"(
# small synthetic run
name = tiny
variant = F-FLG-par-smooth
data.kind = synthetic-sem
data.samples_per_client = 200
data.test_samples = 200
data.sem.centered = true
model.hidden = 4
game.batch_size = 32
game.lr_predictor = 1e-2
game.max_rounds = 30
game.skip_phi_rounds = true
game.stop_threshold = 0.7
game.eval_cap = 100000
metrics.window = 10
repeat = 2
seed = 3
)";

}  // namespace

TEST_CASE("config defaults and keys") {
    const auto c = parse_config("data.kind = synthetic-sem\ngame.stop_threshold = 0.7\n");
    CHECK(c.game.batch_size == 256);
    CHECK(c.game.buffer_capacity == 5);
    CHECK(c.repeat == 1);
    CHECK(c.variant() == "F-FLG-seq");

    const auto five = parse_config("data.kind = synthetic-sem\ngame.stop = false\nrepeat = 5\nseed = 42\n");
    const auto seeds = five.seeds();
    REQUIRE(seeds.size() == 5);
    CHECK(seeds == five.seeds());
    CHECK(seeds[0] == splitmix64(42));
    CHECK(seeds[4] == splitmix64(46));

    const auto tiny = parse_config(kTiny);
    CHECK(tiny.game.smooth);
    CHECK(tiny.game.schedule == Schedule::Parallel);
    CHECK(tiny.game.model.predictor_hidden == std::vector<std::size_t>{4});
    CHECK(tiny.baseline.hidden == std::vector<std::size_t>{4});
    CHECK(tiny.data.sem.centered);
}

TEST_CASE("config errors name the key") {
    auto message = [](const std::string& text) {
        try {
            parse_config(text);
        } catch (const ConfigError& e) {
            return std::string(e.what());
        }
        return std::string();
    };
    CHECK(message("data.kind = synthetic-sem\ngame.stop = false\nbuffersize = 5\n").find("'buffersize'") !=
          std::string::npos);
    CHECK(message("game.stop = false\n").find("'data.kind'") != std::string::npos);
    CHECK(message("data.kind = synthetic-sem\n").find("'game.stop_threshold'") != std::string::npos);
    CHECK(message("data.kind = synthetic-sem\ngame.stop = false\nrepeat = many\n").find("'repeat'") !=
          std::string::npos);
    CHECK(message("data.kind = synthetic-sem\ngame.stop = false\nrepeat = 0\n").find("repeat") != std::string::npos);
    CHECK(message("data.kind = synthetic-sem\ngame.stop = false\nrepeat = 1\nrepeat = 2\n").find("twice") !=
          std::string::npos);
    CHECK(message("data.kind = mnist-ish\ngame.stop = false\n").find("mnist-ish") != std::string::npos);
    CHECK(message("data.kind = synthetic-sem\ngame.stop = false\nn_clients = 3\n").find("extended") !=
          std::string::npos);
    CHECK(message("data.kind = colored-mnist\ngame.stop = false\ndata.root = /nonexistent/flgames\n")
              .find("does not exist") != std::string::npos);
    CHECK(message("data.kind = synthetic-sem\ngame.stop = false\nvariant = F-FLG-diag\n").find("F-FLG-diag") !=
          std::string::npos);
    CHECK_THROWS_AS(load_config("/nonexistent/flgames.conf"), ConfigError);
}

TEST_CASE("variant tags") {
    ExperimentConfig c;
    apply_variant(c, "V-FLG-par-smooth-fast");
    CHECK(c.variant() == "V-FLG-par-smooth-fast");
    apply_variant(c, "F-FLG-seq");
    CHECK_FALSE(c.game.smooth);
    CHECK(c.variant() == "F-FLG-seq");
    apply_variant(c, "fedsgd");
    CHECK(c.method == Method::FedSgd);
    CHECK(c.variant() == "fedsgd");
    CHECK_THROWS_AS(apply_variant(c, "FLG"), ConfigError);
}

TEST_CASE("oscillation metrics") {
    std::vector<double> up(50);
    for (std::size_t i = 0; i < up.size(); ++i) up[i] = 0.01 * static_cast<double>(i);
    CHECK(oscillation_metrics(up, 20).frequency == 0.0);
    CHECK(oscillation_metrics(up, 20).interval == 0.0);

    const std::vector<double> alt{0.6, 0.4, 0.6, 0.4};
    const auto a = oscillation_metrics(alt, 3);
    CHECK(a.frequency == doctest::Approx(1.0));
    CHECK(a.interval == doctest::Approx(1.0));

    // Square wave of period 50: a direction change every 25 rounds.
    std::vector<double> wave;
    for (int i = 0; i < 1000; ++i) {
        const int phase = i % 50;
        wave.push_back(phase < 25 ? phase : 50 - phase);
    }
    CHECK(oscillation_metrics(wave, 400).interval == doctest::Approx(25.0));

    // Scale free.
    std::vector<double> noisy;
    Rng rng(4);
    for (int i = 0; i < 300; ++i) noisy.push_back(rng.uniform());
    std::vector<double> scaled;
    for (double v : noisy) scaled.push_back(3.0 * v - 7.0);
    const auto m1 = oscillation_metrics(noisy, 200);
    const auto m2 = oscillation_metrics(scaled, 200);
    CHECK(m1.frequency == m2.frequency);
    CHECK(m1.interval == m2.interval);

    // Flat stretches carry no direction.
    CHECK(oscillation_metrics({0.5, 0.6, 0.6, 0.6, 0.5}, 4).frequency == doctest::Approx(1.0 / 3.0));

    CHECK_THROWS_AS(oscillation_metrics(alt, 4), ConfigError);
    CHECK_THROWS_AS(oscillation_metrics(alt, 1), ConfigError);
}

TEST_CASE("mean and sample std") {
    const auto m = mean_std({2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0});
    CHECK(m.mean == doctest::Approx(5.0));
    CHECK(m.std == doctest::Approx(std::sqrt(32.0 / 7.0)));
    CHECK(mean_std({3.0}).std == 0.0);
}

TEST_CASE("rounds CSV round trip") {
    std::vector<RoundLog> logs(3);
    for (std::size_t i = 0; i < logs.size(); ++i) {
        logs[i].round = i + 1;
        logs[i].predictor_round = i + 1;
        logs[i].communication_rounds = 2 * (i + 1);
        logs[i].acting = {0, 1};
        logs[i].train_acc = 0.1 + 1.0 / 3.0 * static_cast<double>(i);
        logs[i].test_acc = 1e-17 * static_cast<double>(i);
        logs[i].client_loss = {0.69314718055994529, std::nullopt};
        logs[i].wall_ms = 12.5;
    }
    logs[1].phi_round = true;
    logs[1].acting.clear();
    const auto text = rounds_csv(logs, 2);
    CHECK(text.rfind("# flgames rounds v1\nround,predictor_round,communication_rounds,acting,train_acc,test_acc,"
                     "phi_round,loss_0,loss_1\n",
                     0) == 0);
    CHECK(text.find("wall") == std::string::npos);
    const auto back = parse_rounds_csv(text);
    REQUIRE(back.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(back[i].round == logs[i].round);
        CHECK(back[i].communication_rounds == logs[i].communication_rounds);
        CHECK(back[i].acting == logs[i].acting);
        CHECK(back[i].train_acc == logs[i].train_acc);
        CHECK(back[i].test_acc == logs[i].test_acc);
        CHECK(back[i].phi_round == logs[i].phi_round);
        CHECK(back[i].client_loss == logs[i].client_loss);
    }
    CHECK(rounds_csv(back, 2) == text);
    CHECK_THROWS_AS(parse_rounds_csv("round,acting\n"), FormatError);
    CHECK_THROWS_AS(parse_rounds_csv("# flgames rounds v9\nround\n"), FormatError);
}

TEST_CASE("experiment artifacts are deterministic and self-consistent") {
    auto config = parse_config(kTiny);
    const auto first = scratch("a");
    config.output_dir = first;
    const auto summary = run_experiment(config);
    const auto again_dir = scratch("b");
    config.output_dir = again_dir;
    run_experiment(config);

    CHECK(read_text(first / "summary.json") == read_text(again_dir / "summary.json"));
    for (auto seed : config.seeds()) {
        const auto name = "rounds_" + std::to_string(seed) + ".csv";
        CHECK(read_text(first / name) == read_text(again_dir / name));
    }

    // Recompute the summary from the per-round CSVs. The evaluation cap
    // covers every row, so the last logged accuracy is the final accuracy.
    const auto json = nlohmann::json::parse(read_text(first / "summary.json"));
    std::vector<double> train, test, rounds, freq;
    for (auto seed : config.seeds()) {
        const auto logs = parse_rounds_csv(read_text(first / ("rounds_" + std::to_string(seed) + ".csv")));
        REQUIRE_FALSE(logs.empty());
        train.push_back(logs.back().train_acc);
        test.push_back(logs.back().test_acc);
        rounds.push_back(static_cast<double>(logs.back().communication_rounds));
        const auto series = predictor_round_series(logs);
        freq.push_back(oscillation_metrics(series, std::min<std::size_t>(10, series.size() - 1)).frequency);
    }
    CHECK(json["train_acc"]["mean"].get<double>() == mean_std(train).mean);
    CHECK(json["train_acc"]["std"].get<double>() == mean_std(train).std);
    CHECK(json["test_acc"]["mean"].get<double>() == mean_std(test).mean);
    CHECK(json["rounds_to_stop"]["mean"].get<double>() == mean_std(rounds).mean);
    CHECK(json["oscillation_frequency"]["mean"].get<double>() == mean_std(freq).mean);
    CHECK(json["runs"].size() == 2);
    CHECK(summary.runs.size() == 2);
    CHECK(summary.test_acc.std >= 0.0);

    const auto plot = read_text(first / "plot.csv");
    CHECK(plot.rfind(plot_csv_header(), 0) == 0);
    CHECK(plot.find(",train_acc,") != std::string::npos);

    std::filesystem::remove_all(first);
    std::filesystem::remove_all(again_dir);
}

TEST_CASE("baselines through the harness") {
    auto config = parse_config(std::string(kTiny) + "baseline.rounds = 3\n");
    apply_variant(config, "fedavg");
    config.repeat = 1;
    config.output_dir = scratch("fedavg");
    const auto s = run_experiment(config);
    CHECK(s.variant == "fedavg");
    CHECK(s.runs[0].rounds_to_stop == 3);
    std::filesystem::remove_all(config.output_dir);
}

TEST_CASE("sweep writes one cell per variant and client count") {
    auto config = parse_config(std::string(kTiny) + "sweep.n_clients = 2, 3\nsweep.variants = F-FLG-seq, F-FLG-par\n");
    config.repeat = 1;
    config.output_dir = scratch("sweep");
    const auto cells = run_sweep(config);
    REQUIRE(cells.size() == 4);
    CHECK(cells[1].n_clients == 3);
    CHECK(cells[2].variant == "F-FLG-par");
    CHECK(std::filesystem::exists(config.output_dir / "F-FLG-seq" / "n3" / "summary.json"));
    const auto table = read_text(config.output_dir / "sweep.csv");
    CHECK(std::count(table.begin(), table.end(), '\n') == 5);
    std::filesystem::remove_all(config.output_dir);
}

TEST_CASE("gen-data writes a cache that loads back") {
    auto config = parse_config(kTiny);
    config.output_dir = scratch("cache");
    const auto files = generate_data(config);
    CHECK(files.size() == 3);
    auto cached = parse_config(std::string(kTiny) + "");
    cached.data.kind = DatasetKind::Cache;
    cached.data.root = config.output_dir;
    const auto direct = build_data(config, derive_seed(config.seeds().front(), 7));
    const auto loaded = build_data(cached, 0);
    CHECK(loaded.train.size() == 2);
    CHECK(loaded.train[1].inputs == direct.train[1].inputs);
    CHECK(loaded.test.labels == direct.test.labels);
    std::filesystem::remove_all(config.output_dir);
}

TEST_CASE("synthetic data layout") {
    auto config = parse_config(kTiny);
    const auto data = build_data(config, 1);
    REQUIRE(data.train.size() == 2);
    CHECK(data.train[0].provenance.p_spurious == 0.2);
    CHECK(data.train[1].provenance.p_spurious == 0.1);
    CHECK(data.test.provenance.p_spurious == 0.9);
    CHECK(data.train[0].size() == 200);
    CHECK(data.test.size() == 200);

    auto extended = parse_config(std::string(kTiny) + "data.benchmark = extended\nn_clients = 3\n");
    const auto three = build_data(extended, 1);
    REQUIRE(three.train.size() == 3);
    CHECK(three.train[0].provenance.p_spurious == doctest::Approx(0.3));
    CHECK(three.train[2].provenance.p_spurious == doctest::Approx(0.1));
}
