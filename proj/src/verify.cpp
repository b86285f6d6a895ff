#include "flgames/verify.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <sstream>

#include "flgames/datagen.hpp"
#include "flgames/errors.hpp"
#include "flgames/game.hpp"
#include "flgames/orchestrator.hpp"
#include "flgames/rng.hpp"

namespace flgames {

namespace {

std::string fmt(double v) {
    std::ostringstream os;
    os.precision(3);
    os << v;
    return os.str();
}

Matrix random_matrix(std::size_t rows, std::size_t cols, Rng& rng, double lo, double hi) {
    Matrix m(rows, cols);
    for (double& v : m.values()) v = rng.uniform(lo, hi);
    return m;
}

std::vector<int> random_labels(std::size_t n, int classes, Rng& rng) {
    std::vector<int> out(n);
    for (auto& y : out) y = static_cast<int>(rng.below(static_cast<std::uint64_t>(classes)));
    return out;
}

// Gives the biases non-zero values so their gradients are exercised too.
MlpParams perturbed(MlpParams p, Rng& rng) {
    p.for_each_value([&](double& v) { v += rng.uniform(-0.3, 0.3); });
    return p;
}

double rel_error(double a, double b) {
    const double scale = std::max({std::abs(a), std::abs(b), 1e-6});
    return std::abs(a - b) / scale;
}

// Max relative error of `analytic` against central differences of loss()
// taken over every scalar of `params`.
double fd_compare(MlpParams& params, const MlpParams& analytic, const std::function<double()>& loss) {
    constexpr double h = 1e-6;
    std::vector<double> numeric;
    params.for_each_value([&](double& v) {
        const double saved = v;
        v = saved + h;
        const double up = loss();
        v = saved - h;
        const double down = loss();
        v = saved;
        numeric.push_back((up - down) / (2.0 * h));
    });
    std::size_t i = 0;
    double worst = 0.0;
    analytic.for_each_value([&](double g) { worst = std::max(worst, rel_error(g, numeric[i++])); });
    return worst;
}

SpuriousDataset as_dataset(const Matrix& inputs, const std::vector<int>& labels, int classes) {
    SpuriousDataset d;
    d.inputs = inputs;
    d.labels = labels;
    d.preliminary = labels;
    d.spurious = labels;
    d.num_classes = classes;
    return d;
}

// Small three-client federation on the synthetic SEM.
Federation tiny_federation(std::size_t n_clients, std::uint64_t seed) {
    ClientSpecOptions opts;
    opts.train_pool = 96 * n_clients;
    opts.test_samples = 64;
    const auto specs = make_client_specs(n_clients, opts);
    SemOptions sem;
    sem.causal_dims = 3;
    sem.spurious_dims = 2;
    std::vector<SpuriousDataset> train;
    for (const auto& s : specs.train) {
        train.push_back(synth_sem_generate(s, sem, derive_seed(seed, 10 + static_cast<std::uint64_t>(s.client_id))));
    }
    return make_federation(std::move(train), synth_sem_generate(specs.test, sem, derive_seed(seed, 9)), 128);
}

GameConfig tiny_config() {
    GameConfig c;
    c.batch_size = 16;
    c.model.predictor_hidden = {4};
    c.model.phi_width = 4;
    c.lr_predictor = 1e-2;
    c.lr_phi = 1e-2;
    c.stop_enabled = false;
    c.max_rounds = 50;
    return c;
}

std::vector<MlpParams> predictors_of(const ServerState& s) {
    std::vector<MlpParams> out;
    for (const auto& c : s.clients) out.push_back(c.predictor);
    return out;
}

CheckResult make_result(std::string name, bool passed, std::string detail, double value = 0.0) {
    return CheckResult{std::move(name), passed, std::move(detail), value};
}

double binomial_z(std::size_t hits, std::size_t n, double p) {
    const double rate = static_cast<double>(hits) / static_cast<double>(n);
    const double sd = std::sqrt(p * (1.0 - p) / static_cast<double>(n));
    return sd == 0.0 ? (rate == p ? 0.0 : INFINITY) : std::abs(rate - p) / sd;
}

std::vector<CheckResult> rate_checks(const std::string& name, const SpuriousDataset& d, double sigmas) {
    std::size_t noisy = 0;
    std::size_t flipped = 0;
    for (std::size_t i = 0; i < d.size(); ++i) {
        noisy += d.labels[i] != d.preliminary[i];
        flipped += d.spurious[i] != d.labels[i];
    }
    const double zd = binomial_z(noisy, d.size(), d.provenance.delta);
    const double zp = binomial_z(flipped, d.size(), d.provenance.p_spurious);
    return {
        make_result(name + " P(y!=y~)", zd <= sigmas,
                    "rate " + fmt(static_cast<double>(noisy) / d.size()) + " vs " + fmt(d.provenance.delta) +
                        ", z=" + fmt(zd),
                    zd),
        make_result(name + " P(z!=y)", zp <= sigmas,
                    "rate " + fmt(static_cast<double>(flipped) / d.size()) + " vs " +
                        fmt(d.provenance.p_spurious) + ", z=" + fmt(zp),
                    zp),
    };
}

// n raw images of the given shape with uniformly drawn raw classes 0..9.
RawImageSet random_images(std::size_t n, std::size_t channels, std::size_t side, Rng& rng) {
    RawImageSet raw;
    raw.count = n;
    raw.channels = channels;
    raw.height = side;
    raw.width = side;
    raw.pixels.resize(n * raw.image_size());
    for (auto& p : raw.pixels) p = static_cast<std::uint8_t>(rng.below(256));
    raw.labels.resize(n);
    for (auto& l : raw.labels) l = static_cast<std::uint8_t>(rng.below(10));
    return raw;
}

std::vector<std::size_t> all_rows(std::size_t n) {
    std::vector<std::size_t> rows(n);
    for (std::size_t i = 0; i < n; ++i) rows[i] = i;
    return rows;
}

}  // namespace

CheckResult check_gradients(std::uint64_t seed, double tolerance) {
    Rng rng(derive_seed(seed, 1));
    constexpr int classes = 4;
    const Matrix x = random_matrix(12, 8, rng, -1.0, 1.0);
    const auto labels = random_labels(12, classes, rng);
    Batch batch{x, labels};

    const std::vector<std::size_t> phi_dims{8, 6};
    const std::vector<std::size_t> head_dims{6, 5, classes};
    Representation phi(perturbed(init_params(phi_dims, derive_seed(seed, 2), Activation::Elu), rng));
    MlpParams candidate = perturbed(init_params(head_dims, derive_seed(seed, 3)), rng);
    std::vector<MlpParams> opponents;
    std::vector<MlpParams> averages;
    for (int k = 0; k < 2; ++k) {
        opponents.push_back(perturbed(init_params(head_dims, derive_seed(seed, 10 + k)), rng));
        ParamBuffer buffer(3);
        for (int j = 0; j < 4; ++j) buffer.push(perturbed(opponents.back(), rng));
        averages.push_back(buffer_average(buffer));
    }
    EnsembleView view;
    view.candidate = &candidate;
    for (const auto& o : opponents) view.opponents.push_back(&o);
    for (const auto& a : averages) view.opponent_buffer_averages.push_back(&a);
    view.divisor = 3;

    // Candidate head inside the smoothed objective.
    const auto objective = local_objective(view, phi, batch);
    const double head_err = fd_compare(candidate, objective.grad, [&] {
        return softmax_cross_entropy(smoothed_ensemble_logits(view, phi, x), labels).loss;
    });

    // phi through the mean ensemble of three heads (one full batch).
    std::vector<const MlpParams*> heads{&candidate, &opponents[0], &opponents[1]};
    const auto data = as_dataset(x, labels, classes);
    BatchSampler sampler(data.size(), data.size(), derive_seed(seed, 4));
    // The sampler shuffles rows; the mean loss is order independent.
    const auto phi_grad = representation_gradient(data, sampler, phi, heads, 100.0);
    const double phi_err = fd_compare(phi.net(), phi_grad, [&] {
        return softmax_cross_entropy(ensemble_logits(heads, phi, x), labels).loss;
    });

    // Plain [8, 6, 4] network.
    const std::vector<std::size_t> mlp_dims{8, 6, classes};
    MlpParams mlp = perturbed(init_params(mlp_dims, derive_seed(seed, 5)), rng);
    const auto fwd = forward(mlp, x);
    const auto mlp_grad = backward(mlp, fwd.cache, softmax_cross_entropy(fwd.output, labels).dlogits).grad;
    const double mlp_err = fd_compare(mlp, mlp_grad, [&] { return softmax_cross_entropy(predict(mlp, x), labels).loss; });

    const double worst = std::max({head_err, phi_err, mlp_err});
    return make_result("gradient check", worst < tolerance,
                       "max rel err: head " + fmt(head_err) + ", phi " + fmt(phi_err) + ", mlp " + fmt(mlp_err),
                       worst);
}

std::vector<CheckResult> check_generator_statistics(std::uint64_t seed, std::size_t n, double sigmas) {
    std::vector<CheckResult> out;
    auto add = [&](std::vector<CheckResult> rs) {
        for (auto& r : rs) out.push_back(std::move(r));
    };

    const auto standard = standard_benchmark_specs(n / 2, n / 10);
    const bool exact = standard.train.size() == 2 && standard.train[0].p_spurious == 0.2 &&
                       standard.train[1].p_spurious == 0.1 && standard.test.p_spurious == 0.9 &&
                       standard.train[0].delta == 0.25 && standard.train[1].delta == 0.25 &&
                       standard.test.delta == 0.25;
    out.push_back(make_result("standard benchmark layout", exact, "p = (0.2, 0.1), p_test = 0.9, delta = 0.25"));

    EnvSpec spec;
    spec.delta = 0.25;
    spec.n_samples = n;
    for (double p : {0.2, 0.1, 0.9}) {
        spec.p_spurious = p;
        spec.role = p > 0.5 ? EnvRole::Test : EnvRole::Train;
        add(rate_checks("sem p=" + fmt(p), synth_sem_generate(spec, SemOptions{}, derive_seed(seed, 20)), sigmas));
    }

    Rng rng(derive_seed(seed, 21));
    struct Case {
        std::string name;
        LabelRule rule;
        std::size_t channels;
        SpuriousMechanism mechanism;
        double p;
    };
    const std::vector<Case> cases = {
        {"colored-mnist", mnist_binary_rule(), 1, SpuriousMechanism::Color, 0.1},
        {"colored-fashion", fashion_binary_rule(), 1, SpuriousMechanism::Color, 0.2},
        {"spurious-cifar-patch", cifar_binary_rule(), 3, SpuriousMechanism::Patch, 0.9},
        {"multiclass-5", grouped_rule(10, 5), 1, SpuriousMechanism::Palette, 0.15},
        {"multiclass-10", identity_rule(10), 1, SpuriousMechanism::Palette, 0.9},
    };
    for (const auto& c : cases) {
        // Dropped classes shrink the set, so draw a little more than n.
        const auto raw = random_images(n + n / 8, c.channels, kPatchSize, rng);
        auto source = binarize_labels(raw, c.rule);
        const std::size_t take = std::min(n, source.images.count);
        EnvSpec s;
        s.delta = 0.25;
        s.p_spurious = c.p;
        s.n_samples = take;
        s.role = c.p > 0.5 ? EnvRole::Test : EnvRole::Train;
        const auto rows = all_rows(take);
        add(rate_checks(c.name, build_image_environment(source, rows, s, c.mechanism, c.rule.num_classes,
                                                        derive_seed(seed, 22)),
                        sigmas));
    }
    return out;
}

CheckResult check_round_parity(std::uint64_t seed) {
    const auto fed = tiny_federation(3, seed);
    std::string failure;
    for (auto variant : {PhiVariant::Variable, PhiVariant::Fixed}) {
        for (auto schedule : {Schedule::Parallel, Schedule::Sequential}) {
            auto config = tiny_config();
            config.variant_phi = variant;
            config.schedule = schedule;
            config.smooth = true;
            auto state = init_server(fed, config, seed);
            for (int r = 0; r < 8; ++r) {
                const auto phi_before = state.phi;
                const auto heads_before = predictors_of(state);
                const auto log = run_round(state, config, fed);
                const bool even = log.round % 2 == 0;
                const auto heads_after = predictors_of(state);
                std::size_t changed = 0;
                for (std::size_t k = 0; k < heads_after.size(); ++k) changed += !(heads_after[k] == heads_before[k]);
                const bool phi_changed = !(state.phi == phi_before);
                const std::size_t expected_heads = even ? 0 : (schedule == Schedule::Parallel ? 3 : 1);
                const bool expected_phi = even && variant == PhiVariant::Variable;
                if (changed != expected_heads || phi_changed != expected_phi) {
                    failure = "round " + std::to_string(log.round) + ": " + std::to_string(changed) +
                              " heads changed, phi " + (phi_changed ? "changed" : "unchanged");
                }
            }
        }
    }
    return make_result("round parity law", failure.empty(),
                       failure.empty() ? "phi only on even rounds, predictors only on odd" : failure);
}

CheckResult check_fifo_buffer(std::uint64_t seed) {
    Rng rng(derive_seed(seed, 30));
    const std::vector<std::size_t> dims{3, 2};
    std::string failure;
    for (std::size_t capacity : {1, 2, 5}) {
        ParamBuffer buffer(capacity);
        std::vector<MlpParams> pushed;
        for (int i = 0; i < 12; ++i) {
            pushed.push_back(perturbed(init_params(dims, derive_seed(seed, 31 + i)), rng));
            buffer.push(pushed.back());
            const std::size_t keep = std::min<std::size_t>(capacity, pushed.size());
            if (buffer.size() != keep) failure = "size " + std::to_string(buffer.size());
            for (std::size_t j = 0; j < keep; ++j) {
                if (!(buffer.items()[j] == pushed[pushed.size() - keep + j])) failure = "wrong FIFO order";
            }
            // Running sum against a fresh sum of the retained entries.
            MlpParams expected = zeros_like(pushed.back());
            for (std::size_t j = pushed.size() - keep; j < pushed.size(); ++j) expected.add_scaled(pushed[j], 1.0);
            const auto avg = buffer_average(buffer);
            std::size_t idx = 0;
            std::vector<double> e;
            expected.for_each_value([&](double v) { e.push_back(v / static_cast<double>(keep)); });
            avg.for_each_value([&](double v) {
                if (std::abs(v - e[idx++]) > 1e-12) failure = "average drifted from the retained entries";
            });
        }
    }
    return make_result("FIFO buffer law", failure.empty(), failure.empty() ? "capacities 1, 2, 5 over 12 pushes" : failure);
}

CheckResult check_snapshot_law(std::uint64_t seed) {
    const auto fed = tiny_federation(3, seed);
    auto config = tiny_config();
    config.schedule = Schedule::Parallel;
    config.smooth = true;
    config.skip_phi_rounds = true;
    auto state = init_server(fed, config, seed);
    PredictorSettings settings;
    settings.learning_rate = config.lr_predictor;
    settings.smooth = true;
    std::string failure;
    for (int r = 0; r < 5; ++r) {
        // Reference: each client plays against deep copies of everyone's
        // pre-round predictor and buffer average.
        std::vector<OpponentCopy> snapshot;
        for (const auto& c : state.clients) {
            OpponentCopy copy;
            copy.predictor = std::make_shared<const MlpParams>(c.predictor);
            if (!c.buffer.empty()) copy.buffer_average = std::make_shared<const MlpParams>(buffer_average(c.buffer));
            snapshot.push_back(copy);
        }
        std::vector<MlpParams> reference;
        for (const auto& c : state.clients) {
            ClientState copy = c;
            copy.opponents.clear();
            for (std::size_t i = 0; i < snapshot.size(); ++i) {
                if (static_cast<int>(i) != c.client_id) copy.opponents.emplace(static_cast<int>(i), snapshot[i]);
            }
            predictor_update(copy, state.phi, settings, state.clients.size());
            reference.push_back(copy.predictor);
        }
        run_round(state, config, fed);
        for (std::size_t k = 0; k < reference.size(); ++k) {
            if (!(state.clients[k].predictor == reference[k])) {
                failure = "client " + std::to_string(k) + " differs in round " + std::to_string(r + 1);
            }
        }
    }
    return make_result("snapshot law", failure.empty(),
                       failure.empty() ? "parallel rounds match a deep-copy reference bit for bit" : failure);
}

CheckResult check_single_client_schedules(std::uint64_t seed) {
    const auto fed = tiny_federation(1, seed);
    auto config = tiny_config();
    config.max_rounds = 30;
    config.smooth = true;
    std::string failure;
    for (auto variant : {PhiVariant::Fixed, PhiVariant::Variable}) {
        config.variant_phi = variant;
        config.schedule = Schedule::Sequential;
        const auto seq = run_training(fed, config, seed);
        config.schedule = Schedule::Parallel;
        const auto par = run_training(fed, config, seed);
        bool same = seq.logs.size() == par.logs.size() && seq.state.phi == par.state.phi &&
                    seq.state.clients[0].predictor == par.state.clients[0].predictor;
        for (std::size_t i = 0; same && i < seq.logs.size(); ++i) {
            const auto& a = seq.logs[i];
            const auto& b = par.logs[i];
            same = a.round == b.round && a.acting == b.acting && a.train_acc == b.train_acc &&
                   a.test_acc == b.test_acc && a.client_loss == b.client_loss && a.phi_round == b.phi_round;
        }
        if (!same) failure = variant == PhiVariant::Fixed ? "fixed phi runs differ" : "variable phi runs differ";
    }
    return make_result("n=1 sequential == parallel", failure.empty(),
                       failure.empty() ? "bit-identical logs and parameters" : failure);
}

CheckResult check_fedsgd_equivalence(std::uint64_t seed, double tolerance) {
    Rng rng(derive_seed(seed, 40));
    const std::vector<std::size_t> dims{6, 5, 3};
    const MlpParams start = perturbed(init_params(dims, derive_seed(seed, 41)), rng);
    std::vector<Batch> batches;
    for (int k = 0; k < 2; ++k) batches.push_back({random_matrix(8, 6, rng, -1.0, 1.0), random_labels(8, 3, rng)});
    constexpr double lr = 0.05;

    MlpParams federated = start;
    fedsgd_step(federated, batches, {1000, 1000}, lr);

    Batch joined;
    std::vector<double> values = batches[0].inputs.values();
    values.insert(values.end(), batches[1].inputs.values().begin(), batches[1].inputs.values().end());
    joined.inputs = Matrix(16, 6, std::move(values));
    joined.labels = batches[0].labels;
    joined.labels.insert(joined.labels.end(), batches[1].labels.begin(), batches[1].labels.end());
    MlpParams central = start;
    const auto fwd = forward(central, joined.inputs);
    sgd_step(central, backward(central, fwd.cache, softmax_cross_entropy(fwd.output, joined.labels).dlogits).grad, lr);

    std::vector<double> a;
    federated.for_each_value([&](double v) { a.push_back(v); });
    std::size_t i = 0;
    double worst = 0.0;
    central.for_each_value([&](double v) { worst = std::max(worst, std::abs(v - a[i++])); });
    return make_result("FedSGD == centralized step", worst <= tolerance, "max abs diff " + fmt(worst), worst);
}

CheckResult check_stop_warm_start() {
    GameConfig fixed;
    GameConfig variable;
    variable.variant_phi = PhiVariant::Variable;
    bool ok = warm_start_length(fixed, 2, 60000) == 2 && warm_start_length(variable, 2, 60000) == 234;
    const std::vector<double> low(5, 0.1);
    for (std::size_t len = 1; len <= 5; ++len) {
        const std::vector<double> h(low.begin(), low.begin() + static_cast<std::ptrdiff_t>(len));
        const auto d = stopping_check(h, 0.5, 5);
        ok = ok && d == StopDecision::Continue;
    }
    std::vector<double> after(low);
    after.push_back(0.1);
    ok = ok && stopping_check(after, 0.5, 5) == StopDecision::Stop;
    return make_result("stop never fires in warm start", ok, "warm start 2 (fixed, N=2) and 234 (variable, 60000/256)");
}

std::vector<CheckResult> run_property_suite(std::uint64_t seed) {
    std::vector<CheckResult> out;
    out.push_back(check_gradients(seed));
    for (auto& r : check_generator_statistics(seed)) out.push_back(std::move(r));
    out.push_back(check_round_parity(seed));
    out.push_back(check_fifo_buffer(seed));
    out.push_back(check_snapshot_law(seed));
    out.push_back(check_single_client_schedules(seed));
    out.push_back(check_fedsgd_equivalence(seed));
    out.push_back(check_stop_warm_start());
    return out;
}

}  // namespace flgames
