#include "flgames/orchestrator.hpp"

#include <algorithm>
#include <chrono>
#include <functional>
#include <numeric>
#include <string>
#include <thread>

#include "flgames/errors.hpp"
#include "flgames/rng.hpp"

namespace flgames {

namespace {

constexpr std::uint64_t kPhiInitStream = 99;
constexpr std::uint64_t kPredictorInitStream = 100;
constexpr std::uint64_t kSamplerStream = 1000;
constexpr std::uint64_t kPhiSamplerStream = 2000;
constexpr std::uint64_t kBaselineStream = 3000;

// Runs body(i) for i in [0, count). Work is split over at most `threads`
// workers; callers only touch per-index state inside body.
void parallel_for(std::size_t count, std::size_t threads, const std::function<void(std::size_t)>& body) {
    if (threads <= 1 || count <= 1) {
        for (std::size_t i = 0; i < count; ++i) body(i);
        return;
    }
    const std::size_t workers = std::min(threads, count);
    std::vector<std::exception_ptr> errors(workers);
    {
        std::vector<std::jthread> pool;
        pool.reserve(workers);
        for (std::size_t w = 0; w < workers; ++w) {
            pool.emplace_back([&, w] {
                try {
                    for (std::size_t i = w; i < count; i += workers) body(i);
                } catch (...) {
                    errors[w] = std::current_exception();
                }
            });
        }
    }
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
}

std::vector<std::size_t> predictor_dims(std::size_t feature_dim, const ModelConfig& model, int num_classes) {
    std::vector<std::size_t> dims{feature_dim};
    dims.insert(dims.end(), model.predictor_hidden.begin(), model.predictor_hidden.end());
    dims.push_back(static_cast<std::size_t>(num_classes));
    return dims;
}

double scoped_accuracy(const Matrix& logits, const std::vector<int>& labels) {
    return labels.empty() ? 0.0 : accuracy(logits, labels);
}

EvalSet take_rows(const SpuriousDataset& data, std::size_t count) {
    EvalSet set;
    const auto s = data.slice(0, count);
    set.inputs = s.inputs;
    set.labels = s.labels;
    return set;
}

}  // namespace

void GameConfig::validate() const {
    if (buffer_capacity < 1) throw ConfigError("buffer_capacity must be at least 1");
    if (!(c_percent > 0.0 && c_percent <= 100.0)) throw ConfigError("c_percent must lie in (0, 100]");
    if (predictor_c_percent < 0.0 || predictor_c_percent > 100.0) {
        throw ConfigError("predictor_c_percent must lie in [0, 100]");
    }
    if (!(stop_threshold > 0.0 && stop_threshold < 1.0)) throw ConfigError("stop_threshold must lie in (0, 1)");
    if (local_steps < 1) throw ConfigError("local_steps must be at least 1");
    if (batch_size < 1) throw ConfigError("batch_size must be positive");
    if (max_rounds < 1) throw ConfigError("max_rounds must be positive");
    if (fast_phi && variant_phi == PhiVariant::Fixed) throw ConfigError("fast_phi requires a variable representation");
    if (!(lr_predictor > 0.0) || !(lr_phi > 0.0)) throw ConfigError("learning rates must be positive");
    if (model.phi_width == 0) throw ConfigError("phi_width must be positive");
    for (auto h : model.predictor_hidden) {
        if (h == 0) throw ConfigError("hidden widths must be positive");
    }
}

std::string GameConfig::variant_name() const {
    std::string name = variant_phi == PhiVariant::Fixed ? "F-FLG" : "V-FLG";
    name += schedule == Schedule::Parallel ? "-par" : "-seq";
    if (smooth) name += "-smooth";
    if (fast_phi) name += "-fast";
    return name;
}

std::size_t Federation::total_train() const {
    std::size_t n = 0;
    for (const auto& d : train) n += d->size();
    return n;
}

Federation make_federation(std::vector<SpuriousDataset> train, SpuriousDataset test, std::size_t eval_cap) {
    if (train.empty()) throw ConfigError("federation needs at least one training client");
    if (eval_cap == 0) throw ConfigError("eval_cap must be positive");
    Federation fed;
    std::size_t total = 0;
    for (const auto& d : train) total += d.size();
    for (const auto& d : train) {
        d.validate();
        std::size_t take = d.size();
        if (total > eval_cap) {
            take = static_cast<std::size_t>((static_cast<unsigned __int128>(eval_cap) * d.size()) / total);
        }
        if (take > 0) {
            auto part = take_rows(d, take);
            if (fed.train_eval.labels.empty()) {
                fed.train_eval = std::move(part);
            } else {
                auto& dst = fed.train_eval;
                std::vector<double> values = dst.inputs.values();
                values.insert(values.end(), part.inputs.values().begin(), part.inputs.values().end());
                dst.inputs = Matrix(dst.inputs.rows() + part.inputs.rows(), dst.inputs.cols(), std::move(values));
                dst.labels.insert(dst.labels.end(), part.labels.begin(), part.labels.end());
            }
        }
    }
    test.validate();
    fed.test_eval = take_rows(test, std::min(eval_cap, test.size()));
    for (auto& d : train) fed.train.push_back(std::make_shared<const SpuriousDataset>(std::move(d)));
    fed.test = std::make_shared<const SpuriousDataset>(std::move(test));
    return fed;
}

std::vector<int> playing_sequence(Schedule schedule, std::size_t t, std::size_t n_clients) {
    if (t < 1) throw ConfigError("playing_sequence: rounds start at 1");
    if (n_clients < 1) throw ConfigError("playing_sequence: no clients");
    if (schedule == Schedule::Sequential) return {static_cast<int>((t - 1) % n_clients)};
    std::vector<int> all(n_clients);
    std::iota(all.begin(), all.end(), 0);
    return all;
}

bool is_phi_round(const GameConfig& config, std::size_t round) {
    if (config.skip_phi_rounds && config.variant_phi == PhiVariant::Fixed) return false;
    return round % 2 == 0;
}

MlpParams representation_gradient(const SpuriousDataset& data, BatchSampler& sampler,
                                  const Representation& phi,
                                  const std::vector<const MlpParams*>& predictors, double c_percent) {
    if (phi.is_identity()) throw VariantError("representation_gradient called with a fixed (identity) phi");
    if (predictors.empty()) throw ConfigError("representation_gradient: no predictors");
    const auto steps = exact_best_response_steps(c_percent, sampler.batches_per_epoch());
    const double inv_n = 1.0 / static_cast<double>(predictors.size());
    MlpParams total = zeros_like(phi.net());
    for (std::size_t s = 0; s < steps; ++s) {
        const Batch batch = gather_batch(data, sampler.next());
        auto phi_fwd = forward(phi.net(), batch.inputs);
        std::vector<ForwardResult> heads;
        heads.reserve(predictors.size());
        Matrix logits;
        for (const auto* p : predictors) {
            heads.push_back(forward(*p, phi_fwd.output));
            const auto& out = heads.back().output;
            if (logits.size() == 0) {
                logits = out;
            } else {
                for (std::size_t i = 0; i < logits.size(); ++i) logits.values()[i] += out.values()[i];
            }
        }
        for (double& v : logits.values()) v *= inv_n;
        auto loss = softmax_cross_entropy(logits, batch.labels);
        for (double& v : loss.dlogits.values()) v *= inv_n;
        Matrix dfeatures(phi_fwd.output.rows(), phi_fwd.output.cols());
        for (std::size_t k = 0; k < predictors.size(); ++k) {
            auto back = backward(*predictors[k], heads[k].cache, loss.dlogits);
            for (std::size_t i = 0; i < dfeatures.size(); ++i) dfeatures.values()[i] += back.input_grad.values()[i];
        }
        total.add_scaled(backward(phi.net(), phi_fwd.cache, dfeatures).grad, 1.0);
    }
    return total;
}

MlpParams aggregate_phi(const MlpParams& phi, const std::vector<MlpParams>& gradients,
                        const std::vector<std::size_t>& sample_counts, double eta) {
    if (gradients.size() != sample_counts.size()) {
        throw ConfigError("aggregate_phi: missing gradient for a client (" + std::to_string(gradients.size()) +
                          " gradients, " + std::to_string(sample_counts.size()) + " clients)");
    }
    if (gradients.empty()) throw ConfigError("aggregate_phi: no clients");
    std::size_t total = 0;
    for (auto c : sample_counts) {
        if (c == 0) throw ConfigError("aggregate_phi: sample counts must be positive");
        total += c;
    }
    // sum_k N_k g_k, then one division by N: the weights N_k / N sum to one
    // exactly as rationals.
    MlpParams weighted = zeros_like(phi);
    for (std::size_t k = 0; k < gradients.size(); ++k) {
        require_same_shape(phi, gradients[k], "aggregate_phi");
        weighted.add_scaled(gradients[k], static_cast<double>(sample_counts[k]));
    }
    weighted.scale(1.0 / static_cast<double>(total));
    MlpParams next = phi;
    next.add_scaled(weighted, -eta);
    return next;
}

ServerState init_server(const Federation& federation, const GameConfig& config, std::uint64_t seed) {
    config.validate();
    if (federation.train.empty()) throw ConfigError("no training clients");
    ServerState state;
    state.seed = seed;
    const std::size_t input_dim = federation.train.front()->dim();
    const int classes = federation.train.front()->num_classes;
    std::size_t feature_dim = input_dim;
    if (config.variant_phi == PhiVariant::Variable) {
        const std::vector<std::size_t> dims{input_dim, config.model.phi_width};
        state.phi = Representation(init_params(dims, derive_seed(seed, kPhiInitStream), Activation::Elu));
        feature_dim = config.model.phi_width;
    }
    const auto dims = predictor_dims(feature_dim, config.model, classes);
    AdamHyper hyper;
    hyper.learning_rate = config.lr_predictor;
    for (std::size_t k = 0; k < federation.n_clients(); ++k) {
        const auto& data = federation.train[k];
        if (data->dim() != input_dim || data->num_classes != classes) {
            throw ShapeError("client datasets disagree on input dim or class count");
        }
        auto predictor = init_params(dims, derive_seed(seed, kPredictorInitStream + k));
        state.clients.push_back(make_client(static_cast<int>(k), std::move(predictor), data,
                                            config.buffer_capacity, config.batch_size, hyper,
                                            derive_seed(seed, kSamplerStream + k)));
    }
    communicate(state, config.smooth);
    return state;
}

void communicate(ServerState& state, bool smooth) {
    std::vector<OpponentCopy> published;
    published.reserve(state.clients.size());
    for (const auto& c : state.clients) {
        OpponentCopy copy;
        copy.predictor = std::make_shared<const MlpParams>(c.predictor);
        if (smooth && !c.buffer.empty()) copy.buffer_average = std::make_shared<const MlpParams>(buffer_average(c.buffer));
        published.push_back(std::move(copy));
    }
    for (auto& c : state.clients) {
        c.opponents.clear();
        for (std::size_t i = 0; i < published.size(); ++i) {
            if (static_cast<int>(i) == c.client_id) continue;
            c.opponents.emplace(static_cast<int>(i), published[i]);
        }
    }
}

EnsembleScores evaluate_ensemble(const ServerState& state, const Federation& federation) {
    std::vector<const MlpParams*> predictors;
    for (const auto& c : state.clients) predictors.push_back(&c.predictor);
    EnsembleScores scores;
    if (!federation.train_eval.labels.empty()) {
        scores.train_acc = scoped_accuracy(ensemble_logits(predictors, state.phi, federation.train_eval.inputs),
                                           federation.train_eval.labels);
    }
    if (!federation.test_eval.labels.empty()) {
        scores.test_acc = scoped_accuracy(ensemble_logits(predictors, state.phi, federation.test_eval.inputs),
                                          federation.test_eval.labels);
    }
    return scores;
}

namespace {

Matrix mean_of(const std::vector<Matrix>& logits) {
    Matrix total = logits.front();
    for (std::size_t k = 1; k < logits.size(); ++k) {
        auto& t = total.values();
        const auto& l = logits[k].values();
        for (std::size_t i = 0; i < t.size(); ++i) t[i] += l[i];
    }
    const double inv = 1.0 / static_cast<double>(logits.size());
    for (double& v : total.values()) v *= inv;
    return total;
}

}  // namespace

EnsembleScores evaluate_cached(ServerState& state, const Federation& federation) {
    auto& cache = state.eval_cache;
    const std::size_t n = state.clients.size();
    if (cache.train_logits.size() != n || cache.stale.size() != n) {
        cache.train_logits.assign(n, Matrix());
        cache.test_logits.assign(n, Matrix());
        cache.stale.assign(n, true);
    }
    const bool has_train = !federation.train_eval.labels.empty();
    const bool has_test = !federation.test_eval.labels.empty();
    Matrix train_features;
    Matrix test_features;
    bool features_ready = false;
    for (std::size_t k = 0; k < n; ++k) {
        if (!cache.stale[k]) continue;
        if (!features_ready) {
            if (has_train) train_features = state.phi.apply(federation.train_eval.inputs);
            if (has_test) test_features = state.phi.apply(federation.test_eval.inputs);
            features_ready = true;
        }
        if (has_train) cache.train_logits[k] = predict(state.clients[k].predictor, train_features);
        if (has_test) cache.test_logits[k] = predict(state.clients[k].predictor, test_features);
        cache.stale[k] = false;
    }
    EnsembleScores scores;
    if (has_train) scores.train_acc = accuracy(mean_of(cache.train_logits), federation.train_eval.labels);
    if (has_test) scores.test_acc = accuracy(mean_of(cache.test_logits), federation.test_eval.labels);
    return scores;
}

RoundLog run_round(ServerState& state, const GameConfig& config, const Federation& federation) {
    const auto started = std::chrono::steady_clock::now();
    const std::size_t n = state.clients.size();
    const std::size_t t = state.round + 1;
    if (t > config.max_rounds) throw ConfigError("run_round: max_rounds exceeded");

    RoundLog log;
    log.round = t;
    log.client_loss.assign(n, std::nullopt);
    bool changed = false;

    if (is_phi_round(config, t)) {
        log.phi_round = true;
        if (config.variant_phi == PhiVariant::Variable) {
            std::vector<const MlpParams*> predictors;
            for (const auto& c : state.clients) predictors.push_back(&c.predictor);
            const double c_percent = config.fast_phi ? 100.0 : config.c_percent;
            std::vector<MlpParams> grads(n);
            std::vector<std::size_t> counts(n);
            // Each client owns a phi-batch sampler derived from the run seed
            // and the number of phi rounds so far.
            parallel_for(n, config.threads, [&](std::size_t k) {
                const auto& data = *state.clients[k].data;
                BatchSampler sampler(data.size(), config.batch_size,
                                     derive_seed(state.seed, kPhiSamplerStream + k * 1000003ULL + t));
                grads[k] = representation_gradient(data, sampler, state.phi, predictors, c_percent);
                counts[k] = data.size();
            });
            state.phi.net() = aggregate_phi(state.phi.net(), grads, counts, config.lr_phi);
            state.eval_cache.stale.assign(n, true);
            for (std::size_t k = 0; k < n; ++k) log.acting.push_back(static_cast<int>(k));
            changed = true;
        }
    } else {
        state.predictor_rounds += 1;
        log.acting = playing_sequence(config.schedule, state.predictor_rounds, n);
        PredictorSettings settings;
        settings.optimizer = config.predictor_optimizer;
        settings.learning_rate = config.lr_predictor;
        settings.local_steps = config.local_steps;
        settings.smooth = config.smooth;
        settings.divisor = config.divisor;
        std::vector<double> losses(log.acting.size());
        parallel_for(log.acting.size(), config.threads, [&](std::size_t i) {
            auto& client = state.clients[static_cast<std::size_t>(log.acting[i])];
            losses[i] = config.predictor_c_percent > 0.0
                            ? exact_predictor_update(client, state.phi, settings, n, config.predictor_c_percent)
                            : predictor_update(client, state.phi, settings, n);
        });
        for (std::size_t i = 0; i < log.acting.size(); ++i) {
            const auto id = static_cast<std::size_t>(log.acting[i]);
            log.client_loss[id] = losses[i];
            if (id < state.eval_cache.stale.size()) state.eval_cache.stale[id] = true;
        }
        communicate(state, config.smooth);
        changed = true;
    }

    state.round = t;
    if (changed) state.communication_rounds += 1;
    log.predictor_round = state.predictor_rounds;
    log.communication_rounds = state.communication_rounds;
    const auto scores = evaluate_cached(state, federation);
    log.train_acc = scores.train_acc;
    log.test_acc = scores.test_acc;
    log.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started).count();
    return log;
}

std::size_t warm_start_length(const GameConfig& config, std::size_t n_clients, std::size_t total_train) {
    if (config.warm_start_override) return *config.warm_start_override;
    if (config.variant_phi == PhiVariant::Fixed) return n_clients;
    return batches_per_epoch(total_train, config.batch_size);
}

StopDecision stopping_check(const std::vector<double>& train_history, double stop_threshold,
                            std::size_t warm_start_len, bool require_peak) {
    if (train_history.empty()) return StopDecision::Continue;
    if (train_history.size() <= warm_start_len) return StopDecision::Continue;
    if (train_history.back() >= stop_threshold) return StopDecision::Continue;
    if (require_peak) {
        const bool peaked = std::any_of(train_history.begin(), train_history.end() - 1,
                                        [&](double a) { return a >= stop_threshold; });
        if (!peaked) return StopDecision::Continue;
    }
    return StopDecision::Stop;
}

TrainingResult run_training(const Federation& federation, const GameConfig& config, std::uint64_t seed) {
    if (!federation.test) throw ConfigError("run_training: no test environment");
    TrainingResult result;
    result.state = init_server(federation, config, seed);
    const auto warm = warm_start_length(config, federation.n_clients(), federation.total_train());
    std::vector<double> history;
    while (result.state.round < config.max_rounds) {
        auto log = run_round(result.state, config, federation);
        const bool counted = !log.phi_round || config.variant_phi == PhiVariant::Variable;
        result.logs.push_back(log);
        if (!counted) continue;
        history.push_back(log.train_acc);
        if (config.stop_enabled && stopping_check(history, config.stop_threshold, warm, config.stop_after_peak) ==
                                          StopDecision::Stop) {
            result.stopped = true;
            result.stop_round = log.round;
            result.stop_predictor_round = log.predictor_round;
            break;
        }
    }
    if (!result.stopped) {
        result.hit_max_rounds = true;
        result.stop_round = result.state.round;
        result.stop_predictor_round = result.state.predictor_rounds;
    }
    result.final_scores = evaluate_ensemble(result.state, federation);
    return result;
}

MlpParams weighted_average(const std::vector<MlpParams>& models, const std::vector<std::size_t>& counts) {
    if (models.empty() || models.size() != counts.size()) throw ConfigError("weighted_average: bad inputs");
    std::size_t total = 0;
    for (auto c : counts) total += c;
    if (total == 0) throw ConfigError("weighted_average: zero total weight");
    MlpParams avg = zeros_like(models.front());
    for (std::size_t k = 0; k < models.size(); ++k) avg.add_scaled(models[k], static_cast<double>(counts[k]));
    avg.scale(1.0 / static_cast<double>(total));
    return avg;
}

void fedsgd_step(MlpParams& model, const std::vector<Batch>& batches, const std::vector<std::size_t>& counts,
                 double learning_rate) {
    if (batches.size() != counts.size() || batches.empty()) throw ConfigError("fedsgd_step: bad inputs");
    std::vector<MlpParams> grads;
    grads.reserve(batches.size());
    for (const auto& b : batches) {
        auto fwd = forward(model, b.inputs);
        auto loss = softmax_cross_entropy(fwd.output, b.labels);
        grads.push_back(backward(model, fwd.cache, loss.dlogits).grad);
    }
    model.add_scaled(weighted_average(grads, counts), -learning_rate);
}

namespace {

struct BaselineSetup {
    MlpParams model;
    std::vector<BatchSampler> samplers;
    std::vector<std::size_t> counts;
};

BaselineSetup setup_baseline(const Federation& federation, const BaselineConfig& config, std::uint64_t seed) {
    if (federation.train.empty()) throw ConfigError("baseline: no training clients");
    BaselineSetup setup;
    ModelConfig model;
    model.predictor_hidden = config.hidden;
    const auto& first = *federation.train.front();
    setup.model = init_params(predictor_dims(first.dim(), model, first.num_classes),
                              derive_seed(seed, kBaselineStream));
    for (std::size_t k = 0; k < federation.n_clients(); ++k) {
        const auto& data = *federation.train[k];
        setup.samplers.emplace_back(data.size(), config.batch_size, derive_seed(seed, kSamplerStream + k));
        setup.counts.push_back(data.size());
    }
    return setup;
}

EnsembleScores score_model(const MlpParams& model, const Federation& federation) {
    EnsembleScores s;
    if (!federation.train_eval.labels.empty()) {
        s.train_acc = accuracy(predict(model, federation.train_eval.inputs), federation.train_eval.labels);
    }
    if (!federation.test_eval.labels.empty()) {
        s.test_acc = accuracy(predict(model, federation.test_eval.inputs), federation.test_eval.labels);
    }
    return s;
}

RoundLog baseline_log(std::size_t round, std::size_t n, const EnsembleScores& s, double wall_ms) {
    RoundLog log;
    log.round = round;
    log.predictor_round = round;
    log.communication_rounds = round;
    for (std::size_t k = 0; k < n; ++k) log.acting.push_back(static_cast<int>(k));
    log.client_loss.assign(n, std::nullopt);
    log.train_acc = s.train_acc;
    log.test_acc = s.test_acc;
    log.wall_ms = wall_ms;
    return log;
}

}  // namespace

BaselineResult run_fedavg_baseline(const Federation& federation, const BaselineConfig& config,
                                   std::uint64_t seed) {
    if (config.local_epochs < 1) throw ConfigError("FedAVG: local_epochs must be at least 1");
    auto setup = setup_baseline(federation, config, seed);
    const std::size_t n = federation.n_clients();
    AdamHyper hyper;
    hyper.learning_rate = config.learning_rate;
    BaselineResult result;
    for (std::size_t r = 1; r <= config.rounds; ++r) {
        const auto started = std::chrono::steady_clock::now();
        std::vector<MlpParams> locals(n, setup.model);
        std::vector<double> losses(n, 0.0);
        parallel_for(n, config.threads, [&](std::size_t k) {
            auto& local = locals[k];
            auto opt = make_optim_state(local, hyper);
            const auto& data = *federation.train[k];
            const std::size_t steps = config.local_epochs * setup.samplers[k].batches_per_epoch();
            for (std::size_t s = 0; s < steps; ++s) {
                const Batch batch = gather_batch(data, setup.samplers[k].next());
                auto fwd = forward(local, batch.inputs);
                auto loss = softmax_cross_entropy(fwd.output, batch.labels);
                auto grad = backward(local, fwd.cache, loss.dlogits).grad;
                if (config.optimizer == OptimizerKind::Adam) {
                    adam_step(local, grad, opt);
                } else {
                    sgd_step(local, grad, config.learning_rate);
                }
                losses[k] = loss.loss;
            }
        });
        setup.model = weighted_average(locals, setup.counts);
        const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started).count();
        auto log = baseline_log(r, n, score_model(setup.model, federation), ms);
        for (std::size_t k = 0; k < n; ++k) log.client_loss[k] = losses[k];
        result.logs.push_back(std::move(log));
    }
    result.final_scores = score_model(setup.model, federation);
    result.model = std::move(setup.model);
    return result;
}

BaselineResult run_fedsgd_baseline(const Federation& federation, const BaselineConfig& config,
                                   std::uint64_t seed) {
    auto setup = setup_baseline(federation, config, seed);
    const std::size_t n = federation.n_clients();
    BaselineResult result;
    for (std::size_t r = 1; r <= config.rounds; ++r) {
        const auto started = std::chrono::steady_clock::now();
        std::vector<Batch> batches;
        for (std::size_t k = 0; k < n; ++k) batches.push_back(gather_batch(*federation.train[k], setup.samplers[k].next()));
        fedsgd_step(setup.model, batches, setup.counts, config.learning_rate);
        const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started).count();
        result.logs.push_back(baseline_log(r, n, score_model(setup.model, federation), ms));
    }
    result.final_scores = score_model(setup.model, federation);
    result.model = std::move(setup.model);
    return result;
}

}  // namespace flgames
