#pragma once

// Server loop: playing sequences, alternating representation/predictor
// rounds, FedSGD aggregation of phi, stopping, and the FedSGD/FedAVG
// baselines.

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "flgames/datagen.hpp"
#include "flgames/game.hpp"
#include "flgames/nnkernel.hpp"

namespace flgames {

enum class PhiVariant { Fixed, Variable };
enum class Schedule { Sequential, Parallel };

struct ModelConfig {
    std::vector<std::size_t> predictor_hidden{390, 390};
    std::size_t phi_width = 390;  // variable-phi only
};

struct GameConfig {
    PhiVariant variant_phi = PhiVariant::Fixed;
    Schedule schedule = Schedule::Sequential;
    bool smooth = false;
    bool fast_phi = false;
    std::size_t buffer_capacity = 5;
    double c_percent = 1.0;            // share of local batches per phi gradient
    std::size_t local_steps = 1;       // minibatch steps per predictor update
    double predictor_c_percent = 0.0;  // > 0 switches to exact best responses
    std::size_t batch_size = 256;
    double lr_phi = 2.5e-5;
    double lr_predictor = 2.5e-4;
    OptimizerKind predictor_optimizer = OptimizerKind::Adam;
    EnsembleDivisor divisor = EnsembleDivisor::ClientCount;
    std::size_t max_rounds = 1000;
    double stop_threshold = 0.7;
    bool stop_enabled = true;
    // Only stop once the accuracy has reached the threshold at least once,
    // i.e. it has to drop below it rather than start below it.
    bool stop_after_peak = false;
    std::optional<std::size_t> warm_start_override;
    bool skip_phi_rounds = false;
    std::size_t eval_cap = 10000;
    std::size_t threads = 1;
    ModelConfig model;

    void validate() const;
    // Short tag such as "F-FLG-par-smooth".
    std::string variant_name() const;
};

struct RoundLog {
    std::size_t round = 0;
    std::size_t predictor_round = 0;      // predictor rounds completed so far
    std::size_t communication_rounds = 0; // rounds that exchanged anything
    std::vector<int> acting;              // client ids updated this round
    double train_acc = 0.0;
    double test_acc = 0.0;
    std::vector<std::optional<double>> client_loss;
    bool phi_round = false;
    double wall_ms = 0.0;
};

struct EvalSet {
    Matrix inputs;
    std::vector<int> labels;
};

// Training environments plus the held-out test environment.
struct Federation {
    std::vector<std::shared_ptr<const SpuriousDataset>> train;
    std::shared_ptr<const SpuriousDataset> test;
    EvalSet train_eval;
    EvalSet test_eval;

    std::size_t n_clients() const { return train.size(); }
    std::size_t total_train() const;
};

// Prefix of each client's data proportional to N_k (total <= cap), and the
// first `cap` test rows.
Federation make_federation(std::vector<SpuriousDataset> train, SpuriousDataset test, std::size_t eval_cap);

// Per-client logits on the evaluation sets, refreshed only for clients whose
// predictor (or phi) changed.
struct EvalCache {
    std::vector<Matrix> train_logits;
    std::vector<Matrix> test_logits;
    std::vector<bool> stale;
};

struct ServerState {
    Representation phi;
    std::vector<ClientState> clients;
    std::size_t round = 0;
    std::size_t predictor_rounds = 0;
    std::size_t communication_rounds = 0;
    std::uint64_t seed = 0;
    EvalCache eval_cache;
};

// 0-based ids of the clients that play predictor round t (t >= 1). The
// sequential schedule is client seq(t) - 1 with seq(t) = 1 + (t - 1) mod n.
std::vector<int> playing_sequence(Schedule schedule, std::size_t t, std::size_t n_clients);

// Rounds at which nothing changes are skipped when counting stop history.
bool is_phi_round(const GameConfig& config, std::size_t round);

// Summed phi gradient of client's ensemble loss over ceil(c% of an epoch)
// batches drawn from `sampler`.
MlpParams representation_gradient(const SpuriousDataset& data, BatchSampler& sampler,
                                  const Representation& phi,
                                  const std::vector<const MlpParams*>& predictors, double c_percent);

// phi - eta * sum_k (N_k / N) g_k, summed in the given (ascending id) order.
MlpParams aggregate_phi(const MlpParams& phi, const std::vector<MlpParams>& gradients,
                        const std::vector<std::size_t>& sample_counts, double eta);

ServerState init_server(const Federation& federation, const GameConfig& config, std::uint64_t seed);

// P_k <- {w_i : i != k} for every k.
void communicate(ServerState& state, bool smooth);

RoundLog run_round(ServerState& state, const GameConfig& config, const Federation& federation);

std::size_t warm_start_length(const GameConfig& config, std::size_t n_clients, std::size_t total_train);

enum class StopDecision { Continue, Stop };

// Stop iff more than warm_start_len entries and the latest is below threshold
// (and, with require_peak, some earlier entry reached the threshold).
StopDecision stopping_check(const std::vector<double>& train_history, double stop_threshold,
                            std::size_t warm_start_len, bool require_peak = false);

struct EnsembleScores {
    double train_acc = 0.0;
    double test_acc = 0.0;
};

EnsembleScores evaluate_ensemble(const ServerState& state, const Federation& federation);

// Same scores as evaluate_ensemble, recomputing only stale client logits.
EnsembleScores evaluate_cached(ServerState& state, const Federation& federation);

struct TrainingResult {
    ServerState state;
    std::vector<RoundLog> logs;
    bool stopped = false;
    bool hit_max_rounds = false;
    std::size_t stop_round = 0;
    std::size_t stop_predictor_round = 0;
    EnsembleScores final_scores;
};

TrainingResult run_training(const Federation& federation, const GameConfig& config, std::uint64_t seed);

struct BaselineConfig {
    std::size_t rounds = 100;
    std::size_t local_epochs = 1;  // FedAVG only
    std::size_t batch_size = 256;
    double learning_rate = 1e-3;
    OptimizerKind optimizer = OptimizerKind::Adam;  // FedAVG local optimizer; FedSGD uses SGD
    std::vector<std::size_t> hidden{390, 390};
    std::size_t threads = 1;
};

struct BaselineResult {
    MlpParams model;
    std::vector<RoundLog> logs;
    EnsembleScores final_scores;
};

// N_k-weighted parameter average, ascending client order.
MlpParams weighted_average(const std::vector<MlpParams>& models, const std::vector<std::size_t>& counts);

BaselineResult run_fedavg_baseline(const Federation& federation, const BaselineConfig& config,
                                   std::uint64_t seed);
BaselineResult run_fedsgd_baseline(const Federation& federation, const BaselineConfig& config,
                                   std::uint64_t seed);

// One FedSGD server step given one batch per client.
void fedsgd_step(MlpParams& model, const std::vector<Batch>& batches,
                 const std::vector<std::size_t>& counts, double learning_rate);

}  // namespace flgames
