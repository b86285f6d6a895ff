#pragma once

// Per-client mechanics of the ensemble game: ensembles, the buffer-smoothed
// local objective, best-response steps and FIFO strategy buffers.

#include <cstddef>
#include <cstdint>
#include <deque>
#include <map>
#include <memory>
#include <optional>
#include <vector>

#include "flgames/datagen.hpp"
#include "flgames/nnkernel.hpp"

namespace flgames {

// Shared feature map: either the identity or a trained network.
class Representation {
public:
    Representation() = default;
    explicit Representation(MlpParams net) : net_(std::move(net)) {}

    bool is_identity() const { return !net_.has_value(); }
    const MlpParams& net() const;
    MlpParams& net();

    Matrix apply(const Matrix& inputs) const;

    bool operator==(const Representation&) const = default;

private:
    std::optional<MlpParams> net_;
};

// FIFO of past predictors with a running parameter sum, so the average is
// available without touching every stored entry.
class ParamBuffer {
public:
    explicit ParamBuffer(std::size_t capacity = 1);

    void push(const MlpParams& params);

    std::size_t size() const { return items_.size(); }
    std::size_t capacity() const { return capacity_; }
    bool empty() const { return items_.empty(); }

    const std::deque<MlpParams>& items() const { return items_; }
    const MlpParams& running_sum() const { return sum_; }

    // Sum over stored items computed from scratch.
    MlpParams recompute_sum() const;

private:
    std::size_t capacity_;
    std::deque<MlpParams> items_;
    MlpParams sum_;
};

// running_sum / size. Throws EmptyBufferError on an empty buffer.
MlpParams buffer_average(const ParamBuffer& buffer);

// Yields shuffled minibatches; the ragged tail of an epoch is dropped unless
// the dataset is smaller than one batch.
class BatchSampler {
public:
    BatchSampler() = default;
    BatchSampler(std::size_t n, std::size_t batch_size, std::uint64_t seed);

    std::size_t batches_per_epoch() const;
    std::size_t batch_size() const { return batch_size_; }
    std::vector<std::size_t> next();

private:
    void reshuffle();

    std::size_t n_ = 0;
    std::size_t batch_size_ = 1;
    std::uint64_t seed_ = 0;
    std::uint64_t epoch_ = 0;
    std::size_t cursor_ = 0;
    std::vector<std::size_t> order_;
};

// floor(n / batch_size), at least 1.
std::size_t batches_per_epoch(std::size_t n, std::size_t batch_size);

Batch gather_batch(const SpuriousDataset& data, const std::vector<std::size_t>& rows);

// Opponent information kept by a client between communications.
struct OpponentCopy {
    std::shared_ptr<const MlpParams> predictor;
    std::shared_ptr<const MlpParams> buffer_average;  // null while the buffer is empty
};

struct EnsembleView {
    const MlpParams* candidate = nullptr;
    std::vector<const MlpParams*> opponents;
    std::vector<const MlpParams*> opponent_buffer_averages;
    std::size_t divisor = 1;
};

enum class OptimizerKind { Adam, Sgd };

// How the smoothed ensemble is normalised: by the client count as printed,
// or by the number of summed terms.
enum class EnsembleDivisor { ClientCount, TermCount };

struct PredictorSettings {
    OptimizerKind optimizer = OptimizerKind::Adam;
    double learning_rate = 2.5e-4;
    std::size_t local_steps = 1;
    bool smooth = false;
    EnsembleDivisor divisor = EnsembleDivisor::ClientCount;
};

struct ClientState {
    int client_id = 0;
    MlpParams predictor;
    OptimState optimizer;
    ParamBuffer buffer;
    std::map<int, OpponentCopy> opponents;  // P_k, never holds client_id
    std::shared_ptr<const SpuriousDataset> data;
    BatchSampler sampler;
    double last_loss = 0.0;
};

ClientState make_client(int client_id, MlpParams predictor, std::shared_ptr<const SpuriousDataset> data,
                        std::size_t buffer_capacity, std::size_t batch_size, AdamHyper hyper,
                        std::uint64_t sampler_seed);

// Mean over predictors of predictor(phi(inputs)).
Matrix ensemble_logits(const std::vector<const MlpParams*>& predictors, const Representation& phi,
                       const Matrix& inputs);

// Same as ensemble_logits on features that already went through phi.
Matrix ensemble_logits_on_features(const std::vector<const MlpParams*>& predictors,
                                   const Matrix& features);

// (candidate + opponents + opponent buffer averages) / divisor.
Matrix smoothed_ensemble_logits(const EnsembleView& view, const Representation& phi,
                                const Matrix& inputs);

struct ObjectiveResult {
    double loss = 0.0;
    MlpParams grad;  // w.r.t. view.candidate only
};

ObjectiveResult local_objective(const EnsembleView& view, const Representation& phi, const Batch& batch);

// Builds the view a client sees from its own predictor and P_k.
EnsembleView make_view(const ClientState& state, const PredictorSettings& settings,
                       std::size_t n_clients);

// local_steps optimizer steps on successive minibatches, then (smooth only)
// pushes the new predictor into the client's buffer. Returns the last loss.
double predictor_update(ClientState& state, const Representation& phi,
                        const PredictorSettings& settings, std::size_t n_clients);

// Number of steps taken by exact_predictor_update: ceil(c% of an epoch), >= 1.
std::size_t exact_best_response_steps(double c_percent, std::size_t batches);

double exact_predictor_update(ClientState& state, const Representation& phi,
                              const PredictorSettings& settings, std::size_t n_clients,
                              double c_percent);

}  // namespace flgames
