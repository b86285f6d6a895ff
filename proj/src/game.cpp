#include "flgames/game.hpp"

#include <cmath>
#include <numeric>
#include <string>

#include "flgames/errors.hpp"
#include "flgames/rng.hpp"

namespace flgames {

const MlpParams& Representation::net() const {
    if (!net_) throw VariantError("representation is the identity map");
    return *net_;
}

MlpParams& Representation::net() {
    if (!net_) throw VariantError("representation is the identity map");
    return *net_;
}

Matrix Representation::apply(const Matrix& inputs) const {
    return net_ ? predict(*net_, inputs) : inputs;
}

ParamBuffer::ParamBuffer(std::size_t capacity) : capacity_(capacity) {
    if (capacity_ == 0) throw ConfigError("buffer capacity must be at least 1");
}

void ParamBuffer::push(const MlpParams& params) {
    if (items_.empty()) {
        sum_ = params;
    } else {
        require_same_shape(sum_, params, "ParamBuffer::push");
        sum_.add_scaled(params, 1.0);
    }
    items_.push_back(params);
    if (items_.size() > capacity_) {
        sum_.add_scaled(items_.front(), -1.0);
        items_.pop_front();
    }
}

MlpParams ParamBuffer::recompute_sum() const {
    if (items_.empty()) throw EmptyBufferError("buffer is empty");
    MlpParams total = items_.front();
    for (std::size_t i = 1; i < items_.size(); ++i) total.add_scaled(items_[i], 1.0);
    return total;
}

MlpParams buffer_average(const ParamBuffer& buffer) {
    if (buffer.empty()) throw EmptyBufferError("buffer_average of an empty buffer");
    MlpParams avg = buffer.running_sum();
    avg.scale(1.0 / static_cast<double>(buffer.size()));
    return avg;
}

std::size_t batches_per_epoch(std::size_t n, std::size_t batch_size) {
    if (batch_size == 0) throw ConfigError("batch size must be positive");
    return std::max<std::size_t>(1, n / batch_size);
}

BatchSampler::BatchSampler(std::size_t n, std::size_t batch_size, std::uint64_t seed)
    : n_(n), batch_size_(batch_size), seed_(seed) {
    if (n_ == 0) throw ConfigError("BatchSampler: empty dataset");
    if (batch_size_ == 0) throw ConfigError("BatchSampler: batch size must be positive");
    order_.resize(n_);
    reshuffle();
}

std::size_t BatchSampler::batches_per_epoch() const { return flgames::batches_per_epoch(n_, batch_size_); }

void BatchSampler::reshuffle() {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    Rng rng(derive_seed(seed_, epoch_));
    rng.shuffle(order_.begin(), order_.end());
    cursor_ = 0;
}

std::vector<std::size_t> BatchSampler::next() {
    if (n_ == 0) throw ConfigError("BatchSampler: empty dataset");
    const std::size_t take = std::min(batch_size_, n_);
    if (cursor_ + take > n_) {
        ++epoch_;
        reshuffle();
    }
    std::vector<std::size_t> rows(order_.begin() + static_cast<std::ptrdiff_t>(cursor_),
                                  order_.begin() + static_cast<std::ptrdiff_t>(cursor_ + take));
    cursor_ += take;
    return rows;
}

Batch gather_batch(const SpuriousDataset& data, const std::vector<std::size_t>& rows) {
    Batch batch;
    const std::size_t d = data.dim();
    batch.inputs = Matrix(rows.size(), d);
    batch.labels.resize(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto src = data.inputs.row(rows[i]);
        std::copy(src.begin(), src.end(), batch.inputs.row(i).begin());
        batch.labels[i] = data.labels[rows[i]];
    }
    return batch;
}

ClientState make_client(int client_id, MlpParams predictor, std::shared_ptr<const SpuriousDataset> data,
                        std::size_t buffer_capacity, std::size_t batch_size, AdamHyper hyper,
                        std::uint64_t sampler_seed) {
    if (!data || data->size() == 0) throw ConfigError("client " + std::to_string(client_id) + " has no data");
    ClientState state;
    state.client_id = client_id;
    state.optimizer = make_optim_state(predictor, hyper);
    state.predictor = std::move(predictor);
    state.buffer = ParamBuffer(buffer_capacity);
    state.sampler = BatchSampler(data->size(), batch_size, sampler_seed);
    state.data = std::move(data);
    return state;
}

Matrix ensemble_logits_on_features(const std::vector<const MlpParams*>& predictors,
                                   const Matrix& features) {
    if (predictors.empty()) throw ConfigError("ensemble_logits: no predictors");
    Matrix total;
    for (const auto* p : predictors) {
        Matrix logits = predict(*p, features);
        if (total.size() == 0) {
            total = std::move(logits);
        } else {
            if (logits.cols() != total.cols()) throw ShapeError("ensemble_logits: output dims differ");
            auto& t = total.values();
            const auto& l = logits.values();
            for (std::size_t i = 0; i < t.size(); ++i) t[i] += l[i];
        }
    }
    const double inv = 1.0 / static_cast<double>(predictors.size());
    for (double& v : total.values()) v *= inv;
    return total;
}

Matrix ensemble_logits(const std::vector<const MlpParams*>& predictors, const Representation& phi,
                       const Matrix& inputs) {
    return ensemble_logits_on_features(predictors, phi.apply(inputs));
}

namespace {

void accumulate(Matrix& total, const Matrix& add) {
    if (total.rows() != add.rows() || total.cols() != add.cols()) {
        throw ShapeError("ensemble: predictor output shapes differ");
    }
    auto& t = total.values();
    const auto& a = add.values();
    for (std::size_t i = 0; i < t.size(); ++i) t[i] += a[i];
}

// Sum of the logits of every fixed (non-candidate) term of the view.
Matrix constant_logits(const EnsembleView& view, const Matrix& features, std::size_t out_dim) {
    Matrix total(features.rows(), out_dim);
    for (const auto* p : view.opponents) accumulate(total, predict(*p, features));
    for (const auto* p : view.opponent_buffer_averages) accumulate(total, predict(*p, features));
    return total;
}

void check_view(const EnsembleView& view) {
    if (view.candidate == nullptr) throw ConfigError("ensemble view has no candidate");
    if (view.divisor == 0) throw ConfigError("ensemble view divisor must be positive");
}

}  // namespace

Matrix smoothed_ensemble_logits(const EnsembleView& view, const Representation& phi,
                                const Matrix& inputs) {
    check_view(view);
    const Matrix features = phi.apply(inputs);
    Matrix total = predict(*view.candidate, features);
    accumulate(total, constant_logits(view, features, view.candidate->out_dim()));
    const double inv = 1.0 / static_cast<double>(view.divisor);
    for (double& v : total.values()) v *= inv;
    return total;
}

ObjectiveResult local_objective(const EnsembleView& view, const Representation& phi, const Batch& batch) {
    check_view(view);
    const Matrix features = phi.apply(batch.inputs);
    auto fwd = forward(*view.candidate, features);
    Matrix logits = fwd.output;
    accumulate(logits, constant_logits(view, features, view.candidate->out_dim()));
    const double inv = 1.0 / static_cast<double>(view.divisor);
    for (double& v : logits.values()) v *= inv;

    auto loss = softmax_cross_entropy(logits, batch.labels);
    // Only the candidate branch is differentiated; it carries the 1/divisor factor.
    for (double& v : loss.dlogits.values()) v *= inv;
    ObjectiveResult result;
    result.loss = loss.loss;
    result.grad = backward(*view.candidate, fwd.cache, loss.dlogits).grad;
    return result;
}

EnsembleView make_view(const ClientState& state, const PredictorSettings& settings,
                       std::size_t n_clients) {
    EnsembleView view;
    view.candidate = &state.predictor;
    for (const auto& [id, copy] : state.opponents) {
        if (id == state.client_id) throw ConfigError("client information set contains its own predictor");
        view.opponents.push_back(copy.predictor.get());
        if (settings.smooth && copy.buffer_average) {
            view.opponent_buffer_averages.push_back(copy.buffer_average.get());
        }
    }
    if (settings.divisor == EnsembleDivisor::ClientCount) {
        view.divisor = n_clients;
    } else {
        view.divisor = 1 + view.opponents.size() + view.opponent_buffer_averages.size();
    }
    return view;
}

namespace {

double run_local_steps(ClientState& state, const Representation& phi, const PredictorSettings& settings,
                       std::size_t n_clients, std::size_t steps) {
    if (!state.data || state.data->size() == 0) throw ConfigError("predictor_update: empty dataset");
    if (steps == 0) throw ConfigError("predictor_update: local_steps must be at least 1");
    double loss = 0.0;
    for (std::size_t s = 0; s < steps; ++s) {
        const Batch batch = gather_batch(*state.data, state.sampler.next());
        const EnsembleView view = make_view(state, settings, n_clients);
        auto objective = local_objective(view, phi, batch);
        if (settings.optimizer == OptimizerKind::Adam) {
            state.optimizer.hyper.learning_rate = settings.learning_rate;
            adam_step(state.predictor, objective.grad, state.optimizer);
        } else {
            sgd_step(state.predictor, objective.grad, settings.learning_rate);
        }
        loss = objective.loss;
    }
    if (settings.smooth) state.buffer.push(state.predictor);
    state.last_loss = loss;
    return loss;
}

}  // namespace

double predictor_update(ClientState& state, const Representation& phi,
                        const PredictorSettings& settings, std::size_t n_clients) {
    return run_local_steps(state, phi, settings, n_clients, settings.local_steps);
}

std::size_t exact_best_response_steps(double c_percent, std::size_t batches) {
    if (!(c_percent > 0.0 && c_percent <= 100.0)) {
        throw ConfigError("c_percent must lie in (0, 100], got " + std::to_string(c_percent));
    }
    const double raw = c_percent / 100.0 * static_cast<double>(batches);
    // Guard against 100% of an epoch rounding above the batch count.
    const auto steps = static_cast<std::size_t>(std::ceil(raw - 1e-9));
    return std::max<std::size_t>(1, steps);
}

double exact_predictor_update(ClientState& state, const Representation& phi,
                              const PredictorSettings& settings, std::size_t n_clients,
                              double c_percent) {
    const auto steps = exact_best_response_steps(c_percent, state.sampler.batches_per_epoch());
    return run_local_steps(state, phi, settings, n_clients, steps);
}

}  // namespace flgames
