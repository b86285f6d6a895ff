#include "flgames/nnkernel.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "flgames/errors.hpp"
#include "flgames/rng.hpp"

namespace flgames {

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
        throw ShapeError("matrix data length " + std::to_string(data_.size()) + " != " +
                         std::to_string(rows_) + "x" + std::to_string(cols_));
    }
}

std::size_t MlpParams::in_dim() const { return layers.empty() ? 0 : layers.front().in_dim(); }

std::size_t MlpParams::out_dim() const { return layers.empty() ? 0 : layers.back().out_dim(); }

std::size_t MlpParams::num_parameters() const {
    std::size_t n = 0;
    for (const auto& layer : layers) n += layer.weight.size() + layer.bias.size();
    return n;
}

bool MlpParams::same_shape(const MlpParams& other) const {
    if (layers.size() != other.layers.size()) return false;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const auto& a = layers[i];
        const auto& b = other.layers[i];
        if (a.weight.rows() != b.weight.rows() || a.weight.cols() != b.weight.cols() ||
            a.bias.size() != b.bias.size()) {
            return false;
        }
    }
    return true;
}

void require_same_shape(const MlpParams& a, const MlpParams& b, const char* what) {
    if (!a.same_shape(b)) throw ShapeError(std::string(what) + ": parameter layouts differ");
}

void MlpParams::add_scaled(const MlpParams& other, double alpha) {
    require_same_shape(*this, other, "add_scaled");
    for (std::size_t l = 0; l < layers.size(); ++l) {
        auto& dst = layers[l];
        const auto& src = other.layers[l];
        auto& w = dst.weight.values();
        const auto& sw = src.weight.values();
        for (std::size_t i = 0; i < w.size(); ++i) w[i] += alpha * sw[i];
        for (std::size_t i = 0; i < dst.bias.size(); ++i) dst.bias[i] += alpha * src.bias[i];
    }
}

void MlpParams::scale(double alpha) {
    for_each_value([alpha](double& v) { v *= alpha; });
}

void MlpParams::set_zero() {
    for_each_value([](double& v) { v = 0.0; });
}

bool MlpParams::all_finite() const {
    bool ok = true;
    for_each_value([&ok](double v) { ok = ok && std::isfinite(v); });
    return ok;
}

MlpParams zeros_like(const MlpParams& params) {
    MlpParams out = params;
    out.set_zero();
    return out;
}

MlpParams init_params(std::span<const std::size_t> layer_dims, std::uint64_t seed,
                      Activation output_activation) {
    if (layer_dims.size() < 2) throw ConfigError("init_params: need at least 2 layer dims");
    for (auto d : layer_dims) {
        if (d == 0) throw ConfigError("init_params: layer dims must be positive");
    }
    Rng rng(seed);
    MlpParams params;
    params.layers.reserve(layer_dims.size() - 1);
    for (std::size_t l = 0; l + 1 < layer_dims.size(); ++l) {
        const std::size_t in = layer_dims[l];
        const std::size_t out = layer_dims[l + 1];
        DenseLayer layer;
        layer.weight = Matrix(out, in);
        const double scale = 1.0 / std::sqrt(static_cast<double>(in));
        for (double& w : layer.weight.values()) w = rng.uniform(-1.0, 1.0) * scale;
        layer.bias.assign(out, 0.0);
        const bool last = (l + 2 == layer_dims.size());
        layer.activation = last ? output_activation : Activation::Elu;
        params.layers.push_back(std::move(layer));
    }
    return params;
}

double elu(double x) { return x >= 0.0 ? x : std::expm1(x); }

double elu_derivative(double pre_activation) {
    return pre_activation >= 0.0 ? 1.0 : std::exp(pre_activation);
}

namespace {

double dot(const double* a, const double* b, std::size_t n) {
    double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    for (; i < n; ++i) s0 += a[i] * b[i];
    return (s0 + s1) + (s2 + s3);
}

void axpy(double alpha, const double* x, double* y, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

// out = inputs * W^T + b, before activation.
Matrix affine(const DenseLayer& layer, const Matrix& inputs) {
    const std::size_t n = inputs.rows();
    const std::size_t in = layer.in_dim();
    const std::size_t out = layer.out_dim();
    Matrix z(n, out);
    const double* w = layer.weight.values().data();
    for (std::size_t r = 0; r < n; ++r) {
        const double* x = inputs.row(r).data();
        double* zr = z.row(r).data();
        for (std::size_t o = 0; o < out; ++o) zr[o] = dot(x, w + o * in, in) + layer.bias[o];
    }
    return z;
}

void activate(Activation act, Matrix& m) {
    if (act == Activation::Elu) {
        for (double& v : m.values()) v = elu(v);
    }
}

void check_input(const MlpParams& params, const Matrix& inputs) {
    if (params.layers.empty()) throw ShapeError("forward: network has no layers");
    if (inputs.cols() != params.in_dim()) {
        throw ShapeError("forward: input dim " + std::to_string(inputs.cols()) +
                         " != network in_dim " + std::to_string(params.in_dim()));
    }
}

}  // namespace

ForwardResult forward(const MlpParams& params, const Matrix& inputs) {
    check_input(params, inputs);
    ForwardResult result;
    auto& cache = result.cache;
    cache.layer_inputs.reserve(params.layers.size());
    cache.pre_activations.reserve(params.layers.size());
    Matrix current = inputs;
    for (const auto& layer : params.layers) {
        Matrix z = affine(layer, current);
        cache.layer_inputs.push_back(std::move(current));
        current = z;
        activate(layer.activation, current);
        cache.pre_activations.push_back(std::move(z));
    }
    result.output = std::move(current);
    return result;
}

Matrix predict(const MlpParams& params, const Matrix& inputs) {
    check_input(params, inputs);
    Matrix current = affine(params.layers.front(), inputs);
    activate(params.layers.front().activation, current);
    for (std::size_t l = 1; l < params.layers.size(); ++l) {
        current = affine(params.layers[l], current);
        activate(params.layers[l].activation, current);
    }
    return current;
}

LossResult softmax_cross_entropy(const Matrix& logits, std::span<const int> labels) {
    if (logits.rows() != labels.size()) {
        throw ShapeError("softmax_cross_entropy: " + std::to_string(logits.rows()) + " rows vs " +
                         std::to_string(labels.size()) + " labels");
    }
    if (logits.rows() == 0) throw ShapeError("softmax_cross_entropy: empty batch");
    const std::size_t n = logits.rows();
    const std::size_t c = logits.cols();
    LossResult result;
    result.dlogits = Matrix(n, c);
    const double inv_n = 1.0 / static_cast<double>(n);
    double total = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
        const int label = labels[r];
        if (label < 0 || static_cast<std::size_t>(label) >= c) {
            throw LabelError("softmax_cross_entropy: label " + std::to_string(label) +
                             " outside [0, " + std::to_string(c) + ")");
        }
        auto row = logits.row(r);
        const double max_logit = *std::max_element(row.begin(), row.end());
        double sum = 0.0;
        for (double v : row) sum += std::exp(v - max_logit);
        const double log_sum = std::log(sum);
        total += log_sum - (row[label] - max_logit);
        auto grad = result.dlogits.row(r);
        for (std::size_t k = 0; k < c; ++k) {
            const double prob = std::exp(row[k] - max_logit - log_sum);
            grad[k] = (prob - (static_cast<int>(k) == label ? 1.0 : 0.0)) * inv_n;
        }
    }
    result.loss = total * inv_n;
    return result;
}

BackwardResult backward(const MlpParams& params, const ForwardCache& cache, const Matrix& dlogits) {
    const std::size_t num_layers = params.layers.size();
    if (cache.layer_inputs.size() != num_layers || cache.pre_activations.size() != num_layers) {
        throw ShapeError("backward: cache does not match network depth");
    }
    for (std::size_t l = 0; l < num_layers; ++l) {
        const auto& layer = params.layers[l];
        const auto& z = cache.pre_activations[l];
        const auto& x = cache.layer_inputs[l];
        if (z.cols() != layer.out_dim() || x.cols() != layer.in_dim() || z.rows() != x.rows()) {
            throw ShapeError("backward: stale or mismatched cache at layer " + std::to_string(l));
        }
    }
    if (dlogits.rows() != cache.pre_activations.back().rows() ||
        dlogits.cols() != params.out_dim()) {
        throw ShapeError("backward: dlogits shape does not match forward output");
    }

    BackwardResult result;
    result.grad = zeros_like(params);
    Matrix delta = dlogits;  // gradient w.r.t. the current layer's output
    for (std::size_t l = num_layers; l-- > 0;) {
        const auto& layer = params.layers[l];
        const auto& z = cache.pre_activations[l];
        const auto& x = cache.layer_inputs[l];
        if (layer.activation == Activation::Elu) {
            auto& dv = delta.values();
            const auto& zv = z.values();
            for (std::size_t i = 0; i < dv.size(); ++i) dv[i] *= elu_derivative(zv[i]);
        }
        const std::size_t n = x.rows();
        const std::size_t in = layer.in_dim();
        const std::size_t out = layer.out_dim();
        auto& g = result.grad.layers[l];
        double* gw = g.weight.values().data();
        for (std::size_t r = 0; r < n; ++r) {
            const double* xr = x.row(r).data();
            const double* dr = delta.row(r).data();
            for (std::size_t o = 0; o < out; ++o) {
                if (dr[o] != 0.0) axpy(dr[o], xr, gw + o * in, in);
                g.bias[o] += dr[o];
            }
        }
        Matrix next(n, in);
        const double* w = layer.weight.values().data();
        for (std::size_t r = 0; r < n; ++r) {
            const double* dr = delta.row(r).data();
            double* nr = next.row(r).data();
            for (std::size_t o = 0; o < out; ++o) {
                if (dr[o] != 0.0) axpy(dr[o], w + o * in, nr, in);
            }
        }
        delta = std::move(next);
    }
    result.input_grad = std::move(delta);
    return result;
}

std::vector<int> argmax_rows(const Matrix& logits) {
    std::vector<int> out(logits.rows(), 0);
    for (std::size_t r = 0; r < logits.rows(); ++r) {
        auto row = logits.row(r);
        std::size_t best = 0;
        for (std::size_t k = 1; k < row.size(); ++k) {
            if (row[k] > row[best]) best = k;
        }
        out[r] = static_cast<int>(best);
    }
    return out;
}

double accuracy(const Matrix& logits, std::span<const int> labels) {
    if (logits.rows() != labels.size()) throw ShapeError("accuracy: row/label count mismatch");
    if (labels.empty()) return 0.0;
    const auto predictions = argmax_rows(logits);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) correct += (predictions[i] == labels[i]);
    return static_cast<double>(correct) / static_cast<double>(labels.size());
}

OptimState make_optim_state(const MlpParams& params, AdamHyper hyper) {
    OptimState state;
    state.first_moment = zeros_like(params);
    state.second_moment = zeros_like(params);
    state.step = 0;
    state.hyper = hyper;
    return state;
}

void adam_step(MlpParams& params, const MlpParams& grads, OptimState& state) {
    require_same_shape(params, grads, "adam_step");
    require_same_shape(params, state.first_moment, "adam_step (first moment)");
    require_same_shape(params, state.second_moment, "adam_step (second moment)");
    state.step += 1;
    const auto& h = state.hyper;
    const double t = static_cast<double>(state.step);
    const double bias1 = 1.0 - std::pow(h.beta1, t);
    const double bias2 = 1.0 - std::pow(h.beta2, t);
    for (std::size_t l = 0; l < params.layers.size(); ++l) {
        auto update = [&](std::vector<double>& p, const std::vector<double>& g, std::vector<double>& m,
                          std::vector<double>& v) {
            for (std::size_t i = 0; i < p.size(); ++i) {
                m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g[i];
                v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g[i] * g[i];
                const double m_hat = m[i] / bias1;
                const double v_hat = v[i] / bias2;
                p[i] -= h.learning_rate * m_hat / (std::sqrt(v_hat) + h.epsilon);
            }
        };
        update(params.layers[l].weight.values(), grads.layers[l].weight.values(),
               state.first_moment.layers[l].weight.values(),
               state.second_moment.layers[l].weight.values());
        update(params.layers[l].bias, grads.layers[l].bias, state.first_moment.layers[l].bias,
               state.second_moment.layers[l].bias);
    }
}

void sgd_step(MlpParams& params, const MlpParams& grads, double learning_rate) {
    require_same_shape(params, grads, "sgd_step");
    params.add_scaled(grads, -learning_rate);
}

}  // namespace flgames
