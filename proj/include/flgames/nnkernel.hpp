#pragma once

// Dense multilayer perceptron kernel: forward, exact backward, losses and
// optimizers. Everything is float64 and free of external numeric libraries.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace flgames {

// Row-major dense matrix.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    std::vector<double>& values() { return data_; }
    const std::vector<double>& values() const { return data_; }

    bool operator==(const Matrix&) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

enum class Activation { Identity, Elu };

struct DenseLayer {
    Matrix weight;             // out_dim x in_dim
    std::vector<double> bias;  // out_dim
    Activation activation = Activation::Identity;

    std::size_t in_dim() const { return weight.cols(); }
    std::size_t out_dim() const { return weight.rows(); }

    bool operator==(const DenseLayer&) const = default;
};

// Weights of one predictor head, the shared representation, or a gradient
// with the same layout.
struct MlpParams {
    std::vector<DenseLayer> layers;

    std::size_t in_dim() const;
    std::size_t out_dim() const;
    std::size_t num_parameters() const;

    bool same_shape(const MlpParams& other) const;

    // this += alpha * other
    void add_scaled(const MlpParams& other, double alpha);
    void scale(double alpha);
    void set_zero();
    bool all_finite() const;

    // Visits every scalar parameter in a fixed order (layer, weights, bias).
    template <typename F>
    void for_each_value(F&& f) {
        for (auto& layer : layers) {
            for (double& w : layer.weight.values()) f(w);
            for (double& b : layer.bias) f(b);
        }
    }
    template <typename F>
    void for_each_value(F&& f) const {
        for (const auto& layer : layers) {
            for (double w : layer.weight.values()) f(w);
            for (double b : layer.bias) f(b);
        }
    }

    bool operator==(const MlpParams&) const = default;
};

// Same layer structure, every entry zero.
MlpParams zeros_like(const MlpParams& params);

// Throws ShapeError unless a and b have identical layouts.
void require_same_shape(const MlpParams& a, const MlpParams& b, const char* what);

struct Batch {
    Matrix inputs;            // batch_size x input_dim
    std::vector<int> labels;  // batch_size, each in [0, num_classes)

    std::size_t size() const { return inputs.rows(); }
};

struct ForwardCache {
    std::vector<Matrix> layer_inputs;  // input fed to layer i
    std::vector<Matrix> pre_activations;
};

struct ForwardResult {
    Matrix output;
    ForwardCache cache;
};

struct BackwardResult {
    MlpParams grad;
    Matrix input_grad;  // d loss / d inputs of the first layer
};

struct LossResult {
    double loss = 0.0;
    Matrix dlogits;
};

// layer_dims = {in, h1, ..., out}. Hidden layers use ELU, the final layer
// uses output_activation. Weights ~ U(-1, 1) / sqrt(in_dim), biases zero.
MlpParams init_params(std::span<const std::size_t> layer_dims, std::uint64_t seed,
                      Activation output_activation = Activation::Identity);

double elu(double x);
double elu_derivative(double pre_activation);

ForwardResult forward(const MlpParams& params, const Matrix& inputs);
// Inference-only path, no cache kept.
Matrix predict(const MlpParams& params, const Matrix& inputs);

LossResult softmax_cross_entropy(const Matrix& logits, std::span<const int> labels);

BackwardResult backward(const MlpParams& params, const ForwardCache& cache, const Matrix& dlogits);

// Row-wise argmax, lowest index wins ties.
std::vector<int> argmax_rows(const Matrix& logits);
double accuracy(const Matrix& logits, std::span<const int> labels);

struct AdamHyper {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

struct OptimState {
    MlpParams first_moment;
    MlpParams second_moment;
    std::uint64_t step = 0;
    AdamHyper hyper;
};

OptimState make_optim_state(const MlpParams& params, AdamHyper hyper);

void adam_step(MlpParams& params, const MlpParams& grads, OptimState& state);
void sgd_step(MlpParams& params, const MlpParams& grads, double learning_rate);

}  // namespace flgames
