#pragma once

// Spurious-correlation federated datasets: label binarization, label noise,
// spurious codes, color/patch rendering, client specs and a synthetic SEM.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "flgames/nnkernel.hpp"

namespace flgames {

enum class EnvRole { Train, Test };

struct EnvSpec {
    int client_id = 0;
    double delta = 0.25;      // label-noise flip probability
    double p_spurious = 0.1;  // spurious-code flip probability
    std::size_t n_samples = 1;
    EnvRole role = EnvRole::Train;

    void validate() const;
};

struct SpuriousDataset {
    Matrix inputs;                  // n x d
    std::vector<int> labels;        // final label y
    std::vector<int> preliminary;   // clean label before noise
    std::vector<int> spurious;      // spurious code z
    int num_classes = 2;
    EnvSpec provenance;

    std::size_t size() const { return labels.size(); }
    std::size_t dim() const { return inputs.cols(); }

    void validate() const;
    // Rows [begin, begin + count).
    SpuriousDataset slice(std::size_t begin, std::size_t count) const;
};

struct RawImageSet {
    std::size_t count = 0;
    std::size_t channels = 1;
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::uint8_t> pixels;  // count x channels x height x width
    std::vector<std::uint8_t> labels;

    std::size_t image_size() const { return channels * height * width; }
    std::span<const std::uint8_t> image(std::size_t i) const {
        return {pixels.data() + i * image_size(), image_size()};
    }
};

// --- raw image sources --------------------------------------------------

RawImageSet parse_idx(std::span<const std::uint8_t> image_bytes,
                      std::span<const std::uint8_t> label_bytes);

// Reads a file, transparently inflating gzip content.
std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);

RawImageSet load_idx(const std::filesystem::path& images, const std::filesystem::path& labels);

// CIFAR-10 binary batches: records of 1 label byte + 3x32x32 pixels.
RawImageSet parse_cifar10(std::span<const std::uint8_t> bytes);

// --- labels ---------------------------------------------------------------

// Maps each raw class to a preliminary label, or to nullopt to drop it.
struct LabelRule {
    std::vector<std::optional<int>> mapping;
    int num_classes = 2;
};

LabelRule mnist_binary_rule();
LabelRule fashion_binary_rule();
LabelRule cifar_binary_rule();
LabelRule identity_rule(int num_classes);
// Merges raw_classes consecutive classes into num_classes groups:
// c -> c * num_classes / raw_classes (10 digits, 5 classes: {0,1} -> 0, ...).
LabelRule grouped_rule(int raw_classes, int num_classes);

struct BinarizedImages {
    RawImageSet images;  // dropped classes removed
    std::vector<int> preliminary;
};

BinarizedImages binarize_labels(const RawImageSet& raw, const LabelRule& rule);

// Each label independently replaced with probability delta. Two classes:
// flip; more: uniform re-draw among the other classes.
std::vector<int> apply_label_noise(std::span<const int> preliminary, double delta,
                                   std::uint64_t seed, int num_classes = 2);

// z = y with probability 1 - p, otherwise the succeeding class (y + 1) mod C.
std::vector<int> assign_spurious_code(std::span<const int> labels, double p_spurious,
                                      std::uint64_t seed, int num_classes = 2);

// --- rendering ------------------------------------------------------------

inline constexpr std::size_t kGreenChannel = 0;
inline constexpr std::size_t kRedChannel = 1;

// Two-channel (green, red) image, channel-major, scaled to [0, 1]. z = 1 is
// red, z = 0 is green.
std::vector<double> render_color(std::span<const std::uint8_t> gray, int z);

inline constexpr std::size_t kPatchSize = 5;

// Copy of a channels x height x width image with a 5x5 black patch in the
// top-left (z = 0) or top-right (z = 1) corner of every channel.
std::vector<std::uint8_t> render_patch(std::span<const std::uint8_t> image, std::size_t channels,
                                       std::size_t height, std::size_t width, int z);

// Channel count of the multi-class palette: one intensity channel plus
// ceil(log2 C) code channels.
std::size_t palette_channels(int num_classes);

// Multi-class coloring. Channel 0 always carries the digit, channel j >= 1
// carries it iff bit j-1 of the color index is set.
std::vector<double> render_palette(std::span<const std::uint8_t> gray, int color, int num_classes);

// Train and test use the same law with their own flip probability: own
// class color with probability 1 - p, else the succeeding class's color.
std::vector<int> multiclass_colorize(std::span<const int> labels, double p_spurious,
                                     int num_classes, EnvRole role, std::uint64_t seed);

// --- client layouts -------------------------------------------------------

struct ClientSpecs {
    std::vector<EnvSpec> train;
    EnvSpec test;
};

struct ClientSpecOptions {
    double p_min = 0.1;
    double p_max = 0.3;
    double delta = 0.25;
    double p_test = 0.9;
    std::size_t train_pool = 60000;
    std::size_t test_samples = 10000;
    std::vector<std::size_t> uneven_sizes;  // explicit N_k, must sum to train_pool
};

// Train p_k spaced evenly from p_max down to p_min; equal N_k by default.
ClientSpecs make_client_specs(std::size_t n_clients, const ClientSpecOptions& options = {});

// The two-client benchmark: p = (0.2, 0.1), test 0.9, delta 0.25.
ClientSpecs standard_benchmark_specs(std::size_t samples_per_client, std::size_t test_samples);

// --- synthetic structural equation model ---------------------------------

struct SemOptions {
    std::size_t causal_dims = 5;
    std::size_t spurious_dims = 5;
    std::size_t noise_dims = 0;
    // Causal features are clean_label * causal_signal + (1 - causal_signal) * noise.
    double causal_signal = 0.5;
    // Spurious features are z * spurious_signal + (1 - spurious_signal) * noise;
    // noise is U(0,1), or U(-1,1) when centered.
    double spurious_signal = 1.0;
    // Map every block to [-1, 1] (label/code as -1/+1, noise as U(-1,1)).
    bool centered = false;
};

SpuriousDataset synth_sem_generate(const EnvSpec& spec, const SemOptions& options,
                                   std::uint64_t seed);

// --- image pipelines ------------------------------------------------------

enum class SpuriousMechanism { Color, Patch, Palette };

// Builds one environment from raw images already binarized/filtered.
// source_indices selects the images that belong to this environment.
SpuriousDataset build_image_environment(const BinarizedImages& source,
                                        std::span<const std::size_t> source_indices,
                                        const EnvSpec& spec, SpuriousMechanism mechanism,
                                        int num_classes, std::uint64_t seed);

// Disjoint contiguous index ranges covering [0, pool) with the given sizes.
std::vector<std::vector<std::size_t>> partition_indices(std::size_t pool,
                                                        std::span<const std::size_t> sizes,
                                                        std::uint64_t shuffle_seed);

// --- binary cache ---------------------------------------------------------
// Layout (little-endian): "FLGD" magic, u32 version, u64 n, u64 d, u32 C,
// n*d float64 row-major inputs, n label bytes, n preliminary bytes, n
// spurious bytes, then the EnvSpec (i32 id, f64 delta, f64 p, u8 role).

inline constexpr std::uint32_t kCacheVersion = 1;

std::vector<std::uint8_t> encode_dataset(const SpuriousDataset& data);
SpuriousDataset decode_dataset(std::span<const std::uint8_t> bytes);
void save_dataset(const SpuriousDataset& data, const std::filesystem::path& path);
SpuriousDataset load_dataset(const std::filesystem::path& path);

}  // namespace flgames
