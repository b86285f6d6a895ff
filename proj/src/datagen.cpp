#include "flgames/datagen.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numeric>
#include <string>

#include "flgames/errors.hpp"
#include "flgames/rng.hpp"

namespace flgames {

namespace {

void require_probability(double p, const char* name) {
    if (!(p >= 0.0 && p <= 1.0)) {
        throw ConfigError(std::string(name) + " must lie in [0, 1], got " + std::to_string(p));
    }
}

// Stream tags keep the random draws of each pipeline stage independent.
constexpr std::uint64_t kNoiseStream = 1;
constexpr std::uint64_t kSpuriousStream = 2;
constexpr std::uint64_t kFeatureStream = 3;
constexpr std::uint64_t kLabelStream = 4;

}  // namespace

void EnvSpec::validate() const {
    require_probability(delta, "delta");
    require_probability(p_spurious, "p_spurious");
    if (n_samples == 0) throw ConfigError("EnvSpec: n_samples must be positive");
}

void SpuriousDataset::validate() const {
    const std::size_t n = labels.size();
    if (inputs.rows() != n || preliminary.size() != n || spurious.size() != n) {
        throw ShapeError("SpuriousDataset: inputs/labels/preliminary/spurious lengths differ");
    }
    for (std::size_t i = 0; i < n; ++i) {
        if (labels[i] < 0 || labels[i] >= num_classes || spurious[i] < 0 ||
            spurious[i] >= num_classes || preliminary[i] < 0 || preliminary[i] >= num_classes) {
            throw LabelError("SpuriousDataset: class index out of range at row " + std::to_string(i));
        }
    }
}

SpuriousDataset SpuriousDataset::slice(std::size_t begin, std::size_t count) const {
    if (begin + count > size()) throw ShapeError("SpuriousDataset::slice out of range");
    SpuriousDataset out;
    const std::size_t d = dim();
    std::vector<double> values(inputs.values().begin() + static_cast<std::ptrdiff_t>(begin * d),
                               inputs.values().begin() + static_cast<std::ptrdiff_t>((begin + count) * d));
    out.inputs = Matrix(count, d, std::move(values));
    auto sub = [&](const std::vector<int>& v) {
        return std::vector<int>(v.begin() + static_cast<std::ptrdiff_t>(begin),
                                v.begin() + static_cast<std::ptrdiff_t>(begin + count));
    };
    out.labels = sub(labels);
    out.preliminary = sub(preliminary);
    out.spurious = sub(spurious);
    out.num_classes = num_classes;
    out.provenance = provenance;
    out.provenance.n_samples = count;
    return out;
}

LabelRule mnist_binary_rule() {
    LabelRule rule;
    for (int digit = 0; digit < 10; ++digit) rule.mapping.emplace_back(digit < 5 ? 0 : 1);
    return rule;
}

LabelRule fashion_binary_rule() {
    // 0 t-shirt, 1 trouser, 2 pullover, 3 dress, 4 coat, 5 sandal, 6 shirt,
    // 7 sneaker, 8 bag, 9 ankle boot. Bag belongs to neither group.
    LabelRule rule;
    rule.mapping = {0, 0, 0, 0, 0, 1, 0, 1, std::nullopt, 1};
    return rule;
}

LabelRule cifar_binary_rule() {
    // 0 airplane, 1 automobile, 2 bird, 3 cat, 4 deer, 5 dog, 6 frog, 7 horse,
    // 8 ship, 9 truck. Frog is discarded to balance the two groups.
    LabelRule rule;
    rule.mapping = {0, 0, 1, 1, 1, 1, std::nullopt, 1, 0, 0};
    return rule;
}

LabelRule identity_rule(int num_classes) {
    if (num_classes < 2) throw ConfigError("identity_rule: need at least 2 classes");
    LabelRule rule;
    rule.num_classes = num_classes;
    for (int c = 0; c < num_classes; ++c) rule.mapping.emplace_back(c);
    return rule;
}

LabelRule grouped_rule(int raw_classes, int num_classes) {
    if (num_classes < 2 || raw_classes < num_classes) {
        throw ConfigError("grouped_rule: need 2 <= num_classes <= raw_classes");
    }
    LabelRule rule;
    rule.num_classes = num_classes;
    for (int c = 0; c < raw_classes; ++c) rule.mapping.emplace_back(c * num_classes / raw_classes);
    return rule;
}

BinarizedImages binarize_labels(const RawImageSet& raw, const LabelRule& rule) {
    BinarizedImages out;
    out.images.channels = raw.channels;
    out.images.height = raw.height;
    out.images.width = raw.width;
    for (std::size_t i = 0; i < raw.count; ++i) {
        const std::uint8_t cls = raw.labels[i];
        if (cls >= rule.mapping.size()) {
            throw LabelError("binarize_labels: class " + std::to_string(cls) + " not covered by rule");
        }
        const auto& target = rule.mapping[cls];
        if (!target) continue;
        if (*target < 0 || *target >= rule.num_classes) {
            throw LabelError("binarize_labels: rule maps to invalid label " + std::to_string(*target));
        }
        auto img = raw.image(i);
        out.images.pixels.insert(out.images.pixels.end(), img.begin(), img.end());
        out.images.labels.push_back(cls);
        out.preliminary.push_back(*target);
    }
    out.images.count = out.preliminary.size();
    return out;
}

std::vector<int> apply_label_noise(std::span<const int> preliminary, double delta,
                                   std::uint64_t seed, int num_classes) {
    require_probability(delta, "delta");
    if (num_classes < 2) throw ConfigError("apply_label_noise: need at least 2 classes");
    Rng rng(derive_seed(seed, kNoiseStream));
    std::vector<int> out(preliminary.begin(), preliminary.end());
    for (int& y : out) {
        if (!rng.bernoulli(delta)) continue;
        if (num_classes == 2) {
            y = 1 - y;
        } else {
            const int shift = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(num_classes - 1)));
            y = (y + shift) % num_classes;
        }
    }
    return out;
}

std::vector<int> assign_spurious_code(std::span<const int> labels, double p_spurious,
                                      std::uint64_t seed, int num_classes) {
    require_probability(p_spurious, "p_spurious");
    if (num_classes < 2) throw ConfigError("assign_spurious_code: need at least 2 classes");
    Rng rng(derive_seed(seed, kSpuriousStream));
    std::vector<int> z(labels.begin(), labels.end());
    for (int& v : z) {
        if (rng.bernoulli(p_spurious)) v = (v + 1) % num_classes;
    }
    return z;
}

std::vector<double> render_color(std::span<const std::uint8_t> gray, int z) {
    if (z != 0 && z != 1) throw LabelError("render_color: z must be 0 or 1");
    const std::size_t n = gray.size();
    std::vector<double> out(2 * n, 0.0);
    const std::size_t channel = (z == 1) ? kRedChannel : kGreenChannel;
    for (std::size_t i = 0; i < n; ++i) out[channel * n + i] = gray[i] / 255.0;
    return out;
}

std::vector<std::uint8_t> render_patch(std::span<const std::uint8_t> image, std::size_t channels,
                                       std::size_t height, std::size_t width, int z) {
    if (z != 0 && z != 1) throw LabelError("render_patch: z must be 0 or 1");
    if (height < kPatchSize || width < kPatchSize) {
        throw ShapeError("render_patch: image smaller than the 5x5 patch");
    }
    if (image.size() != channels * height * width) throw ShapeError("render_patch: image size mismatch");
    std::vector<std::uint8_t> out(image.begin(), image.end());
    const std::size_t col0 = (z == 0) ? 0 : width - kPatchSize;
    for (std::size_t c = 0; c < channels; ++c) {
        for (std::size_t r = 0; r < kPatchSize; ++r) {
            for (std::size_t k = 0; k < kPatchSize; ++k) {
                out[(c * height + r) * width + col0 + k] = 0;
            }
        }
    }
    return out;
}

std::size_t palette_channels(int num_classes) {
    if (num_classes < 2) throw ConfigError("palette_channels: need at least 2 classes");
    const auto bits = std::bit_width(static_cast<unsigned>(num_classes - 1));
    return 1 + static_cast<std::size_t>(bits);
}

std::vector<double> render_palette(std::span<const std::uint8_t> gray, int color, int num_classes) {
    if (color < 0 || color >= num_classes) throw LabelError("render_palette: color out of range");
    const std::size_t channels = palette_channels(num_classes);
    const std::size_t n = gray.size();
    std::vector<double> out(channels * n, 0.0);
    for (std::size_t c = 0; c < channels; ++c) {
        const bool lit = (c == 0) || ((static_cast<unsigned>(color) >> (c - 1)) & 1U);
        if (!lit) continue;
        for (std::size_t i = 0; i < n; ++i) out[c * n + i] = gray[i] / 255.0;
    }
    return out;
}

std::vector<int> multiclass_colorize(std::span<const int> labels, double p_spurious,
                                     int num_classes, EnvRole role, std::uint64_t seed) {
    if (num_classes < 2) throw ConfigError("multiclass_colorize: need at least 2 classes");
    require_probability(p_spurious, "p_spurious");
    for (int y : labels) {
        if (y < 0 || y >= num_classes) throw LabelError("multiclass_colorize: label out of range");
    }
    (void)role;
    return assign_spurious_code(labels, p_spurious, seed, num_classes);
}

ClientSpecs make_client_specs(std::size_t n_clients, const ClientSpecOptions& options) {
    if (n_clients == 0) throw ConfigError("make_client_specs: need at least one client");
    require_probability(options.p_min, "p_min");
    require_probability(options.p_max, "p_max");
    require_probability(options.delta, "delta");
    require_probability(options.p_test, "p_test");
    if (options.p_min > options.p_max) throw ConfigError("make_client_specs: p_min > p_max");

    std::vector<std::size_t> sizes;
    if (!options.uneven_sizes.empty()) {
        if (options.uneven_sizes.size() != n_clients) {
            throw ConfigError("make_client_specs: uneven_sizes must list one size per client");
        }
        const auto total = std::accumulate(options.uneven_sizes.begin(), options.uneven_sizes.end(),
                                           std::size_t{0});
        if (total != options.train_pool) {
            throw ConfigError("make_client_specs: uneven_sizes must sum to train_pool");
        }
        sizes = options.uneven_sizes;
    } else {
        if (options.train_pool < n_clients) throw ConfigError("make_client_specs: pool smaller than client count");
        const std::size_t base = options.train_pool / n_clients;
        const std::size_t extra = options.train_pool % n_clients;
        for (std::size_t k = 0; k < n_clients; ++k) sizes.push_back(base + (k < extra ? 1 : 0));
    }

    ClientSpecs specs;
    for (std::size_t k = 0; k < n_clients; ++k) {
        EnvSpec spec;
        spec.client_id = static_cast<int>(k);
        spec.delta = options.delta;
        if (n_clients == 1) {
            spec.p_spurious = options.p_max;
        } else {
            const double frac = static_cast<double>(k) / static_cast<double>(n_clients - 1);
            spec.p_spurious = options.p_max - frac * (options.p_max - options.p_min);
        }
        spec.n_samples = sizes[k];
        spec.role = EnvRole::Train;
        spec.validate();
        specs.train.push_back(spec);
    }
    specs.test.client_id = static_cast<int>(n_clients);
    specs.test.delta = options.delta;
    specs.test.p_spurious = options.p_test;
    specs.test.n_samples = options.test_samples;
    specs.test.role = EnvRole::Test;
    specs.test.validate();
    return specs;
}

ClientSpecs standard_benchmark_specs(std::size_t samples_per_client, std::size_t test_samples) {
    ClientSpecOptions options;
    options.p_min = 0.1;
    options.p_max = 0.2;
    options.train_pool = 2 * samples_per_client;
    options.test_samples = test_samples;
    return make_client_specs(2, options);
}

SpuriousDataset synth_sem_generate(const EnvSpec& spec, const SemOptions& options,
                                   std::uint64_t seed) {
    spec.validate();
    require_probability(options.causal_signal, "causal_signal");
    require_probability(options.spurious_signal, "spurious_signal");
    const std::size_t n = spec.n_samples;
    const std::size_t d = options.causal_dims + options.spurious_dims + options.noise_dims;
    if (d == 0) throw ConfigError("synth_sem_generate: zero feature dims");

    SpuriousDataset data;
    data.num_classes = 2;
    data.provenance = spec;
    data.preliminary.resize(n);
    Rng label_rng(derive_seed(seed, kLabelStream));
    for (auto& y : data.preliminary) y = label_rng.bernoulli(0.5) ? 1 : 0;
    data.labels = apply_label_noise(data.preliminary, spec.delta, seed, 2);
    data.spurious = assign_spurious_code(data.labels, spec.p_spurious, seed, 2);

    data.inputs = Matrix(n, d);
    Rng feature_rng(derive_seed(seed, kFeatureStream));
    for (std::size_t i = 0; i < n; ++i) {
        auto row = data.inputs.row(i);
        std::size_t c = 0;
        const double lo = options.centered ? -1.0 : 0.0;
        const double clean = data.preliminary[i] ? 1.0 : lo;
        const double code = data.spurious[i] ? 1.0 : lo;
        auto noise = [&] { return feature_rng.uniform(lo, 1.0); };
        for (std::size_t j = 0; j < options.causal_dims; ++j, ++c) {
            row[c] = clean * options.causal_signal + (1.0 - options.causal_signal) * noise();
        }
        for (std::size_t j = 0; j < options.spurious_dims; ++j, ++c) {
            row[c] = code * options.spurious_signal + (1.0 - options.spurious_signal) * noise();
        }
        for (std::size_t j = 0; j < options.noise_dims; ++j, ++c) row[c] = noise();
    }
    return data;
}

std::vector<std::vector<std::size_t>> partition_indices(std::size_t pool,
                                                        std::span<const std::size_t> sizes,
                                                        std::uint64_t shuffle_seed) {
    const auto total = std::accumulate(sizes.begin(), sizes.end(), std::size_t{0});
    if (total != pool) throw ConfigError("partition_indices: sizes must exhaust the pool");
    std::vector<std::size_t> order(pool);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(shuffle_seed);
    rng.shuffle(order.begin(), order.end());
    std::vector<std::vector<std::size_t>> parts;
    std::size_t offset = 0;
    for (auto s : sizes) {
        parts.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(offset),
                           order.begin() + static_cast<std::ptrdiff_t>(offset + s));
        offset += s;
    }
    return parts;
}

SpuriousDataset build_image_environment(const BinarizedImages& source,
                                        std::span<const std::size_t> source_indices,
                                        const EnvSpec& spec, SpuriousMechanism mechanism,
                                        int num_classes, std::uint64_t seed) {
    require_probability(spec.delta, "delta");
    require_probability(spec.p_spurious, "p_spurious");
    const auto& img = source.images;
    const std::size_t n = source_indices.size();
    if (n == 0) throw ConfigError("build_image_environment: no images selected");

    SpuriousDataset data;
    data.num_classes = num_classes;
    data.provenance = spec;
    data.provenance.n_samples = n;
    data.preliminary.reserve(n);
    for (auto idx : source_indices) {
        if (idx >= img.count) throw ShapeError("build_image_environment: index out of range");
        data.preliminary.push_back(source.preliminary[idx]);
    }
    data.labels = apply_label_noise(data.preliminary, spec.delta, seed, num_classes);
    if (mechanism == SpuriousMechanism::Palette) {
        data.spurious = multiclass_colorize(data.labels, spec.p_spurious, num_classes, spec.role, seed);
    } else {
        if (num_classes != 2) throw ConfigError("color/patch mechanisms are binary only");
        data.spurious = assign_spurious_code(data.labels, spec.p_spurious, seed, 2);
    }

    std::size_t d = 0;
    switch (mechanism) {
        case SpuriousMechanism::Color:
            if (img.channels != 1) throw ShapeError("color mechanism needs grayscale images");
            d = 2 * img.image_size();
            break;
        case SpuriousMechanism::Patch:
            d = img.image_size();
            break;
        case SpuriousMechanism::Palette:
            if (img.channels != 1) throw ShapeError("palette mechanism needs grayscale images");
            d = palette_channels(num_classes) * img.image_size();
            break;
    }
    data.inputs = Matrix(n, d);
    for (std::size_t i = 0; i < n; ++i) {
        auto pixels = img.image(source_indices[i]);
        auto row = data.inputs.row(i);
        std::vector<double> rendered;
        switch (mechanism) {
            case SpuriousMechanism::Color:
                rendered = render_color(pixels, data.spurious[i]);
                break;
            case SpuriousMechanism::Patch: {
                auto patched = render_patch(pixels, img.channels, img.height, img.width, data.spurious[i]);
                rendered.resize(patched.size());
                for (std::size_t k = 0; k < patched.size(); ++k) rendered[k] = patched[k] / 255.0;
                break;
            }
            case SpuriousMechanism::Palette:
                rendered = render_palette(pixels, data.spurious[i], num_classes);
                break;
        }
        std::copy(rendered.begin(), rendered.end(), row.begin());
    }
    return data;
}

}  // namespace flgames
