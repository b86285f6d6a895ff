#include <cmath>
#include <filesystem>
#include <numeric>
#include <vector>

#include "doctest.h"
#include "flgames/datagen.hpp"
#include "flgames/errors.hpp"

using namespace flgames;

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>(v >> s));
}

std::vector<std::uint8_t> idx_images(std::uint32_t n, std::uint32_t h, std::uint32_t w) {
    std::vector<std::uint8_t> out{0, 0, 8, 3};
    put_u32(out, n);
    put_u32(out, h);
    put_u32(out, w);
    for (std::uint32_t i = 0; i < n * h * w; ++i) out.push_back(static_cast<std::uint8_t>(i % 251));
    return out;
}

std::vector<std::uint8_t> idx_labels(std::uint32_t n) {
    std::vector<std::uint8_t> out{0, 0, 8, 1};
    put_u32(out, n);
    for (std::uint32_t i = 0; i < n; ++i) out.push_back(static_cast<std::uint8_t>(i % 10));
    return out;
}

double rate(const std::vector<int>& a, const std::vector<int>& b) {
    std::size_t diff = 0;
    for (std::size_t i = 0; i < a.size(); ++i) diff += a[i] != b[i];
    return static_cast<double>(diff) / static_cast<double>(a.size());
}

std::vector<int> balanced(std::size_t n) {
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) y[i] = static_cast<int>(i % 2);
    return y;
}

}  // namespace

TEST_CASE("IDX parsing") {
    const auto img = idx_images(60000, 28, 28);
    const auto lab = idx_labels(60000);
    const auto set = parse_idx(img, lab);
    CHECK(set.count == 60000);
    CHECK(set.height == 28);
    CHECK(set.width == 28);
    CHECK(set.labels[7] == 7);
    CHECK(set.image(1)[0] == static_cast<std::uint8_t>(784 % 251));

    const auto small = parse_idx(idx_images(10000, 2, 2), idx_labels(10000));
    CHECK(small.labels.size() == 10000);

    auto bad = idx_images(2, 2, 2);
    bad[3] = 2;
    CHECK_THROWS_AS(parse_idx(bad, idx_labels(2)), FormatError);
    CHECK_THROWS_AS(parse_idx(idx_images(2, 2, 2), idx_labels(3)), LengthError);
    auto truncated = idx_images(2, 2, 2);
    truncated.pop_back();
    CHECK_THROWS_AS(parse_idx(truncated, idx_labels(2)), LengthError);
}

TEST_CASE("CIFAR-10 batches") {
    std::vector<std::uint8_t> bytes;
    for (int r = 0; r < 2; ++r) {
        bytes.push_back(static_cast<std::uint8_t>(6 + r));
        for (int i = 0; i < 3072; ++i) bytes.push_back(static_cast<std::uint8_t>(r));
    }
    const auto set = parse_cifar10(bytes);
    CHECK(set.count == 2);
    CHECK(set.channels == 3);
    CHECK(set.labels[1] == 7);
    bytes.pop_back();
    CHECK_THROWS_AS(parse_cifar10(bytes), LengthError);
}

TEST_CASE("label rules") {
    RawImageSet raw;
    raw.count = 10;
    raw.height = raw.width = 1;
    raw.pixels.assign(10, 0);
    for (int c = 0; c < 10; ++c) raw.labels.push_back(static_cast<std::uint8_t>(c));

    const auto mnist = binarize_labels(raw, mnist_binary_rule());
    CHECK(mnist.preliminary[3] == 0);
    CHECK(mnist.preliminary[7] == 1);
    CHECK(mnist.preliminary[4] == 0);
    CHECK(mnist.preliminary[5] == 1);

    // Fashion: sneaker (7) is footwear -> 1.
    const auto fashion = binarize_labels(raw, fashion_binary_rule());
    const auto sneaker = std::find(fashion.images.labels.begin(), fashion.images.labels.end(), 7);
    REQUIRE(sneaker != fashion.images.labels.end());
    CHECK(fashion.preliminary[sneaker - fashion.images.labels.begin()] == 1);

    const auto cifar = binarize_labels(raw, cifar_binary_rule());
    CHECK(cifar.images.count == 9);
    CHECK(std::find(cifar.images.labels.begin(), cifar.images.labels.end(), 6) == cifar.images.labels.end());

    const auto five = grouped_rule(10, 5);
    CHECK(*five.mapping[0] == 0);
    CHECK(*five.mapping[1] == 0);
    CHECK(*five.mapping[9] == 4);
    CHECK_THROWS_AS(grouped_rule(10, 11), ConfigError);
    CHECK_THROWS_AS(identity_rule(1), ConfigError);

    raw.labels[0] = 12;
    CHECK_THROWS_AS(binarize_labels(raw, mnist_binary_rule()), LabelError);
}

TEST_CASE("label noise") {
    const auto y = balanced(100000);
    CHECK(apply_label_noise(y, 0.0, 1) == y);
    const auto flipped = apply_label_noise(y, 1.0, 1);
    for (std::size_t i = 0; i < y.size(); ++i) CHECK(flipped[i] == 1 - y[i]);
    CHECK(std::abs(rate(apply_label_noise(y, 0.25, 3), y) - 0.25) < 0.005);
    CHECK(apply_label_noise(y, 0.25, 3) == apply_label_noise(y, 0.25, 3));

    std::vector<int> multi(30000);
    for (std::size_t i = 0; i < multi.size(); ++i) multi[i] = static_cast<int>(i % 10);
    const auto noisy = apply_label_noise(multi, 1.0, 4, 10);
    for (std::size_t i = 0; i < multi.size(); ++i) {
        CHECK(noisy[i] != multi[i]);
        CHECK(noisy[i] >= 0);
        CHECK(noisy[i] < 10);
    }
    CHECK_THROWS_AS(apply_label_noise(y, 1.5, 1), ConfigError);
}

TEST_CASE("spurious codes") {
    const auto y = balanced(100000);
    CHECK(assign_spurious_code(y, 0.0, 1) == y);
    const auto z1 = assign_spurious_code(y, 1.0, 1);
    for (std::size_t i = 0; i < y.size(); ++i) CHECK(z1[i] == 1 - y[i]);
    CHECK(std::abs(rate(assign_spurious_code(y, 0.2, 9), y) - 0.2) < 0.005);
}

TEST_CASE("color rendering") {
    const std::vector<std::uint8_t> gray{0, 51, 255, 102};
    const auto green = render_color(gray, 0);
    const auto red = render_color(gray, 1);
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(green[kRedChannel * 4 + i] == 0.0);
        CHECK(red[kGreenChannel * 4 + i] == 0.0);
    }
    const double gsum = std::accumulate(gray.begin(), gray.end(), 0.0) / 255.0;
    CHECK(std::accumulate(green.begin(), green.end(), 0.0) == doctest::Approx(gsum));
    CHECK(std::accumulate(red.begin(), red.end(), 0.0) == doctest::Approx(gsum));
    CHECK_THROWS_AS(render_color(gray, 2), LabelError);
}

TEST_CASE("patch rendering") {
    constexpr std::size_t c = 3, h = 8, w = 9;
    const std::vector<std::uint8_t> img(c * h * w, 200);
    auto at = [&](const std::vector<std::uint8_t>& v, std::size_t ch, std::size_t r, std::size_t col) {
        return v[ch * h * w + r * w + col];
    };
    const auto left = render_patch(img, c, h, w, 0);
    const auto right = render_patch(img, c, h, w, 1);
    for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t r = 0; r < 5; ++r) {
            for (std::size_t k = 0; k < 5; ++k) {
                CHECK(at(left, ch, r, k) == 0);
                CHECK(at(right, ch, r, w - 5 + k) == 0);
            }
        }
        CHECK(at(left, ch, 7, 4) == 200);
        CHECK(at(left, ch, 0, 5) == 200);
        CHECK(at(right, ch, 0, 3) == 200);
    }
    CHECK_THROWS_AS(render_patch(std::vector<std::uint8_t>(16), 1, 4, 4, 0), ShapeError);
}

TEST_CASE("palette coloring") {
    CHECK(palette_channels(2) == 2);
    CHECK(palette_channels(5) == 4);
    CHECK(palette_channels(10) == 5);
    const std::vector<std::uint8_t> gray{255, 0};
    const auto out = render_palette(gray, 5, 10);  // bits 0 and 2
    CHECK(out[0] == 1.0);
    CHECK(out[2] == 1.0);
    CHECK(out[4] == 0.0);
    CHECK(out[6] == 1.0);
    CHECK(out[8] == 0.0);

    std::vector<int> threes(50, 3);
    const auto c0 = multiclass_colorize(threes, 0.0, 10, EnvRole::Train, 1);
    for (int c : c0) CHECK(c == 3);

    std::vector<int> eights(10000, 8);
    const auto test_colors = multiclass_colorize(eights, 0.9, 10, EnvRole::Test, 2);
    const auto nines = std::count(test_colors.begin(), test_colors.end(), 9);
    CHECK(nines > 8500);

    std::vector<int> labels(100000);
    for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<int>(i % 10);
    const auto colors = multiclass_colorize(labels, 0.15, 10, EnvRole::Train, 3);
    CHECK(std::abs((1.0 - rate(colors, labels)) - 0.85) < 0.005);
}

TEST_CASE("client specs") {
    const auto standard = standard_benchmark_specs(30000, 10000);
    REQUIRE(standard.train.size() == 2);
    CHECK(standard.train[0].p_spurious == 0.2);
    CHECK(standard.train[1].p_spurious == 0.1);
    CHECK(standard.test.p_spurious == 0.9);
    CHECK(standard.test.role == EnvRole::Test);

    const auto two = make_client_specs(2);
    CHECK(two.train[0].n_samples == 30000);
    CHECK(two.train[1].n_samples == 30000);

    const auto three = make_client_specs(3);
    CHECK(three.train[0].p_spurious == doctest::Approx(0.3));
    CHECK(three.train[1].p_spurious == doctest::Approx(0.2));
    CHECK(three.train[2].p_spurious == doctest::Approx(0.1));

    ClientSpecOptions uneven;
    uneven.train_pool = 40000;
    uneven.uneven_sizes = {10000, 30000};
    CHECK(make_client_specs(2, uneven).train[1].n_samples == 30000);
    uneven.uneven_sizes = {10000, 20000};
    CHECK_THROWS_AS(make_client_specs(2, uneven), ConfigError);
    CHECK_THROWS_AS(make_client_specs(0), ConfigError);
}

TEST_CASE("synthetic SEM") {
    EnvSpec spec;
    spec.n_samples = 2000;
    spec.delta = 0.0;
    spec.p_spurious = 0.0;
    SemOptions opts;
    const auto clean = synth_sem_generate(spec, opts, 1);
    CHECK(clean.dim() == 10);
    // The spurious block alone predicts y perfectly.
    for (std::size_t i = 0; i < clean.size(); ++i) {
        CHECK((clean.inputs(i, opts.causal_dims) > 0.5) == (clean.labels[i] == 1));
    }

    spec.n_samples = 100000;
    spec.delta = 0.25;
    spec.p_spurious = 0.9;
    const auto test = synth_sem_generate(spec, opts, 2);
    std::size_t probe_hits = 0;
    std::size_t ones = 0;
    for (std::size_t i = 0; i < test.size(); ++i) {
        const int guess = test.inputs(i, opts.causal_dims) > 0.5 ? 1 : 0;
        probe_hits += guess == test.labels[i];
        ones += test.labels[i];
    }
    CHECK(std::abs(probe_hits / 100000.0 - 0.10) < 0.005);
    CHECK(std::abs(ones / 100000.0 - 0.5) < 0.01);

    opts.centered = true;
    const auto centered = synth_sem_generate(spec, opts, 2);
    CHECK(centered.labels == test.labels);
    for (double v : centered.inputs.values()) {
        CHECK(v >= -1.0);
        CHECK(v <= 1.0);
    }
    CHECK(synth_sem_generate(spec, opts, 5).inputs == synth_sem_generate(spec, opts, 5).inputs);
}

TEST_CASE("image environments and partitions") {
    RawImageSet raw;
    raw.count = 400;
    raw.height = raw.width = 6;
    raw.pixels.assign(400 * 36, 128);
    for (std::size_t i = 0; i < 400; ++i) raw.labels.push_back(static_cast<std::uint8_t>(i % 10));
    const auto source = binarize_labels(raw, mnist_binary_rule());

    const std::vector<std::size_t> sizes{100, 300};
    const auto parts = partition_indices(400, sizes, 3);
    CHECK(parts[0].size() == 100);
    std::vector<bool> seen(400, false);
    for (const auto& p : parts)
        for (auto i : p) {
            CHECK_FALSE(seen[i]);
            seen[i] = true;
        }
    CHECK_THROWS_AS(partition_indices(401, sizes, 3), ConfigError);

    EnvSpec spec;
    spec.n_samples = 100;
    spec.p_spurious = 0.0;
    spec.delta = 0.0;
    const auto env = build_image_environment(source, parts[0], spec, SpuriousMechanism::Color, 2, 4);
    CHECK(env.dim() == 72);
    for (std::size_t i = 0; i < env.size(); ++i) {
        const double red = env.inputs(i, kRedChannel * 36);
        CHECK((red > 0) == (env.labels[i] == 1));
    }
    CHECK_THROWS_AS(build_image_environment(source, parts[0], spec, SpuriousMechanism::Color, 5, 4),
                    ConfigError);
}

TEST_CASE("dataset cache round trip") {
    EnvSpec spec;
    spec.client_id = 3;
    spec.n_samples = 50;
    const auto data = synth_sem_generate(spec, SemOptions{}, 8);
    const auto back = decode_dataset(encode_dataset(data));
    CHECK(back.inputs == data.inputs);
    CHECK(back.labels == data.labels);
    CHECK(back.spurious == data.spurious);
    CHECK(back.provenance.client_id == 3);

    auto bytes = encode_dataset(data);
    bytes[0] = 'X';
    CHECK_THROWS_AS(decode_dataset(bytes), FormatError);
    bytes = encode_dataset(data);
    bytes.pop_back();
    CHECK_THROWS_AS(decode_dataset(bytes), LengthError);

    const auto path = std::filesystem::temp_directory_path() / "flgames_cache_test.flgd";
    save_dataset(data, path);
    CHECK(load_dataset(path).labels == data.labels);
    std::filesystem::remove(path);
}
