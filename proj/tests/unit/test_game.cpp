#include <cmath>
#include <memory>
#include <vector>

#include "doctest.h"
#include "flgames/errors.hpp"
#include "flgames/game.hpp"
#include "flgames/rng.hpp"

using namespace flgames;

namespace {

const std::vector<std::size_t> kHead{3, 4, 2};

Matrix random_matrix(std::size_t r, std::size_t c, std::uint64_t seed) {
    Rng rng(seed);
    Matrix m(r, c);
    for (double& v : m.values()) v = rng.uniform(-1.0, 1.0);
    return m;
}

MlpParams head(std::uint64_t seed) { return init_params(kHead, seed); }

std::vector<double> flat(const MlpParams& p) {
    std::vector<double> out;
    p.for_each_value([&](double v) { out.push_back(v); });
    return out;
}

std::shared_ptr<const SpuriousDataset> dataset(std::size_t n, std::uint64_t seed) {
    EnvSpec spec;
    spec.n_samples = n;
    SemOptions opts;
    opts.causal_dims = 2;
    opts.spurious_dims = 1;
    return std::make_shared<const SpuriousDataset>(synth_sem_generate(spec, opts, seed));
}

void check_close(const Matrix& a, const Matrix& b, double tol = 1e-12) {
    REQUIRE(a.rows() == b.rows());
    REQUIRE(a.cols() == b.cols());
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::abs(a.values()[i] - b.values()[i]) <= tol);
}

}  // namespace

TEST_CASE("ensemble logits") {
    const Representation id;
    const auto x = random_matrix(5, 3, 1);
    const auto a = head(1);
    const auto b = head(2);
    const auto c = head(3);

    check_close(ensemble_logits({&a, &a, &a}, id, x), predict(a, x));

    // Negated output layer: logits L and -L cancel.
    auto neg = a;
    for (double& w : neg.layers.back().weight.values()) w = -w;
    for (double& v : neg.layers.back().bias) v = -v;
    check_close(ensemble_logits({&a, &neg}, id, x), Matrix(5, 2));

    Matrix brute = predict(a, x);
    const auto pb = predict(b, x);
    const auto pc = predict(c, x);
    for (std::size_t i = 0; i < brute.size(); ++i) {
        brute.values()[i] = (brute.values()[i] + pb.values()[i] + pc.values()[i]) / 3.0;
    }
    check_close(ensemble_logits({&a, &b, &c}, id, x), brute);
    CHECK_THROWS_AS(ensemble_logits({}, id, x), ConfigError);
}

TEST_CASE("smoothed ensemble logits") {
    const Representation id;
    const auto x = random_matrix(4, 3, 2);
    const auto w1 = head(1);
    const auto w2 = head(2);

    SUBCASE("empty buffers reduce to the plain mean") {
        EnsembleView v{&w1, {&w2}, {}, 2};
        check_close(smoothed_ensemble_logits(v, id, x), ensemble_logits({&w1, &w2}, id, x));
    }
    SUBCASE("single client") {
        EnsembleView v{&w1, {}, {}, 1};
        check_close(smoothed_ensemble_logits(v, id, x), predict(w1, x));
    }
    SUBCASE("opponent buffer holding two past models") {
        const auto old1 = head(11);
        const auto old2 = head(12);
        ParamBuffer buf(5);
        buf.push(old1);
        buf.push(old2);
        const auto avg = buffer_average(buf);
        EnsembleView v{&w1, {&w2}, {&avg}, 2};
        const auto got = smoothed_ensemble_logits(v, id, x);
        // (w1 + w2 + (old1 + old2)/2) / 2, the average taken on parameters.
        auto mid = old1;
        mid.add_scaled(old2, 1.0);
        mid.scale(0.5);
        const auto l1 = predict(w1, x), l2 = predict(w2, x), lm = predict(mid, x);
        Matrix expected(4, 2);
        for (std::size_t i = 0; i < expected.size(); ++i) {
            expected.values()[i] = (l1.values()[i] + l2.values()[i] + lm.values()[i]) / 2.0;
        }
        check_close(got, expected);
    }
    SUBCASE("view errors") {
        EnsembleView v{nullptr, {}, {}, 1};
        CHECK_THROWS_AS(smoothed_ensemble_logits(v, id, x), ConfigError);
        EnsembleView z{&w1, {}, {}, 0};
        CHECK_THROWS_AS(smoothed_ensemble_logits(z, id, x), ConfigError);
    }
}

TEST_CASE("local objective") {
    const Representation id;
    Batch batch{random_matrix(6, 3, 3), {0, 1, 1, 0, 1, 0}};
    auto cand = head(1);
    auto opp = head(2);
    const auto buf_avg = head(3);
    EnsembleView view{&cand, {&opp}, {&buf_avg}, 2};

    SUBCASE("candidate gradient matches central differences") {
        const auto grad = flat(local_objective(view, id, batch).grad);
        std::size_t i = 0;
        double worst = 0.0;
        constexpr double h = 1e-6;
        cand.for_each_value([&](double& v) {
            const double s = v;
            v = s + h;
            const double up = softmax_cross_entropy(smoothed_ensemble_logits(view, id, batch.inputs), batch.labels).loss;
            v = s - h;
            const double dn = softmax_cross_entropy(smoothed_ensemble_logits(view, id, batch.inputs), batch.labels).loss;
            v = s;
            const double n = (up - dn) / (2 * h);
            worst = std::max(worst, std::abs(grad[i] - n) / std::max({std::abs(grad[i]), std::abs(n), 1e-6}));
            ++i;
        });
        CHECK(worst < 1e-4);
    }
    SUBCASE("gradient has the candidate's shape only and depends on opponents") {
        const auto g = local_objective(view, id, batch).grad;
        CHECK(g.same_shape(cand));
        opp.layers[0].weight(0, 0) += 1.0;
        CHECK_FALSE(local_objective(view, id, batch).grad == g);
    }
    SUBCASE("single client reduces to plain cross-entropy") {
        EnsembleView solo{&cand, {}, {}, 1};
        const auto fwd = forward(cand, batch.inputs);
        const auto plain = backward(cand, fwd.cache, softmax_cross_entropy(fwd.output, batch.labels).dlogits).grad;
        CHECK(local_objective(solo, id, batch).grad == plain);
    }
}

TEST_CASE("parameter buffer") {
    const auto a = head(1);
    const auto b = head(2);
    ParamBuffer buf(5);
    CHECK_THROWS_AS(buffer_average(buf), EmptyBufferError);
    buf.push(a);
    CHECK(buffer_average(buf) == a);
    buf.push(b);
    const auto avg = flat(buffer_average(buf));
    const auto fa = flat(a), fb = flat(b);
    for (std::size_t i = 0; i < avg.size(); ++i) CHECK(avg[i] == doctest::Approx((fa[i] + fb[i]) / 2));

    SUBCASE("capacity 5, 7 pushes keep 3..7") {
        ParamBuffer fifo(5);
        std::vector<MlpParams> pushed;
        for (int i = 1; i <= 7; ++i) {
            pushed.push_back(head(100 + i));
            fifo.push(pushed.back());
        }
        REQUIRE(fifo.size() == 5);
        for (int i = 0; i < 5; ++i) CHECK(fifo.items()[i] == pushed[2 + i]);
    }
    SUBCASE("running sum survives many evictions") {
        ParamBuffer fifo(4);
        Rng rng(9);
        for (int i = 0; i < 1000; ++i) {
            auto p = head(1);
            p.for_each_value([&](double& v) { v = rng.uniform(-10, 10); });
            fifo.push(p);
        }
        const auto inc = flat(fifo.running_sum());
        const auto ref = flat(fifo.recompute_sum());
        for (std::size_t i = 0; i < inc.size(); ++i) CHECK(std::abs(inc[i] - ref[i]) < 1e-9);
    }
    CHECK_THROWS_AS(ParamBuffer(0), ConfigError);
    ParamBuffer shaped(2);
    shaped.push(a);
    CHECK_THROWS_AS(shaped.push(init_params(std::vector<std::size_t>{2, 2}, 1)), ShapeError);
}

TEST_CASE("batch sampler") {
    CHECK(batches_per_epoch(60000, 256) == 234);
    CHECK(batches_per_epoch(10, 256) == 1);
    BatchSampler s(10, 4, 1);
    CHECK(s.batches_per_epoch() == 2);
    std::vector<int> seen(10, 0);
    for (int i = 0; i < 2; ++i)
        for (auto r : s.next()) seen[r]++;
    for (int c : seen) CHECK(c <= 1);
    BatchSampler a(50, 8, 3), b(50, 8, 3);
    for (int i = 0; i < 20; ++i) CHECK(a.next() == b.next());
    BatchSampler small(3, 8, 1);
    CHECK(small.next().size() == 3);
}

TEST_CASE("predictor updates") {
    const Representation id;
    auto data = dataset(512, 4);
    auto client = make_client(0, head(5), data, 5, 256, AdamHyper{1e-2}, 6);
    PredictorSettings settings;
    settings.smooth = true;
    settings.learning_rate = 1e-2;

    SUBCASE("one step per update, buffer grows to capacity") {
        for (int i = 1; i <= 7; ++i) {
            predictor_update(client, id, settings, 1);
            CHECK(client.optimizer.step == static_cast<std::uint64_t>(i));
            CHECK(client.buffer.size() == static_cast<std::size_t>(std::min(i, 5)));
        }
        CHECK(client.buffer.items().back() == client.predictor);
    }
    SUBCASE("non-smooth updates leave the buffer empty") {
        settings.smooth = false;
        predictor_update(client, id, settings, 1);
        CHECK(client.buffer.empty());
    }
    SUBCASE("exact best response step counts") {
        CHECK(exact_best_response_steps(100.0, 2) == 2);
        CHECK(exact_best_response_steps(50.0, 2) == 1);
        CHECK(exact_best_response_steps(1.0, 2) == 1);
        CHECK_THROWS_AS(exact_best_response_steps(0.0, 2), ConfigError);
        exact_predictor_update(client, id, settings, 1, 100.0);
        CHECK(client.optimizer.step == 2);
    }
    SUBCASE("one batch worth equals a single local step") {
        auto twin = make_client(0, head(5), data, 5, 256, AdamHyper{1e-2}, 6);
        exact_predictor_update(client, id, settings, 1, 50.0);
        predictor_update(twin, id, settings, 1);
        CHECK(client.predictor == twin.predictor);
    }
    SUBCASE("small SGD step on a linear head does not increase the batch loss") {
        const std::vector<std::size_t> lin{3, 2};
        auto linear = make_client(0, init_params(lin, 7), data, 5, 512, AdamHyper{}, 8);
        settings.optimizer = OptimizerKind::Sgd;
        settings.learning_rate = 1e-3;
        settings.smooth = false;
        const Batch all = gather_batch(*data, BatchSampler(512, 512, 8).next());
        const double before = softmax_cross_entropy(predict(linear.predictor, all.inputs), all.labels).loss;
        predictor_update(linear, id, settings, 1);
        const double after = softmax_cross_entropy(predict(linear.predictor, all.inputs), all.labels).loss;
        CHECK(after <= before);
    }
    SUBCASE("own predictor in P_k is rejected") {
        client.opponents.emplace(0, OpponentCopy{std::make_shared<const MlpParams>(head(1)), nullptr});
        CHECK_THROWS_AS(predictor_update(client, id, settings, 2), ConfigError);
    }
}

TEST_CASE("view divisor") {
    auto client = make_client(0, head(5), dataset(32, 1), 5, 16, AdamHyper{}, 1);
    client.opponents.emplace(1, OpponentCopy{std::make_shared<const MlpParams>(head(1)),
                                             std::make_shared<const MlpParams>(head(2))});
    PredictorSettings s;
    s.smooth = true;
    auto v = make_view(client, s, 2);
    CHECK(v.divisor == 2);
    CHECK(v.opponent_buffer_averages.size() == 1);
    s.divisor = EnsembleDivisor::TermCount;
    CHECK(make_view(client, s, 2).divisor == 3);
    s.smooth = false;
    CHECK(make_view(client, s, 2).opponent_buffer_averages.empty());
}

TEST_CASE("representation") {
    Representation id;
    CHECK(id.is_identity());
    CHECK_THROWS_AS(id.net(), VariantError);
    const auto x = random_matrix(2, 3, 1);
    CHECK(id.apply(x) == x);
    const std::vector<std::size_t> dims{3, 4};
    Representation phi(init_params(dims, 1, Activation::Elu));
    CHECK(phi.apply(x).cols() == 4);
}
