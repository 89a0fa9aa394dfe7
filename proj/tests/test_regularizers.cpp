// SPDX-License-Identifier: Apache-2.0
//
// KL regularizers: values, analytic gradients, running means.

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "reuseflow/regularizers.hpp"
#include "reuseflow/rng.hpp"

using namespace rf;

namespace {

std::vector<double> random_vec(std::size_t n, GaussianRng& rng, double scale = 1.0) {
    std::vector<double> v(n);
    for (auto& x : v) x = rng.normal() * scale;
    return v;
}

// central finite differences with the spec step
constexpr double kFdStep = 1e-4;

void check_close(double got, double fd, double tol = 1e-4) {
    CHECK(std::fabs(got - fd) <= tol * std::max(1.0, std::fabs(fd)));
}

}  // namespace

TEST_CASE("kl_divergence basics") {
    std::vector<double> u(4, 0.25);
    CHECK(kl_divergence(u, u) == Catch::Approx(0.0).margin(1e-9));

    std::vector<double> p{0.5, 0.5}, q{0.9, 0.1};
    CHECK(kl_divergence(p, q) == Catch::Approx(0.5108).margin(1e-3));

    std::vector<double> qz{1.0, 0.0};
    const double v = kl_divergence(p, qz);
    CHECK(std::isfinite(v));

    std::vector<double> len3{0.3, 0.3, 0.4};
    CHECK_THROWS_AS(kl_divergence(p, len3), ShapeError);
    std::vector<double> bad{0.7, 0.7};
    CHECK_THROWS_AS(kl_divergence(p, bad), ArgumentError);
}

TEST_CASE("kl_divergence is non-negative on random distribution pairs") {
    GaussianRng rng(3);
    for (int it = 0; it < 10000; ++it) {
        const std::size_t n = 2 + static_cast<std::size_t>(rng.uniform() * 8);
        auto p = softmax_normalize(std::span<const double>(random_vec(n, rng, 2.0)));
        auto q = softmax_normalize(std::span<const double>(random_vec(n, rng, 2.0)));
        CHECK(kl_divergence(p, q) >= -1e-12);
    }
}

TEST_CASE("prepare_distribution composes pooling and softmax") {
    std::vector<double> c(10, 4.2);
    auto u = prepare_distribution(c, 4);
    for (double v : u) CHECK(v == Catch::Approx(0.25).margin(1e-9));

    GaussianRng rng(5);
    auto f = random_vec(6, rng);
    auto direct = softmax_normalize(std::span<const double>(f));
    auto prep = prepare_distribution(f, 6);
    for (std::size_t k = 0; k < 6; ++k) CHECK(prep[k] == Catch::Approx(direct[k]).margin(1e-12));

    std::vector<double> two{0.0, 0.0, std::log(2.0), std::log(2.0)};
    auto s = prepare_distribution(two, 2);
    CHECK(s[0] == Catch::Approx(1.0 / 3.0).margin(1e-9));
    CHECK(s[1] == Catch::Approx(2.0 / 3.0).margin(1e-9));
}

TEST_CASE("intra_frame_reg vanishes when prepared maps equal the means") {
    GaussianRng rng(7);
    RegConfig cfg;
    cfg.pooled_len = 8;
    FeatureMapSet fms;
    fms.layers = {random_vec(24, rng), random_vec(16, rng)};
    RunningMeans means = RunningMeans::uniform(2, 8);
    means.mu[0] = prepare_distribution(fms.layers[0], 8);
    means.mu[1] = prepare_distribution(fms.layers[1], 8);
    RegResult r = intra_frame_reg(fms, means, cfg);
    CHECK(r.value == Catch::Approx(0.0).margin(1e-6));
    for (const auto& g : r.grads)
        for (double v : g) CHECK(std::fabs(v) < 1e-6);
}

TEST_CASE("intra_frame_reg single-layer hand value") {
    RegConfig cfg;
    cfg.pooled_len = 2;
    FeatureMapSet fms;
    fms.layers = {{1.3, 1.3}};  // prep -> [0.5, 0.5]
    RunningMeans means = RunningMeans::uniform(1, 2);
    means.mu[0] = {0.9, 0.1};
    RegResult r = intra_frame_reg(fms, means, cfg);
    CHECK(r.value == Catch::Approx(0.5108).margin(1e-3));
}

TEST_CASE("intra_frame_reg gradients match finite differences") {
    GaussianRng rng(11);
    RegConfig cfg;
    cfg.pooled_len = 6;
    for (int inst = 0; inst < 50; ++inst) {
        FeatureMapSet fms;
        fms.layers = {random_vec(13, rng), random_vec(9, rng)};
        RunningMeans means = RunningMeans::uniform(2, 6);
        means.mu[0] = softmax_normalize(std::span<const double>(random_vec(6, rng)));
        means.mu[1] = softmax_normalize(std::span<const double>(random_vec(6, rng)));
        RegResult r = intra_frame_reg(fms, means, cfg);
        for (std::size_t layer = 0; layer < 2; ++layer)
            for (std::size_t k = 0; k < fms.layers[layer].size(); ++k) {
                FeatureMapSet up = fms, dn = fms;
                up.layers[layer][k] += kFdStep;
                dn.layers[layer][k] -= kFdStep;
                const double fd = (intra_frame_reg(up, means, cfg).value -
                                   intra_frame_reg(dn, means, cfg).value) /
                                  (2 * kFdStep);
                check_close(r.grads[layer][k], fd);
            }
    }
}

TEST_CASE("inter_frame_reg trivial cases") {
    GaussianRng rng(13);
    RegConfig cfg;
    cfg.pooled_len = 4;
    cfg.lambda_t = 0.0;
    FeatureMapSet a, b;
    a.frame = 0;
    b.frame = 1;
    a.layers = {random_vec(8, rng), random_vec(8, rng)};
    b.layers = {random_vec(8, rng), random_vec(8, rng)};
    CHECK(inter_frame_reg(a, b, cfg).value == 0.0);

    cfg.lambda_t = 1.0;
    FeatureMapSet same = a;
    same.frame = 1;
    CHECK(inter_frame_reg(a, same, cfg).value == Catch::Approx(0.0).margin(1e-6));

    FeatureMapSet late = b;
    late.frame = 5;
    CHECK_THROWS_AS(inter_frame_reg(a, late, cfg), ArgumentError);
}

TEST_CASE("cross-layer mode sums the pairwise divergences") {
    GaussianRng rng(17);
    RegConfig cfg;
    cfg.pooled_len = 4;
    cfg.lambda_t = 1.0;
    cfg.pairing = InterPairing::cross_layer;
    FeatureMapSet a, b;
    a.frame = 3;
    b.frame = 4;
    a.layers = {random_vec(8, rng), random_vec(6, rng), random_vec(12, rng)};
    b.layers = {random_vec(8, rng), random_vec(6, rng), random_vec(12, rng)};
    const double got = inter_frame_reg(a, b, cfg).value;
    double expect = 0.0;
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = i + 1; j < 3; ++j)
            expect += kl_divergence(prepare_distribution(a.layers[i], 4),
                                    prepare_distribution(b.layers[j], 4));
    CHECK(got == Catch::Approx(expect).margin(1e-10));
}

TEST_CASE("inter_frame_reg gradients match finite differences on both frames") {
    GaussianRng rng(19);
    for (auto pairing : {InterPairing::same_layer, InterPairing::cross_layer}) {
        RegConfig cfg;
        cfg.pooled_len = 5;
        cfg.lambda_t = 0.7;
        cfg.pairing = pairing;
        for (int inst = 0; inst < 25; ++inst) {
            FeatureMapSet a, b;
            a.frame = inst;
            b.frame = inst + 1;
            a.layers = {random_vec(11, rng), random_vec(7, rng)};
            b.layers = {random_vec(11, rng), random_vec(7, rng)};
            RegResult r = inter_frame_reg(a, b, cfg);
            for (std::size_t layer = 0; layer < 2; ++layer) {
                for (std::size_t k = 0; k < a.layers[layer].size(); ++k) {
                    FeatureMapSet up = a, dn = a;
                    up.layers[layer][k] += kFdStep;
                    dn.layers[layer][k] -= kFdStep;
                    const double fd = (inter_frame_reg(up, b, cfg).value -
                                       inter_frame_reg(dn, b, cfg).value) /
                                      (2 * kFdStep);
                    check_close(r.grads[layer][k], fd);
                }
                for (std::size_t k = 0; k < b.layers[layer].size(); ++k) {
                    FeatureMapSet up = b, dn = b;
                    up.layers[layer][k] += kFdStep;
                    dn.layers[layer][k] -= kFdStep;
                    const double fd = (inter_frame_reg(a, up, cfg).value -
                                       inter_frame_reg(a, dn, cfg).value) /
                                      (2 * kFdStep);
                    check_close(r.grads_next[layer][k], fd);
                }
            }
        }
    }
}

TEST_CASE("regularizers are invariant under constant feature-map shifts") {
    GaussianRng rng(23);
    RegConfig cfg;
    cfg.pooled_len = 6;
    cfg.lambda_t = 1.0;
    FeatureMapSet a, b;
    a.frame = 0;
    b.frame = 1;
    a.layers = {random_vec(18, rng)};
    b.layers = {random_vec(18, rng)};
    RunningMeans means = RunningMeans::uniform(1, 6);
    means.mu[0] = softmax_normalize(std::span<const double>(random_vec(6, rng)));

    const double r0 = intra_frame_reg(a, means, cfg).value;
    const double rt0 = inter_frame_reg(a, b, cfg).value;
    FeatureMapSet a2 = a, b2 = b;
    for (auto& v : a2.layers[0]) v += 7.5;
    for (auto& v : b2.layers[0]) v -= 3.25;
    CHECK(intra_frame_reg(a2, means, cfg).value == Catch::Approx(r0).margin(1e-6));
    CHECK(inter_frame_reg(a2, b2, cfg).value == Catch::Approx(rt0).margin(1e-6));
}

TEST_CASE("update_running_mean modes and convexity") {
    RegConfig cfg;
    cfg.pooled_len = 2;
    FeatureMapSet fms;
    fms.layers = {{0.0, std::log(1.5)}};  // prep -> [0.4, 0.6]

    RunningMeans ones = RunningMeans::uniform(1, 2, 1.0);
    ones.mu[0] = {0.2, 0.8};
    RunningMeans after1 = update_running_mean(ones, fms, cfg);
    CHECK(after1.mu[0][0] == Catch::Approx(0.2).margin(1e-12));

    RunningMeans zeros = RunningMeans::uniform(1, 2, 0.0);
    zeros.mu[0] = {0.2, 0.8};
    RunningMeans after0 = update_running_mean(zeros, fms, cfg);
    CHECK(after0.mu[0][0] == Catch::Approx(0.4).margin(1e-9));
    CHECK(after0.mu[0][1] == Catch::Approx(0.6).margin(1e-9));

    RunningMeans half = RunningMeans::uniform(1, 2, 0.5);
    half.mu[0] = {0.2, 0.8};
    RunningMeans mid = update_running_mean(half, fms, cfg);
    CHECK(mid.mu[0][0] == Catch::Approx(0.3).margin(1e-9));
    CHECK(mid.mu[0][1] == Catch::Approx(0.7).margin(1e-9));

    // convex combination: entries stay inside [min, max] of the two sources
    GaussianRng rng(29);
    RegConfig cfg8;
    cfg8.pooled_len = 8;
    RunningMeans m = RunningMeans::uniform(1, 8, 0.9);
    for (int it = 0; it < 20; ++it) {
        FeatureMapSet f;
        f.layers = {random_vec(16, rng)};
        const auto prep = prepare_distribution(f.layers[0], 8);
        const auto before = m.mu[0];
        m = update_running_mean(m, f, cfg8);
        double sum = 0.0;
        for (std::size_t k = 0; k < 8; ++k) {
            CHECK(m.mu[0][k] >= std::min(before[k], prep[k]) - 1e-12);
            CHECK(m.mu[0][k] <= std::max(before[k], prep[k]) + 1e-12);
            sum += m.mu[0][k];
        }
        CHECK(sum == Catch::Approx(1.0).margin(1e-6));
    }

    // true-mean mode averages all prepared distributions seen so far
    RunningMeans tm = RunningMeans::uniform(1, 2, 0.99, MeanMode::true_mean);
    FeatureMapSet f1, f2;
    f1.layers = {{0.0, 0.0}};             // prep [0.5, 0.5]
    f2.layers = {{0.0, std::log(3.0)}};   // prep [0.25, 0.75]
    tm = update_running_mean(tm, f1, cfg);
    tm = update_running_mean(tm, f2, cfg);
    CHECK(tm.mu[0][0] == Catch::Approx(0.375).margin(1e-9));
}

TEST_CASE("layer mismatches raise configuration errors") {
    RegConfig cfg;
    cfg.pooled_len = 4;
    FeatureMapSet fms;
    fms.layers = {{1.0, 2.0, 3.0, 4.0}};
    RunningMeans means = RunningMeans::uniform(2, 4);
    CHECK_THROWS_AS(intra_frame_reg(fms, means, cfg), ConfigError);
    CHECK_THROWS_AS(update_running_mean(means, fms, cfg), ConfigError);
}
