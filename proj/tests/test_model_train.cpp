// SPDX-License-Identifier: Apache-2.0
//
// Toy models and the similarity-aware training loop.

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "reuseflow/model.hpp"
#include "reuseflow/train.hpp"
#include "support/composite.hpp"

using namespace rf;

namespace {

ModelConfig conv_cfg(std::size_t hw = 12, std::size_t classes = 2) {
    ModelConfig c;
    c.arch = Arch::tiny_convnet;
    c.in_h = hw;
    c.in_w = hw;
    c.in_c = 1;
    c.n_classes = classes;
    return c;
}

ModelConfig vit_cfg(std::size_t hw = 8, std::size_t classes = 2) {
    ModelConfig c;
    c.arch = Arch::tiny_vit;
    c.in_h = hw;
    c.in_w = hw;
    c.in_c = 1;
    c.n_classes = classes;
    c.patch = 4;
    c.d_model = 8;
    c.n_heads = 2;
    c.d_ff = 16;
    return c;
}

bool params_equal(const ToyModel& a, const ToyModel& b) {
    if (a.params.size() != b.params.size()) return false;
    for (std::size_t p = 0; p < a.params.size(); ++p) {
        if (!a.params[p].same_shape(b.params[p])) return false;
        for (std::size_t k = 0; k < a.params[p].size(); ++k)
            if (a.params[p].data()[k] != b.params[p].data()[k]) return false;
    }
    return true;
}

}  // namespace

TEST_CASE("model init is deterministic per seed") {
    ToyModel a = init_model(conv_cfg(), 5);
    ToyModel b = init_model(conv_cfg(), 5);
    ToyModel c = init_model(conv_cfg(), 6);
    CHECK(params_equal(a, b));
    CHECK_FALSE(params_equal(a, c));
}

TEST_CASE("conv filters are DC-free at init") {
    ToyModel m = init_model(conv_cfg(), 9);
    for (std::size_t layer : {0, 1}) {
        const DenseMatrix& f = m.params[layer];
        for (std::size_t j = 0; j < f.cols(); ++j) {
            double sum = 0.0;
            for (std::size_t i = 0; i < f.rows(); ++i) sum += f(i, j);
            CHECK(std::fabs(sum) < 1e-4);
        }
    }
}

TEST_CASE("checkpoints round-trip both architectures") {
    const std::string path = std::filesystem::temp_directory_path() / "rf_test_ck.bin";
    for (const ModelConfig& cfg : {conv_cfg(12, 3), vit_cfg(8, 4)}) {
        ToyModel m = init_model(cfg, 11);
        save_model(path, m);
        ToyModel back = load_model(path);
        CHECK(back.cfg.arch == m.cfg.arch);
        CHECK(back.cfg.in_h == m.cfg.in_h);
        CHECK(back.cfg.n_classes == m.cfg.n_classes);
        CHECK(params_equal(m, back));
    }
    std::filesystem::remove(path);
}

TEST_CASE("reuse forward with max hash_size matches exact forward") {
    for (const ModelConfig& cfg : {conv_cfg(), vit_cfg()}) {
        ToyModel m = init_model(cfg, 13);
        for (auto& h : m.hashers) h.hash_size = 64;
        FrameStream s = gen_stream(6, cfg.in_h, cfg.in_w, 1, 0.9, 2, 17);
        ForwardResult exact = forward_batch(m, s, 0, 6, false, nullptr, false);
        ForwardResult reuse = forward_batch(m, s, 0, 6, true, nullptr, false);
        for (std::size_t k = 0; k < exact.logits.size(); ++k)
            CHECK(reuse.logits.data()[k] ==
                  Catch::Approx(exact.logits.data()[k]).margin(1e-5));
    }
}

TEST_CASE("composite loss gradients match finite differences") {
    // exact forward, both regularizers on
    for (int inst = 0; inst < 3; ++inst) {
        for (const ModelConfig& cfg : {conv_cfg(8), vit_cfg(8)}) {
            ToyModel m = init_model(cfg, 100 + inst);
            FrameStream s = gen_stream(2, cfg.in_h, cfg.in_w, 1, 0.9, 2, 300 + inst);
            rftest::CompositeSpec cs;
            cs.stream = &s;
            cs.f0 = 0;
            cs.f1 = 2;
            cs.means = RunningMeans::uniform(2, 16);
            cs.reg.pooled_len = 16;
            cs.reg.lambda = 0.02;
            cs.reg.lambda_t = 0.05;
            cs.reg.window = 2;
            rftest::GradCheckResult res = rftest::gradient_check_filtered(m, cs);
            CHECK(res.rel_error < 1e-3);
            CHECK(res.kept_fraction > 0.9);
            CHECK(res.loss_gap < 1e-4);  // float forward agrees with the double oracle
        }
    }
}

TEST_CASE("composite loss gradients with frozen reuse clustering") {
    for (const ModelConfig& cfg : {conv_cfg(8), vit_cfg(8)}) {
        ToyModel m = init_model(cfg, 41);
        for (auto& h : m.hashers) h.hash_size = 4;  // coarse, real clustering
        FrameStream s = gen_stream(2, cfg.in_h, cfg.in_w, 1, 0.95, 2, 43);
        FrozenAssignments frozen = calibrate_assignments(m, s);
        rftest::CompositeSpec cs;
        cs.stream = &s;
        cs.f0 = 0;
        cs.f1 = 2;
        cs.reuse = true;
        cs.frozen = &frozen;
        cs.means = RunningMeans::uniform(2, 16);
        cs.reg.pooled_len = 16;
        cs.reg.lambda = 0.02;
        cs.reg.lambda_t = 0.05;
        rftest::GradCheckResult res = rftest::gradient_check_filtered(m, cs);
        CHECK(res.rel_error < 1e-3);
        CHECK(res.kept_fraction > 0.9);
        CHECK(res.loss_gap < 1e-4);
    }
}

TEST_CASE("sgd momentum update follows the two-step hand sequence") {
    // theta0 = 1, v0 = 0, lr = 0.1, m = 0.9, g1 = 2, g2 = -1
    // v1 = -0.2,  theta1 = 0.8
    // v2 = 0.9*(-0.2) + 0.1 = -0.08, theta2 = 0.72
    std::vector<float> theta{1.0f};
    std::vector<float> v{0.0f};
    std::vector<float> g1{2.0f}, g2{-1.0f};
    sgd_momentum_step(theta, v, g1, 0.1, 0.9);
    CHECK(theta[0] == Catch::Approx(0.8).margin(1e-7));
    CHECK(v[0] == Catch::Approx(-0.2).margin(1e-7));
    sgd_momentum_step(theta, v, g2, 0.1, 0.9);
    CHECK(v[0] == Catch::Approx(-0.08).margin(1e-7));
    CHECK(theta[0] == Catch::Approx(0.72).margin(1e-7));
}

TEST_CASE("zero learning rate leaves parameters unchanged") {
    ToyModel m = init_model(conv_cfg(), 19);
    FrameStream s = gen_stream(8, 12, 12, 1, 0.9, 2, 23);
    TrainConfig cfg;
    cfg.lr = 0.0;
    cfg.epochs = 2;
    cfg.batch_size = 4;
    ToyModel after = pretrain(m, s, cfg);
    CHECK(params_equal(m, after));
}

TEST_CASE("pretrain is deterministic and reduces the loss") {
    FrameStream s = gen_stream(24, 12, 12, 1, 0.9, 2, 29, 2.0);
    TrainConfig cfg;
    cfg.epochs = 3;
    cfg.batch_size = 8;

    ToyModel m = init_model(conv_cfg(), 31);
    TrainOutput a = pretrain_with_reports(m, s, cfg);
    TrainOutput b = pretrain_with_reports(m, s, cfg);
    CHECK(params_equal(a.model, b.model));
    for (std::size_t e = 0; e < a.reports.size(); ++e)
        CHECK(a.reports[e].task_loss == b.reports[e].task_loss);

    // strictly lower loss than initialization on >= 90% of seeds
    int improved = 0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        ToyModel mm = init_model(conv_cfg(), 600 + seed);
        const double init_loss =
            rf::detail::cross_entropy(
                forward_batch(mm, s, 0, s.n_frames, false, nullptr, false).logits, s, 0)
                .mean_loss;
        TrainOutput out = pretrain_with_reports(mm, s, cfg);
        if (out.reports.back().task_loss < init_loss) ++improved;
    }
    CHECK(improved >= 9);
}

TEST_CASE("learnable stream reaches high training accuracy") {
    FrameStream s = gen_stream(48, 12, 12, 1, 0.9, 2, 37, 2.0);
    TrainConfig cfg;
    cfg.epochs = 10;
    cfg.batch_size = 16;
    for (const ModelConfig& mc : {conv_cfg(12), vit_cfg(12)}) {
        ToyModel m = init_model(mc, 41);
        ToyModel trained = pretrain(m, s, cfg);
        CHECK(evaluate(trained, s, false).metric >= 95.0);
    }
}

TEST_CASE("zero-regularization sa_train reproduces pretrain bit for bit") {
    FrameStream s = gen_stream(16, 12, 12, 1, 0.9, 2, 43, 2.0);
    TrainConfig cfg;
    cfg.epochs = 4;
    cfg.batch_size = 8;
    cfg.lambda = 0.0;
    cfg.lambda_t = 0.0;
    cfg.reuse_in_training = false;
    ToyModel m = init_model(conv_cfg(), 47);
    TrainOutput base = pretrain_with_reports(m, s, cfg);
    TrainOutput sa = sa_train(m, s, cfg, RegConfig{});
    CHECK(params_equal(base.model, sa.model));
    REQUIRE(base.reports.size() == sa.reports.size());
    for (std::size_t e = 0; e < base.reports.size(); ++e) {
        CHECK(base.reports[e].task_loss == sa.reports[e].task_loss);
        CHECK(base.reports[e].metric == sa.reports[e].metric);
    }
}

TEST_CASE("epoch reports stay finite and sigma stays >= 1") {
    FrameStream s = gen_stream(24, 12, 12, 1, 0.95, 2, 53, 2.0);
    TrainConfig cfg;
    cfg.epochs = 3;
    cfg.batch_size = 8;
    cfg.lambda = 0.001;
    cfg.lambda_t = 0.01;
    cfg.reuse_in_training = true;
    RegConfig reg;
    reg.pooled_len = 32;
    reg.window = 2;
    ToyModel m = init_model(conv_cfg(), 59);
    for (auto& h : m.hashers) h.hash_size = 6;
    TrainOutput out = sa_train(m, s, cfg, reg);
    for (const auto& rep : out.reports) {
        CHECK(rep.all_finite());
        for (double sg : rep.sigma_per_layer) CHECK(sg >= 1.0);
        CHECK(rep.r >= 0.0);
        CHECK(rep.r_t >= 0.0);
    }
}

TEST_CASE("epoch-frozen clustering keeps ids fixed within an epoch") {
    FrameStream s = gen_stream(12, 12, 12, 1, 0.95, 2, 61);
    ToyModel m = init_model(conv_cfg(), 67);
    for (auto& h : m.hashers) h.hash_size = 6;
    FrozenAssignments frozen = calibrate_assignments(m, s);
    // identical frames (same content at conv1 rows) share their stored ids
    const auto& [ids, n] = frozen.linear.at("conv1");
    ForwardResult fwd = forward_batch(m, s, 0, s.n_frames, true, &frozen, false);
    // slicing different batches of the same rows yields consistent grouping
    ForwardResult fwd_a = forward_batch(m, s, 0, 6, true, &frozen, false);
    ForwardResult fwd_b = forward_batch(m, s, 6, 12, true, &frozen, false);
    CHECK(fwd.conv.a1->n_clusters() <= n);
    CHECK(fwd_a.conv.a1->n_clusters() + fwd_b.conv.a1->n_clusters() >=
          fwd.conv.a1->n_clusters());
}

TEST_CASE("evaluate: reuse with max hash_size equals exact evaluation") {
    FrameStream s = gen_stream(12, 12, 12, 1, 0.9, 2, 71, 2.0);
    ToyModel m = init_model(conv_cfg(), 73);
    for (auto& h : m.hashers) h.hash_size = 64;
    EvalResult exact = evaluate(m, s, false);
    EvalResult reuse = evaluate(m, s, true);
    CHECK(reuse.metric == Catch::Approx(exact.metric).margin(1e-6));
    CHECK(reuse.total.speedup() < 1.0);  // hashing overhead visible
}

TEST_CASE("duplicated frames give a free speedup at equal metric") {
    FrameStream base = gen_stream(10, 12, 12, 1, 0.9, 2, 79, 2.0);
    FrameStream dup = base;
    dup.n_frames = 20;
    dup.data.resize(20 * base.frame_len());
    dup.labels.resize(20);
    for (std::size_t t = 0; t < 20; ++t) {
        const auto src = base.frame(t / 2);
        std::copy(src.begin(), src.end(), dup.data.begin() + t * base.frame_len());
        dup.labels[t] = base.labels[t / 2];
    }
    ToyModel m = init_model(conv_cfg(), 83);
    EvalResult exact = evaluate(m, dup, false);
    EvalResult reuse = evaluate(m, dup, true);
    CHECK(reuse.metric == exact.metric);
    CHECK(reuse.total.speedup() > 1.0);
}

TEST_CASE("evaluate validates inputs") {
    ToyModel m = init_model(conv_cfg(), 89);
    FrameStream s = gen_stream(4, 12, 12, 1, 0.5, 2, 97);
    FrameStream unlabeled = s;
    unlabeled.labels.clear();
    CHECK_THROWS_AS(evaluate(m, unlabeled, false), ArgumentError);
    FrameStream wrong = gen_stream(4, 8, 8, 1, 0.5, 2, 97);
    CHECK_THROWS_AS(evaluate(m, wrong, false), ConfigError);
}

TEST_CASE("SA-training raises per-layer compression on correlated streams") {
    // paired over seeds: mean final-epoch sigma >= mean epoch-0 sigma
    double diff_sum = 0.0;
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        FrameStream s = gen_stream(24, 12, 12, 1, 0.95, 2, 1000 + seed, 2.0);
        TrainConfig pre_cfg;
        pre_cfg.epochs = 3;
        pre_cfg.batch_size = 8;
        ToyModel m = pretrain(init_model(conv_cfg(), 2000 + seed), s, pre_cfg);
        for (auto& h : m.hashers) h.hash_size = 6;
        TrainConfig cfg;
        cfg.epochs = 10;
        cfg.batch_size = 8;
        cfg.lambda = 0.001;
        cfg.lambda_t = 0.0;
        cfg.reuse_in_training = true;
        RegConfig reg;
        reg.pooled_len = 32;
        TrainOutput out = sa_train(m, s, cfg, reg);
        auto mean_sigma = [](const EpochReport& r) {
            double acc = 0.0;
            for (double v : r.sigma_per_layer) acc += v;
            return acc / static_cast<double>(r.sigma_per_layer.size());
        };
        diff_sum += mean_sigma(out.reports.back()) - mean_sigma(out.reports.front());
    }
    CHECK(diff_sum / 3.0 >= 0.0);
}

TEST_CASE("layer similarity profile basics") {
    // constant nonzero frames: first-layer patches are all identical
    FrameStream s;
    s.n_frames = 3;
    s.h = s.w = 12;
    s.c = 1;
    s.n_classes = 2;
    s.data.assign(3 * 144, 1.5f);
    s.labels = {0, 1, 0};
    ToyModel m = init_model(conv_cfg(), 101);
    auto profile = layer_similarity_profile(m, s);
    REQUIRE(profile.size() == 3);
    CHECK(profile[0].first == "conv1");
    CHECK(profile[0].second == Catch::Approx(1.0).margin(1e-5));
    for (const auto& [name, v] : profile) {
        CHECK(v >= -1.0 - 1e-9);
        CHECK(v <= 1.0 + 1e-9);
    }

    // temporal correlation raises first-layer similarity, same seed
    FrameStream hi = gen_stream(24, 12, 12, 1, 0.99, 2, 103, 1.0);
    FrameStream lo = gen_stream(24, 12, 12, 1, 0.0, 2, 103, 1.0);
    ToyModel m2 = init_model(conv_cfg(), 107);
    const double hi_first = layer_similarity_profile(m2, hi)[0].second;
    const double lo_first = layer_similarity_profile(m2, lo)[0].second;
    CHECK(hi_first > lo_first);

    // vit profile exists for every reuse-capable layer
    ToyModel mv = init_model(vit_cfg(), 109);
    FrameStream sv = gen_stream(6, 8, 8, 1, 0.9, 2, 113);
    auto pv = layer_similarity_profile(mv, sv);
    CHECK(pv.size() == 4);
}
