#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "afnet/model.hpp"
#include "test_support.hpp"

using namespace afnet;
using namespace afnet::testing;

namespace {

ModelConfig toy_config() {
    ModelConfig cfg;
    cfg.input_size = 32;
    cfg.widths = {8, 16, 32, 64};
    cfg.ma_enabled = true;
    cfg.ma_positions = {1, 2};
    cfg.fusion_strategy = FusionStrategy::ConvAdaptive;
    cfg.iwc_enabled = true;
    cfg.fusion_positions = {3, 4};
    cfg.seed = 9;
    return cfg;
}

Batch toy_batch(const ModelConfig& cfg, std::int64_t n, std::uint64_t seed) {
    Rng rng(seed);
    Batch b;
    b.texture = random_tensor({n, 3, cfg.input_size, cfg.input_size}, rng, 0.0, 1.0);
    b.depth = random_tensor({n, 3, cfg.input_size, cfg.input_size}, rng, 0.0, 1.0);
    b.mask1 = random_tensor({n, 1, cfg.input_size / 4, cfg.input_size / 4}, rng, 0.0, 1.0);
    b.mask2 = random_tensor({n, 1, cfg.input_size / 8, cfg.input_size / 8}, rng, 0.0, 1.0);
    for (std::int64_t i = 0; i < n; ++i) b.labels.push_back(static_cast<int>(i % 6));
    return b;
}

void fill(Tensor& t, double v) { std::fill(t.data().begin(), t.data().end(), v); }

// gamma group emits exactly 1, beta group exactly 0, for every mask.
void force_ma_identity(AfnetModel& m) {
    for (const auto& [name, t] : m.params().entries()) {
        if (name.rfind("ma.", 0) != 0) continue;
        Tensor tt = t;
        if (name.find("gamma2.b") != std::string::npos) fill(tt, 1.0);
        else if (name.find("gamma2") != std::string::npos ||
                 name.find("beta2") != std::string::npos)
            fill(tt, 0.0);
    }
}

void zero_iwc(AfnetModel& m) {
    for (const auto& [name, t] : m.params().entries())
        if (name.rfind("iwc.", 0) == 0) {
            Tensor tt = t;
            fill(tt, 0.0);
        }
}

}  // namespace

TEST_CASE("config validation") {
    ModelConfig cfg = toy_config();
    CHECK_NOTHROW(cfg.validate());
    SUBCASE("ma positions outside layer1/2") {
        cfg.ma_positions = {3};
        CHECK_THROWS_AS(cfg.validate(), ConfigError);
    }
    SUBCASE("conv fusion needs positions") {
        cfg.fusion_positions.clear();
        CHECK_THROWS_AS(cfg.validate(), ConfigError);
    }
    SUBCASE("widths must double") {
        cfg.widths = {8, 16, 24, 48};
        CHECK_THROWS_AS(cfg.validate(), ConfigError);
    }
    SUBCASE("input size granularity") {
        cfg.input_size = 36;
        CHECK_THROWS_AS(cfg.validate(), ConfigError);
    }
}

TEST_CASE("stem_forward shape contract") {
    SUBCASE("full-scale stem lands at 56x56") {
        ParamSet ps(1);
        ModelConfig cfg;
        ConvBn stem;
        stem.conv.w = ps.create("s.w", {64, 3, 7, 7}, ParamSet::Init::HeConv);
        stem.conv.b = ps.create("s.b", {64}, ParamSet::Init::Zero);
        stem.bn.scale = ps.create("s.bn.scale", {64}, ParamSet::Init::One);
        stem.bn.shift = ps.create("s.bn.shift", {64}, ParamSet::Init::Zero);
        stem.bn.state = BatchNormState::make(64);
        Rng rng(2);
        Tensor x = random_tensor({1, 3, 224, 224}, rng);
        Tensor y = stem_forward(nullptr, stem, x, true);
        CHECK(y.shape() == Shape{1, 64, 56, 56});
    }
    SUBCASE("toy stem lands at S/4 and zero input stays zero") {
        ParamSet ps(1);
        ConvBn stem;
        stem.conv.w = ps.create("s.w", {8, 3, 7, 7}, ParamSet::Init::HeConv);
        stem.conv.b = ps.create("s.b", {8}, ParamSet::Init::Zero);
        stem.bn.scale = ps.create("s.bn.scale", {8}, ParamSet::Init::One);
        stem.bn.shift = ps.create("s.bn.shift", {8}, ParamSet::Init::Zero);
        stem.bn.state = BatchNormState::make(8);
        Tensor x = Tensor::zeros({2, 3, 32, 32});
        Tensor y = stem_forward(nullptr, stem, x, false);
        CHECK(y.shape() == Shape{2, 8, 8, 8});
        for (double v : y.data()) CHECK(v == 0.0);
        CHECK_THROWS_AS(stem_forward(nullptr, stem, Tensor::zeros({1, 3, 30, 30}), false),
                        ConfigError);
    }
}

TEST_CASE("residual_block_forward") {
    ParamSet ps(3);
    SUBCASE("zero residual path is relu(x)") {
        ResidualBlock blk;
        blk.c1.conv.w = ps.create("b.c1.w", {4, 4, 3, 3}, ParamSet::Init::Zero);
        blk.c1.conv.b = ps.create("b.c1.b", {4}, ParamSet::Init::Zero);
        blk.c1.bn.scale = ps.create("b.c1.s", {4}, ParamSet::Init::One);
        blk.c1.bn.shift = ps.create("b.c1.h", {4}, ParamSet::Init::Zero);
        blk.c1.bn.state = BatchNormState::make(4);
        blk.c1.stride = 1;
        blk.c1.pad = 1;
        blk.c2 = blk.c1;
        blk.c2.bn.state = BatchNormState::make(4);
        Rng rng(4);
        Tensor x = random_tensor({2, 4, 5, 5}, rng, -1.0, 1.0);
        Tensor y = residual_block_forward(nullptr, blk, x, true);
        for (std::size_t i = 0; i < x.data().size(); ++i)
            CHECK(y.data()[i] == std::max(x.data()[i], 0.0));
    }
    SUBCASE("downsample halves space and doubles channels") {
        ModelConfig cfg = toy_config();
        AfnetModel model(cfg);
        Batch b = toy_batch(cfg, 1, 5);
        ActivationMap acts;
        model.forward(nullptr, b, false, &acts);
        auto find = [&](const std::string& n) {
            for (auto& [k, t] : acts)
                if (k == n) return t;
            FAIL("missing activation ", n);
            return Tensor();
        };
        CHECK(find("tex.layer1").shape() == Shape{1, 8, 8, 8});
        CHECK(find("tex.layer2").shape() == Shape{1, 16, 4, 4});
        CHECK(find("tex.layer3").shape() == Shape{1, 32, 2, 2});
        CHECK(find("tex.layer4").shape() == Shape{1, 64, 1, 1});
    }
    SUBCASE("shape change without projection is a config error") {
        ResidualBlock blk;
        blk.c1.conv.w = ps.create("c.c1.w", {8, 4, 3, 3}, ParamSet::Init::HeConv);
        blk.c1.conv.b = ps.create("c.c1.b", {8}, ParamSet::Init::Zero);
        blk.c1.bn.scale = ps.create("c.c1.s", {8}, ParamSet::Init::One);
        blk.c1.bn.shift = ps.create("c.c1.h", {8}, ParamSet::Init::Zero);
        blk.c1.bn.state = BatchNormState::make(8);
        blk.c1.stride = 1;
        blk.c1.pad = 1;
        blk.c2.conv.w = ps.create("c.c2.w", {8, 8, 3, 3}, ParamSet::Init::HeConv);
        blk.c2.conv.b = ps.create("c.c2.b", {8}, ParamSet::Init::Zero);
        blk.c2.bn.scale = ps.create("c.c2.s", {8}, ParamSet::Init::One);
        blk.c2.bn.shift = ps.create("c.c2.h", {8}, ParamSet::Init::Zero);
        blk.c2.bn.state = BatchNormState::make(8);
        Tensor x = Tensor::zeros({1, 4, 4, 4});
        CHECK_THROWS_AS(residual_block_forward(nullptr, blk, x, true), ConfigError);
    }
    SUBCASE("gradients through a block match finite differences") {
        ParamSet p2(11);
        ResidualBlock blk;
        blk.c1.conv.w = p2.create("d.c1.w", {3, 3, 3, 3}, ParamSet::Init::HeConv);
        blk.c1.conv.b = p2.create("d.c1.b", {3}, ParamSet::Init::Zero);
        blk.c1.bn.scale = p2.create("d.c1.s", {3}, ParamSet::Init::One);
        blk.c1.bn.shift = p2.create("d.c1.h", {3}, ParamSet::Init::Zero);
        blk.c1.stride = 1;
        blk.c1.pad = 1;
        blk.c2.conv.w = p2.create("d.c2.w", {3, 3, 3, 3}, ParamSet::Init::HeConv);
        blk.c2.conv.b = p2.create("d.c2.b", {3}, ParamSet::Init::Zero);
        blk.c2.bn.scale = p2.create("d.c2.s", {3}, ParamSet::Init::One);
        blk.c2.bn.shift = p2.create("d.c2.h", {3}, ParamSet::Init::Zero);
        Rng rng(12);
        Tensor x = random_tensor({2, 3, 4, 4}, rng);
        x.set_requires_grad(true);
        auto fn = [&](Tape* tape) {
            blk.c1.bn.state = BatchNormState::make(3);
            blk.c2.bn.state = BatchNormState::make(3);
            Tensor y = residual_block_forward(tape, blk, x, true);
            return sum_all(tape, mul(tape, y, y));
        };
        auto res = check_gradients(
            fn, {x, blk.c1.conv.w, blk.c1.conv.b, blk.c1.bn.scale, blk.c1.bn.shift,
                 blk.c2.conv.w, blk.c2.bn.scale});
        CHECK(res.ok);
    }
}

TEST_CASE("ma_forward") {
    SUBCASE("identity forcing reproduces the input exactly") {
        ParamSet ps(7);
        MaModule ma = [&] {
            MaModule m;
            m.g1.w = ps.create("g1.w", {4, 4, 1, 1}, ParamSet::Init::Normal002);
            m.g1.b = ps.create("g1.b", {4}, ParamSet::Init::Zero);
            m.g2.w = ps.create("g2.w", {4, 4, 1, 1}, ParamSet::Init::Zero);
            m.g2.b = ps.create("g2.b", {4}, ParamSet::Init::One);
            m.b1.w = ps.create("b1.w", {4, 4, 1, 1}, ParamSet::Init::Normal002);
            m.b1.b = ps.create("b1.b", {4}, ParamSet::Init::Zero);
            m.b2.w = ps.create("b2.w", {4, 4, 1, 1}, ParamSet::Init::Zero);
            m.b2.b = ps.create("b2.b", {4}, ParamSet::Init::Zero);
            m.channels = 4;
            return m;
        }();
        Rng rng(8);
        Tensor x = random_tensor({2, 4, 6, 6}, rng);
        Tensor mask = random_tensor({1, 6, 6}, rng, 0.0, 1.0);
        Tensor y = ma_forward(nullptr, ma, x, mask);
        CHECK(y.data() == x.data());
    }
    SUBCASE("single-channel pass-through gamma gives mask*x") {
        ParamSet ps(7);
        MaModule ma;
        ma.g1.w = ps.create("g1.w", {1, 1, 1, 1}, ParamSet::Init::One);
        ma.g1.b = ps.create("g1.b", {1}, ParamSet::Init::Zero);
        ma.g2.w = ps.create("g2.w", {1, 1, 1, 1}, ParamSet::Init::One);
        ma.g2.b = ps.create("g2.b", {1}, ParamSet::Init::Zero);
        ma.b1.w = ps.create("b1.w", {1, 1, 1, 1}, ParamSet::Init::Zero);
        ma.b1.b = ps.create("b1.b", {1}, ParamSet::Init::Zero);
        ma.b2.w = ps.create("b2.w", {1, 1, 1, 1}, ParamSet::Init::Zero);
        ma.b2.b = ps.create("b2.b", {1}, ParamSet::Init::Zero);
        ma.channels = 1;
        Rng rng(9);
        Tensor x = random_tensor({1, 1, 3, 3}, rng);
        Tensor mask = random_tensor({1, 3, 3}, rng, 0.0, 1.0);
        Tensor y = ma_forward(nullptr, ma, x, mask);
        for (std::size_t i = 0; i < 9; ++i)
            CHECK(y.data()[i] == doctest::Approx(mask.data()[i] * x.data()[i]).epsilon(1e-15));
    }
    SUBCASE("full-scale resolution contract") {
        ParamSet ps(7);
        MaModule ma;
        ma.g1 = {ps.create("g1.w", {64, 64, 1, 1}, ParamSet::Init::Normal002),
                 ps.create("g1.b", {64}, ParamSet::Init::Zero)};
        ma.g2 = {ps.create("g2.w", {64, 64, 1, 1}, ParamSet::Init::Normal002),
                 ps.create("g2.b", {64}, ParamSet::Init::Zero)};
        ma.b1 = {ps.create("b1.w", {64, 64, 1, 1}, ParamSet::Init::Normal002),
                 ps.create("b1.b", {64}, ParamSet::Init::Zero)};
        ma.b2 = {ps.create("b2.w", {64, 64, 1, 1}, ParamSet::Init::Normal002),
                 ps.create("b2.b", {64}, ParamSet::Init::Zero)};
        ma.channels = 64;
        Rng rng(10);
        Tensor x = random_tensor({1, 64, 56, 56}, rng);
        Tensor mask = random_tensor({1, 56, 56}, rng, 0.0, 1.0);
        CHECK(ma_forward(nullptr, ma, x, mask).shape() == Shape{1, 64, 56, 56});
        Tensor bad_mask = random_tensor({1, 28, 28}, rng, 0.0, 1.0);
        CHECK_THROWS_AS(ma_forward(nullptr, ma, x, bad_mask), ShapeError);
    }
}

TEST_CASE("iwc_weights") {
    ParamSet ps(13);
    IwcModule iwc;
    iwc.conv.w = ps.create("i.w", {3, 3, 1, 1}, ParamSet::Init::Zero);
    iwc.conv.b = ps.create("i.b", {3}, ParamSet::Init::Zero);
    iwc.channels = 3;
    Rng rng(14);
    SUBCASE("zeroed convolution gives exactly one half") {
        Tensor x = random_tensor({2, 3, 4, 4}, rng);
        Tensor w = iwc_weights(nullptr, iwc, x);
        CHECK(w.shape() == Shape{2, 3, 1, 1});
        for (double v : w.data()) CHECK(v == 0.5);
    }
    SUBCASE("spatially constant input collapses avg and max") {
        for (auto& v : iwc.conv.w.data()) v = 0.125;
        for (auto& v : iwc.conv.b.data()) v = 0.0;
        Tensor x = Tensor::zeros({1, 3, 5, 5});
        for (std::int64_t c = 0; c < 3; ++c)
            for (std::int64_t i = 0; i < 25; ++i)
                x.data()[static_cast<std::size_t>(c * 25 + i)] = 1.0 + static_cast<double>(c);
        Tensor w = iwc_weights(nullptr, iwc, x);
        // avg == max == pooled, so the logit is 2*conv(pooled)
        const double pooled_sum = (1.0 + 2.0 + 3.0) * 0.125;
        for (double v : w.data())
            CHECK(v == doctest::Approx(1.0 / (1.0 + std::exp(-2.0 * pooled_sum))).epsilon(1e-14));
    }
    SUBCASE("weights stay strictly inside (0,1)") {
        for (auto& v : iwc.conv.w.data()) v = 40.0;
        Tensor x = random_tensor({2, 3, 4, 4}, rng, -100.0, 100.0);
        Tensor w = iwc_weights(nullptr, iwc, x);
        for (double v : w.data()) {
            CHECK(v > 0.0);
            CHECK(v < 1.0);
        }
    }
}

TEST_CASE("adaptive_fuse") {
    Rng rng(15);
    Tensor x_t = random_tensor({2, 3, 4, 4}, rng);
    Tensor x_d = random_tensor({2, 3, 4, 4}, rng);
    SUBCASE("degenerate weights select one branch") {
        Tensor one = Tensor::full({2, 3, 1, 1}, 1.0);
        Tensor zero = Tensor::zeros({2, 3, 1, 1});
        Tensor m = adaptive_fuse(nullptr, x_t, x_d, one, zero);
        CHECK(m.data() == x_t.data());
    }
    SUBCASE("convex identity") {
        Tensor half = Tensor::full({2, 3, 1, 1}, 0.5);
        Tensor m = adaptive_fuse(nullptr, x_t, x_t, half, half);
        CHECK(max_abs_diff(m, x_t) < 1e-15);
    }
    SUBCASE("matches the per-element formula oracle") {
        Tensor t_iw = random_tensor({2, 3, 1, 1}, rng, 0.0, 1.0);
        Tensor d_iw = random_tensor({2, 3, 1, 1}, rng, 0.0, 1.0);
        Tensor m = adaptive_fuse(nullptr, x_t, x_d, t_iw, d_iw);
        for (std::int64_t n = 0; n < 2; ++n)
            for (std::int64_t c = 0; c < 3; ++c)
                for (std::int64_t i = 0; i < 16; ++i) {
                    const auto xi = static_cast<std::size_t>((n * 3 + c) * 16 + i);
                    const auto wi = static_cast<std::size_t>(n * 3 + c);
                    const double want =
                        t_iw.data()[wi] * x_t.data()[xi] + d_iw.data()[wi] * x_d.data()[xi];
                    CHECK(std::abs(m.data()[xi] - want) < 1e-12);
                }
    }
    SUBCASE("bilinear in features and in weights") {
        Tensor t_iw = random_tensor({2, 3, 1, 1}, rng, 0.0, 1.0);
        Tensor d_iw = random_tensor({2, 3, 1, 1}, rng, 0.0, 1.0);
        Tensor y_t = random_tensor({2, 3, 4, 4}, rng);
        Tensor y_d = random_tensor({2, 3, 4, 4}, rng);
        Tensor lhs = adaptive_fuse(nullptr, add(nullptr, x_t, y_t), add(nullptr, x_d, y_d), t_iw, d_iw);
        Tensor rhs = add(nullptr, adaptive_fuse(nullptr, x_t, x_d, t_iw, d_iw),
                         adaptive_fuse(nullptr, y_t, y_d, t_iw, d_iw));
        CHECK(max_abs_diff(lhs, rhs) < 1e-12);
        Tensor l2 = adaptive_fuse(nullptr, x_t, x_d, add(nullptr, t_iw, d_iw), add(nullptr, d_iw, t_iw));
        Tensor r2 = add(nullptr, adaptive_fuse(nullptr, x_t, x_d, t_iw, d_iw),
                        adaptive_fuse(nullptr, x_t, x_d, d_iw, t_iw));
        CHECK(max_abs_diff(l2, r2) < 1e-12);
    }
    SUBCASE("shape validation") {
        Tensor w = Tensor::full({2, 3, 1, 1}, 0.5);
        CHECK_THROWS_AS(adaptive_fuse(nullptr, x_t, Tensor::zeros({2, 3, 4, 5}), w, w), ShapeError);
        CHECK_THROWS_AS(adaptive_fuse(nullptr, x_t, x_d, Tensor::zeros({2, 3}), w), ShapeError);
    }
}

TEST_CASE("afnet forward across strategies") {
    ModelConfig base = toy_config();
    Batch batch = toy_batch(base, 2, 77);
    auto probs_of = [](const Tensor& logits) {
        return softmax_rows(nullptr, logits);
    };

    SUBCASE("logits shape and softmax normalization for every strategy") {
        for (auto strat : {FusionStrategy::DataLevel, FusionStrategy::DecisionLevel,
                           FusionStrategy::FcConcat, FusionStrategy::ConvSum,
                           FusionStrategy::ConvAdaptive}) {
            ModelConfig cfg = base;
            cfg.fusion_strategy = strat;
            cfg.iwc_enabled = strat == FusionStrategy::ConvAdaptive;
            AfnetModel model(cfg);
            Tensor logits = model.forward(nullptr, batch, true);
            CHECK(logits.shape() == Shape{2, 6});
            Tensor p = probs_of(logits);
            for (std::int64_t n = 0; n < 2; ++n) {
                double s = 0.0;
                for (std::int64_t k = 0; k < 6; ++k)
                    s += p.data()[static_cast<std::size_t>(n * 6 + k)];
                CHECK(std::abs(s - 1.0) < 1e-12);
            }
        }
    }

    SUBCASE("decision level averages the branch probabilities") {
        ModelConfig cfg = base;
        cfg.fusion_strategy = FusionStrategy::DecisionLevel;
        cfg.iwc_enabled = false;
        AfnetModel both(cfg);
        ModelConfig t_cfg = cfg;
        t_cfg.modality = Modality::Texture;
        ModelConfig d_cfg = cfg;
        d_cfg.modality = Modality::Depth;
        AfnetModel tex(t_cfg), dep(d_cfg);
        Tensor pj = probs_of(both.forward(nullptr, batch, false));
        Tensor pt = probs_of(tex.forward(nullptr, batch, false));
        Tensor pd = probs_of(dep.forward(nullptr, batch, false));
        for (std::size_t i = 0; i < pj.data().size(); ++i)
            CHECK(pj.data()[i] ==
                  doctest::Approx(0.5 * (pt.data()[i] + pd.data()[i])).epsilon(1e-12));
    }

    SUBCASE("zeroed importance convolutions reduce to the half-sum baseline") {
        ModelConfig cfg = base;
        AfnetModel adaptive(cfg);
        zero_iwc(adaptive);
        ModelConfig sum_cfg = base;
        sum_cfg.fusion_strategy = FusionStrategy::ConvSum;
        sum_cfg.iwc_enabled = false;
        sum_cfg.convsum_scale = 0.5;
        AfnetModel halfsum(sum_cfg);
        Tensor la = adaptive.forward(nullptr, batch, false);
        Tensor ls = halfsum.forward(nullptr, batch, false);
        CHECK(la.data() == ls.data());
    }

    SUBCASE("disabling mask attention equals forcing gamma=1 beta=0") {
        ModelConfig on_cfg = base;
        AfnetModel forced(on_cfg);
        force_ma_identity(forced);
        ModelConfig off_cfg = base;
        off_cfg.ma_enabled = false;
        AfnetModel off(off_cfg);
        Tensor lf = forced.forward(nullptr, batch, true);
        Tensor lo = off.forward(nullptr, batch, true);
        CHECK(lf.data() == lo.data());
    }

    SUBCASE("single-modality configs never read the other modality") {
        ModelConfig cfg = base;
        cfg.modality = Modality::Depth;
        AfnetModel model(cfg);
        Batch no_tex = batch;
        no_tex.texture = Tensor();
        Tensor a = model.forward(nullptr, no_tex, false);
        Batch junk_tex = batch;
        Rng rng(5151);
        junk_tex.texture = random_tensor({2, 3, 32, 32}, rng, -999.0, 999.0);
        Tensor b = model.forward(nullptr, junk_tex, false);
        CHECK(a.data() == b.data());
    }

    SUBCASE("missing required modality is an input error") {
        AfnetModel model(base);
        Batch no_dep = batch;
        no_dep.depth = Tensor();
        CHECK_THROWS_AS(model.forward(nullptr, no_dep, false), InputError);
    }

    SUBCASE("missing mask with MA enabled is an input error") {
        AfnetModel model(base);
        Batch no_mask = batch;
        no_mask.mask1 = Tensor();
        CHECK_THROWS_AS(model.forward(nullptr, no_mask, false), InputError);
    }
}

TEST_CASE("grad_cam") {
    SUBCASE("hand-computed 1-channel 2x2 case") {
        Tensor act = Tensor::from_data({1, 1, 2, 2}, {1.0, 2.0, 3.0, 4.0});
        std::vector<double> g{0.4, 0.4, 0.4, 0.4};  // channel weight = 0.4
        Tensor cam = AfnetModel::cam_from_activation(act, g, 4);
        // weighted map = 0.4*act, relu keeps it, normalization maps 0.4..1.6
        // onto 0..1; bilinear corners must equal the normalized map corners
        CHECK(cam.shape() == Shape{4, 4});
        CHECK(cam.data()[0] == doctest::Approx(0.0));
        CHECK(cam.data()[3] == doctest::Approx((0.8 - 0.4) / 1.2).epsilon(1e-12));
        CHECK(cam.data()[12] == doctest::Approx((1.2 - 0.4) / 1.2).epsilon(1e-12));
        CHECK(cam.data()[15] == doctest::Approx(1.0));
        // interior bilinear sample, computed by hand: y=1/3 of the way down,
        // x=1/3 across between the four normalized corners
        const double m00 = 0.0, m01 = 1.0 / 3.0, m10 = 2.0 / 3.0, m11 = 1.0;
        const double t = 1.0 / 3.0;
        const double want = (1 - t) * ((1 - t) * m00 + t * m01) + t * ((1 - t) * m10 + t * m11);
        CHECK(cam.data()[5] == doctest::Approx(want).epsilon(1e-12));
    }
    SUBCASE("negative weighted map rectifies to zero before normalization") {
        Tensor act = Tensor::from_data({1, 1, 2, 2}, {1.0, 2.0, 3.0, 4.0});
        std::vector<double> g{-1.0, -1.0, -1.0, -1.0};
        Tensor cam = AfnetModel::cam_from_activation(act, g, 2);
        for (double v : cam.data()) CHECK(v == 0.0);
    }
    SUBCASE("end-to-end contract on the toy model") {
        ModelConfig cfg = toy_config();
        AfnetModel model(cfg);
        Batch one = toy_batch(cfg, 1, 99);
        for (const auto& layer : {std::string("tex.layer3"), std::string("fused.layer4"),
                                  std::string("dep.layer2")}) {
            Tensor cam = model.grad_cam(one, 2, layer);
            CHECK(cam.shape() == Shape{32, 32});
            for (double v : cam.data()) {
                CHECK(v >= 0.0);
                CHECK(v <= 1.0);
            }
        }
        CHECK_THROWS_AS(model.grad_cam(one, 2, "nope.layer9"), InputError);
        CHECK_THROWS_AS(model.grad_cam(one, 9, "tex.layer3"), ContractError);
        Tensor c1 = model.grad_cam(one, 2, "tex.layer3");
        Tensor c2 = model.grad_cam(one, 2, "tex.layer3");
        CHECK(c1.data() == c2.data());
    }
}

TEST_CASE("count_params") {
    SUBCASE("closed-form single convolutions") {
        // one 1x1 conv 64->64 carries 64*64 + 64 = 4160 parameters; an MA
        // module at a 64-wide layer carries four of them per branch
        ModelConfig cfg;
        cfg.input_size = 224;
        cfg.widths = {64, 128, 256, 512};
        cfg.ma_enabled = true;
        cfg.ma_positions = {1};
        cfg.modality = Modality::Texture;
        ParamReport rep = count_params(cfg);
        for (const auto& c : rep.components)
            if (c.component == "ma") CHECK(c.count == 4 * 4160);
    }
    SUBCASE("reflection oracle on the toy config") {
        ModelConfig cfg = toy_config();
        AfnetModel model(cfg);
        std::int64_t direct = 0;
        for (const auto& [name, t] : model.params().entries()) direct += t.numel();
        CHECK(count_params(cfg).total == direct);
    }
    SUBCASE("reflection oracle across strategies and modalities") {
        for (auto strat : {FusionStrategy::DataLevel, FusionStrategy::DecisionLevel,
                           FusionStrategy::FcConcat, FusionStrategy::ConvSum,
                           FusionStrategy::ConvAdaptive}) {
            ModelConfig cfg = toy_config();
            cfg.fusion_strategy = strat;
            cfg.iwc_enabled = strat == FusionStrategy::ConvAdaptive;
            AfnetModel model(cfg);
            std::int64_t direct = 0;
            for (const auto& [name, t] : model.params().entries()) direct += t.numel();
            CHECK(count_params(cfg).total == direct);
        }
        for (auto m : {Modality::Texture, Modality::Depth}) {
            ModelConfig cfg = toy_config();
            cfg.modality = m;
            AfnetModel model(cfg);
            std::int64_t direct = 0;
            for (const auto& [name, t] : model.params().entries()) direct += t.numel();
            CHECK(count_params(cfg).total == direct);
        }
    }
    SUBCASE("monotone overheads") {
        ModelConfig full = toy_config();
        full.widths = {64, 128, 256, 512};
        full.input_size = 224;
        ModelConfig no_ma = full;
        no_ma.ma_enabled = false;
        ModelConfig no_ma_no_iwc = no_ma;
        no_ma_no_iwc.fusion_strategy = FusionStrategy::ConvSum;
        no_ma_no_iwc.iwc_enabled = false;
        const auto t_full = count_params(full).total;
        const auto t_no_ma = count_params(no_ma).total;
        const auto t_base = count_params(no_ma_no_iwc).total;
        CHECK(t_full > t_no_ma);
        CHECK(t_no_ma > t_base);
        const auto ma_over = t_full - t_no_ma;
        const auto iwc_over = t_no_ma - t_base;
        CHECK(ma_over < iwc_over);
        CHECK(iwc_over < t_base / 10);
    }
}

TEST_CASE("checkpoint round trip") {
    namespace fs = std::filesystem;
    ModelConfig cfg = toy_config();
    AfnetModel model(cfg);
    Batch batch = toy_batch(cfg, 2, 3);
    model.forward(nullptr, batch, true);  // move the running stats off init
    fs::path dir = fs::temp_directory_path() / "afnet_ckpt_test";
    fs::remove_all(dir);
    save_checkpoint(dir.string(), model);
    AfnetModel back = load_checkpoint(dir.string());
    Tensor a = model.forward(nullptr, batch, false);
    Tensor b = back.forward(nullptr, batch, false);
    CHECK(a.data() == b.data());
    CHECK_THROWS_AS(load_checkpoint((dir / "missing").string()), InputError);
    fs::remove_all(dir);
}
