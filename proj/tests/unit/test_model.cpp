#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "cifs/model/checkpoint.hpp"
#include "cifs/model/model.hpp"
#include "doctest.h"
#include "fixtures.hpp"
#include "support.hpp"

using namespace cifs;
using namespace cifs::model;
using cifs::testing::max_abs_diff;
using cifs::testing::random_tensor;
using cifs::testing::relative_error;
using cifs::testing::tiny_arch;

namespace {

// Mean softmax cross-entropy and its logit gradient, written independently of the library.
double ce_oracle(const Tensor<double>& logits, const std::vector<std::size_t>& y,
                 Tensor<double>* grad, double weight) {
  const std::size_t N = logits.dim(0), K = logits.dim(1);
  double total = 0;
  for (std::size_t n = 0; n < N; ++n) {
    double mx = -INFINITY;
    for (std::size_t k = 0; k < K; ++k) mx = std::max(mx, logits(n, k));
    double z = 0;
    for (std::size_t k = 0; k < K; ++k) z += std::exp(logits(n, k) - mx);
    total += std::log(z) + mx - logits(n, y[n]);
    if (grad)
      for (std::size_t k = 0; k < K; ++k)
        (*grad)(n, k) = weight * (std::exp(logits(n, k) - mx) / z - (k == y[n] ? 1.0 : 0.0)) /
                        static_cast<double>(N);
  }
  return total / static_cast<double>(N);
}

struct BetaLoss {
  double beta;
  double value(const ForwardState<double>& st, const std::vector<std::size_t>& y,
               Tensor<double>* d_final = nullptr, std::vector<Tensor<double>>* d_raw = nullptr) const {
    const double I = static_cast<double>(st.raw_logits.size());
    const double wf = I == 0 ? 1.0 : 1.0 / (1.0 + beta);
    const double wr = I == 0 ? 0.0 : beta / ((1.0 + beta) * I);
    if (d_final) *d_final = Tensor<double>(st.logits.shape());
    double loss = wf * ce_oracle(st.logits, y, d_final, wf);
    if (d_raw) d_raw->clear();
    for (const auto& r : st.raw_logits) {
      Tensor<double> g(r.shape());
      loss += wr * ce_oracle(r, y, d_raw ? &g : nullptr, wr);
      if (d_raw) d_raw->push_back(std::move(g));
    }
    return loss;
  }
};

template <typename Real>
Tensor<Real> naive_conv(const Tensor<Real>& x, const Tensor<Real>& w, std::size_t k, std::size_t s,
                        std::size_t p, std::size_t out) {
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Ho = (H + 2 * p - k) / s + 1, Wo = (W + 2 * p - k) / s + 1;
  Tensor<Real> y({N, out, Ho, Wo});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < out; ++o)
      for (std::size_t oy = 0; oy < Ho; ++oy)
        for (std::size_t ox = 0; ox < Wo; ++ox) {
          double acc = 0;
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t ky = 0; ky < k; ++ky)
              for (std::size_t kx = 0; kx < k; ++kx) {
                const long iy = static_cast<long>(oy * s + ky) - static_cast<long>(p);
                const long ix = static_cast<long>(ox * s + kx) - static_cast<long>(p);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(H) || ix >= static_cast<long>(W)) continue;
                acc += x[((n * C + c) * H + iy) * W + ix] * w[o * C * k * k + (c * k + ky) * k + kx];
              }
          y[((n * out + o) * Ho + oy) * Wo + ox] = static_cast<Real>(acc);
        }
  return y;
}

}  // namespace

TEST_SUITE("layers") {
  TEST_CASE("conv matches a direct convolution") {
    std::mt19937_64 rng(1);
    for (auto [k, s, p] : {std::tuple{3, 1, 1}, {3, 2, 1}, {1, 2, 0}, {1, 1, 0}}) {
      Conv2d<double> conv(3, 5, k, s, p);
      Rng r(2);
      conv.initialize(r);
      const auto x = random_tensor<double>({2, 3, 7, 6}, rng);
      Conv2d<double>::Cache cache;
      const auto y = conv.forward(x, cache);
      const auto ref = naive_conv(x, conv.parameters()[0].value, k, s, p, 5);
      REQUIRE(y.shape() == ref.shape());
      CHECK(max_abs_diff(y, ref) < 1e-12);
    }
  }

  TEST_CASE("conv and batch-norm backward match finite differences") {
    std::mt19937_64 rng(3);
    for (Phase phase : {Phase::train, Phase::eval}) {
      Conv2d<double> conv(2, 3, 3, 2, 1);
      BatchNorm2d<double> bn(3);
      Rng r(4);
      conv.initialize(r);
      bn.parameters()[0].value = random_tensor<double>({3}, rng, 0.5, 1.5);
      bn.parameters()[1].value = random_tensor<double>({3}, rng);
      bn.running_mean() = random_tensor<double>({3}, rng);
      bn.running_var() = random_tensor<double>({3}, rng, 0.5, 2.0);
      conv.set_slot(0);
      bn.set_slot(1);
      auto x = random_tensor<double>({3, 2, 5, 5}, rng);
      const auto probe = random_tensor<double>({3, 3, 3, 3}, rng);

      auto f = [&](const Tensor<double>& in) {
        Conv2d<double>::Cache cc;
        BatchNorm2d<double>::Cache bc;
        const auto y = bn.forward(conv.forward(in, cc), phase, bc);
        double s = 0;
        for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * probe[i];
        return s;
      };
      Conv2d<double>::Cache cc;
      BatchNorm2d<double>::Cache bc;
      bn.forward(conv.forward(x, cc), phase, bc);
      GradientSet<double> g{{Tensor<double>(conv.parameters()[0].value.shape()), Tensor<double>({3}),
                             Tensor<double>({3})}};
      const auto dx = conv.backward(bn.backward(probe, bc, &g), cc, &g);

      const double h = 1e-6;
      for (std::size_t i = 0; i < x.size(); i += 7) {
        const double v = x[i];
        x[i] = v + h;
        const double up = f(x);
        x[i] = v - h;
        const double dn = f(x);
        x[i] = v;
        CHECK(relative_error(dx[i], (up - dn) / (2 * h), 1e-6) < 1e-6);
      }
      auto check_param = [&](Tensor<double>& w, const Tensor<double>& grad) {
        for (std::size_t i = 0; i < w.size(); i += 2) {
          const double v = w[i];
          w[i] = v + h;
          const double up = f(x);
          w[i] = v - h;
          const double dn = f(x);
          w[i] = v;
          CHECK(relative_error(grad[i], (up - dn) / (2 * h), 1e-6) < 1e-6);
        }
      };
      check_param(conv.parameters()[0].value, g.slots[0]);
      check_param(bn.parameters()[0].value, g.slots[1]);
      check_param(bn.parameters()[1].value, g.slots[2]);
    }
  }

  TEST_CASE("batch-norm running statistics use the unbiased batch variance") {
    BatchNorm2d<double> bn(1);
    Tensor<double> x({2, 1, 1, 2}, std::vector<double>{1, 2, 3, 4});
    BatchNorm2d<double>::Cache c;
    bn.forward(x, Phase::train, c);
    bn.commit(c);
    CHECK(bn.running_mean()[0] == doctest::Approx(0.1 * 2.5));
    CHECK(bn.running_var()[0] == doctest::Approx(0.9 + 0.1 * (5.0 / 3.0)));
    BatchNorm2d<double>::Cache e;
    bn.forward(x, Phase::eval, e);
    bn.commit(e);
    CHECK(bn.running_mean()[0] == doctest::Approx(0.25));
  }
}

TEST_SUITE("build_model") {
  TEST_CASE("vanilla config returns no raw predictions") {
    auto m = build_model<float>(tiny_arch(), 1);
    std::mt19937_64 rng(0);
    const auto st = m.forward(random_tensor<float>({3, 3, 8, 8}, rng, 0, 1));
    CHECK(st.raw_logits.empty());
    CHECK(st.logits.shape() == Shape{3, 4});
  }

  TEST_CASE("same config and seed give bit-identical parameters") {
    const auto arch = tiny_arch().with_default_cifs();
    auto a = build_model<float>(arch, 42), b = build_model<float>(arch, 42), c = build_model<float>(arch, 43);
    const auto ta = a.state_tensors(), tb = b.state_tensors(), tc = c.state_tensors();
    bool any_diff = false;
    for (const auto& [name, t] : ta) {
      CHECK(*t == *tb.at(name));
      any_diff = any_diff || !(*t == *tc.at(name));
    }
    CHECK(any_diff);
  }

  TEST_CASE("P1 alone gives one raw prediction, P1-P2 gives two in depth order") {
    auto arch = tiny_arch();
    arch.cifs = {{Position::P1, {}}};
    auto one = build_model<float>(arch, 1);
    auto two = build_model<float>(tiny_arch().with_default_cifs(), 1);
    std::mt19937_64 rng(0);
    const auto x = random_tensor<float>({2, 3, 8, 8}, rng, 0, 1);
    CHECK(one.forward(x).raw_logits.size() == 1);
    const auto st = two.forward(x);
    REQUIRE(st.raw_logits.size() == 2);
    CHECK(two.cifs_position(0) == Position::P2);
    CHECK(two.cifs_position(1) == Position::P1);
    CHECK(two.cifs_layer(0).probe().kind() == core::ProbeKind::mlp2);
    CHECK(two.cifs_layer(1).probe().kind() == core::ProbeKind::linear);
    for (const auto& r : st.raw_logits) CHECK(r.shape() == Shape{2, 4});
  }

  TEST_CASE("vanilla and CIFS models from one seed share the backbone") {
    auto v = build_model<float>(tiny_arch(), 5);
    auto c = build_model<float>(tiny_arch().with_default_cifs(), 5);
    const auto tc = c.state_tensors();
    for (const auto& [name, t] : v.state_tensors()) CHECK(*t == *tc.at(name));
  }

  TEST_CASE("invalid configurations are rejected") {
    auto a = tiny_arch();
    a.cifs = {{Position::P1, {}}, {Position::P1, {}}};
    CHECK_THROWS_AS(Model<float>{a}, ConfigError);
    CHECK_THROWS_AS(parse_family("vgg"), ConfigError);
    CHECK_THROWS_AS(parse_position("P3"), ConfigError);
    auto b = tiny_arch().with_default_cifs();
    b.cifs[0].probe.hidden = 0;
    CHECK_THROWS_AS(Model<float>{b}, ConfigError);
    auto c = tiny_arch();
    c.norm_std = {1, 0, 1};
    CHECK_THROWS_AS(Model<float>{c}, ConfigError);
  }

  TEST_CASE("config JSON round-trips and unknown keys fail") {
    const auto a = tiny_arch().with_default_cifs();
    const auto b = ArchConfig::from_json(a.to_json());
    CHECK(a.to_json() == b.to_json());
    CHECK(a.hash() == b.hash());
    CHECK(a.hash() != a.vanilla().hash());
    auto j = a.to_json();
    j["widht"] = 2;
    CHECK_THROWS_AS(ArchConfig::from_json(j), ConfigError);
  }
}

TEST_SUITE("build_probe") {
  TEST_CASE("parameter counts") {
    CHECK(build_probe<float>({core::ProbeKind::linear}, 512, 10).parameter_count() == 512 * 10 + 10);
    CHECK(build_probe<float>({core::ProbeKind::mlp2, 256}, 512, 10).parameter_count() ==
          512 * 256 + 256 + 256 * 10 + 10);
    CHECK_THROWS_AS(build_probe<float>({core::ProbeKind::mlp2, 0}, 512, 10), ConfigError);
  }

  TEST_CASE("default CIFS placement uses mlp2 upstream and linear at the last block") {
    ArchConfig a;
    a = a.with_default_cifs();
    auto m = Model<float>(a);
    CHECK(m.cifs_layer(0).probe().channels() == 512);
    CHECK(m.cifs_layer(0).probe().hidden_width() == 256);
    CHECK(m.cifs_layer(1).probe().parameter_count() == 512 * 10 + 10);
    CHECK(m.cifs_layer(1).top_k() == 2);
    CHECK(m.cifs_layer(1).imgf().kind == core::ImgfKind::softmax);
  }
}

TEST_SUITE("forward") {
  TEST_CASE("masks forced to one reproduce the vanilla logits") {
    auto vanilla = build_model<float>(tiny_arch(), 9);
    auto cifs = build_model<float>(tiny_arch().with_default_cifs(), 9);
    cifs.set_mask_override(1.0f);
    std::mt19937_64 rng(1);
    for (int rep = 0; rep < 10; ++rep) {
      const auto x = random_tensor<float>({4, 3, 8, 8}, rng, 0, 1);
      const std::vector<std::size_t> y{0, 1, 2, 3};
      for (Phase ph : {Phase::eval, Phase::train}) {
        const auto a = vanilla.forward(x, {ph, {}});
        const auto b = cifs.forward(x, {ph, y});
        CHECK(max_abs_diff(a.logits, b.logits) <= 1e-6);
      }
    }
  }

  TEST_CASE("duplicated samples give identical rows") {
    auto m = build_model<float>(tiny_arch().with_default_cifs(), 3);
    std::mt19937_64 rng(2);
    const auto one = random_tensor<float>({1, 3, 8, 8}, rng, 0, 1);
    Tensor<float> x({3, 3, 8, 8});
    for (std::size_t n = 0; n < 3; ++n) std::copy(one.values().begin(), one.values().end(), x.row(n).begin());
    const auto st = m.forward(x);
    for (const auto* t : {&st.logits, &st.raw_logits[0], &st.raw_logits[1]})
      for (std::size_t n = 1; n < 3; ++n)
        for (std::size_t k = 0; k < 4; ++k) CHECK((*t)(n, k) == (*t)(0, k));
  }

  TEST_CASE("wrong input shape is a configuration error") {
    auto m = build_model<float>(tiny_arch(), 3);
    CHECK_THROWS_AS(m.forward(Tensor<float>({2, 1, 8, 8})), ConfigError);
  }

  TEST_CASE("non-finite input is a numerical error") {
    auto m = build_model<float>(tiny_arch(), 3);
    Tensor<float> x({2, 3, 8, 8}, 0.5f);
    x[3 * 64 + 5] = NAN;
    try {
      m.forward(x);
      FAIL("expected NumericalError");
    } catch (const NumericalError& e) {
      REQUIRE(e.sample_index().has_value());
      CHECK(*e.sample_index() == 1);
    }
  }

  TEST_CASE("normalization round-trips pixels") {
    auto m = build_model<double>(tiny_arch(), 1);
    std::mt19937_64 rng(4);
    const auto x = random_tensor<double>({2, 3, 8, 8}, rng, 0, 1);
    CHECK(max_abs_diff(m.normalization().inverse(m.normalization().forward(x)), x) <= 1e-6);
    const auto n = m.normalization().forward(x);
    CHECK(n[0] == doctest::Approx((x[0] - 0.5) / 0.25));
  }
}

TEST_SUITE("gradients") {
  struct GradFixture {
    Model<double> model;
    std::vector<std::size_t> y{0, 1, 2, 3};
    Tensor<double> x;
    ForwardOptions opts;
    BetaLoss loss{2.0};

    GradFixture(ArchConfig arch, Phase phase) : model(build_model<double>(arch, 11)) {
      std::mt19937_64 rng(7);
      x = random_tensor<double>({4, 3, 8, 8}, rng, 0.05, 0.95);
      opts = {phase, phase == Phase::train ? std::span<const std::size_t>(y) : std::span<const std::size_t>()};
    }

    double f() const { return loss.value(model.forward(x, opts), y); }

    Tensor<double> grad_x(core::GradMode mode, GradientSet<double>* g = nullptr) const {
      const auto st = model.forward(x, opts);
      Tensor<double> d_final;
      std::vector<Tensor<double>> d_raw;
      loss.value(st, y, &d_final, &d_raw);
      return model.backward(st, d_final, d_raw, mode, g);
    }
  };

  double fd(const std::function<double()>& f, double& v, double h) {
    const double v0 = v;
    v = v0 + h;
    const double up = f();
    v = v0 - h;
    const double dn = f();
    v = v0;
    return (up - dn) / (2 * h);
  }

  TEST_CASE("detached input gradient of the adaptive loss matches finite differences") {
    // ReLU and linear probes make the mask locally constant in x, so the
    // detached gradient is the exact derivative away from kinks.
    for (Phase phase : {Phase::eval, Phase::train}) {
      GradFixture fx(tiny_arch().with_default_cifs(), phase);
      const auto g = fx.grad_x(core::GradMode::detached);
      std::mt19937_64 pick(3);
      for (int i = 0; i < 20; ++i) {
        const std::size_t idx = pick() % fx.x.size();
        const double num = fd([&] { return fx.f(); }, fx.x[idx], 1e-5);
        CHECK(relative_error(g[idx], num, 1e-7) < 1e-3);
      }
    }
  }

  TEST_CASE("through mode is exact for a smooth probe, detached is not") {
    auto arch = tiny_arch().with_default_cifs();
    arch.cifs[0].probe.activation = core::ProbeActivation::tanh;
    GradFixture fx(arch, Phase::eval);
    const auto through = fx.grad_x(core::GradMode::through);
    const auto detached = fx.grad_x(core::GradMode::detached);
    CHECK(max_abs_diff(through, detached) > 1e-6);
    std::mt19937_64 pick(5);
    for (int i = 0; i < 20; ++i) {
      const std::size_t idx = pick() % fx.x.size();
      const double num = fd([&] { return fx.f(); }, fx.x[idx], 1e-5);
      CHECK(relative_error(through[idx], num, 1e-7) < 1e-3);
    }
  }

  TEST_CASE("through-mode parameter gradients match finite differences") {
    GradFixture fx(tiny_arch().with_default_cifs(), Phase::train);
    auto g = fx.model.make_gradients();
    fx.grad_x(core::GradMode::through, &g);
    auto params = fx.model.parameters();
    REQUIRE(params.size() == g.slots.size());
    std::mt19937_64 pick(9);
    for (std::size_t p = 0; p < params.size(); ++p) {
      auto& w = params[p]->value;
      for (int i = 0; i < 3; ++i) {
        const std::size_t idx = pick() % w.size();
        const double num = fd([&] { return fx.f(); }, w[idx], 1e-5);
        CHECK_MESSAGE(relative_error(g.slots[p][idx], num, 1e-7) < 1e-3, "parameter ", p, " index ", idx);
      }
    }
  }

  TEST_CASE("every parameter receives gradient, probes included") {
    GradFixture fx(tiny_arch().with_default_cifs(), Phase::train);
    auto g = fx.model.make_gradients();
    fx.grad_x(core::GradMode::detached, &g);
    for (std::size_t p = 0; p < g.slots.size(); ++p) {
      double norm = 0;
      for (double v : g.slots[p].values()) norm += std::abs(v);
      CHECK_MESSAGE(norm > 0, "slot ", p);
    }
  }
}

TEST_SUITE("diagnostic access") {
  TEST_CASE("final-layer weights are the initializer output with (K, C) shape") {
    auto m = build_model<float>(tiny_arch(), 3);
    const auto& w = m.final_layer_weights();
    CHECK(w.shape() == Shape{4, 64});
    CHECK(&w == m.state_tensors().at("fc.weight"));
  }

  TEST_CASE("penultimate activations of a CIFS model are the vanilla ones scaled by the last mask") {
    auto arch = tiny_arch();
    arch.cifs = {{Position::P1, {}}};
    arch.imgf = core::ImgfConfig::sigmoid(10.0);
    auto vanilla = build_model<double>(tiny_arch(), 8);
    auto cifs = build_model<double>(arch, 8);
    std::mt19937_64 rng(1);
    const auto x = random_tensor<double>({3, 3, 8, 8}, rng, 0, 1);
    const auto a = vanilla.forward(x);
    const auto b = cifs.forward(x);
    const auto expected = core::apply_mask(core::FeatureMap<double>(a.features), b.cifs[0].mask);
    CHECK(max_abs_diff(b.features, expected.tensor()) < 1e-12);
    const auto pen = cifs.penultimate_channel_activations(x);
    const auto pen_v = vanilla.penultimate_channel_activations(x);
    for (std::size_t n = 0; n < 3; ++n)
      for (std::size_t c = 0; c < 64; ++c)
        CHECK(pen(n, c) == doctest::Approx(pen_v(n, c) * b.cifs[0].mask.values(n, c)).epsilon(1e-12));
  }
}

TEST_SUITE("checkpoint") {
  const auto dir = std::filesystem::temp_directory_path() / "cifs_test_model";

  TEST_CASE("save and load reproduce the model exactly") {
    auto m = build_model<float>(tiny_arch().with_default_cifs(), 21);
    auto ck = make_checkpoint(m, 21, 3);
    ck.extra = {{"note", "x"}};
    ck.tensors["optim.momentum.0"] = Tensor<double>({2}, std::vector<double>{0.1, 1.0 / 3.0});
    save_checkpoint(dir / "a.ckpt", ck);
    const auto back = load_checkpoint(dir / "a.ckpt");
    CHECK(back.seed == 21);
    CHECK(back.epoch == 3);
    CHECK(back.extra["note"] == "x");
    CHECK(back.tensors.at("optim.momentum.0")[1] == 1.0 / 3.0);
    auto m2 = model_from_checkpoint<float>(back);
    for (const auto& [name, t] : m.state_tensors()) CHECK(*t == *m2.state_tensors().at(name));
  }

  TEST_CASE("architecture mismatch and corruption are detected") {
    auto m = build_model<float>(tiny_arch().with_default_cifs(), 1);
    save_checkpoint(dir / "b.ckpt", make_checkpoint(m, 1, 0));
    auto other = build_model<float>(tiny_arch(), 1);
    CHECK_THROWS_AS(restore_model(other, load_checkpoint(dir / "b.ckpt")), ConfigError);

    {
      std::fstream f(dir / "b.ckpt", std::ios::in | std::ios::out | std::ios::binary);
      f.seekp(0);
      f.put('X');
    }
    CHECK_THROWS_AS(load_checkpoint(dir / "b.ckpt"), FormatError);
    CHECK_THROWS_AS(load_checkpoint(dir / "missing.ckpt"), IoError);
    std::filesystem::resize_file(dir / "a.ckpt", 100);
    CHECK_THROWS_AS(load_checkpoint(dir / "a.ckpt"), FormatError);
  }
}
