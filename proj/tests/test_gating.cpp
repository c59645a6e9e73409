#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <vector>

#include "cosinegate/gating.hpp"
#include "cosinegate/gradcheck.hpp"
#include "cosinegate/model.hpp"

using namespace cosinegate;

namespace {

bool near(double a, double b, double tol) { return std::abs(a - b) <= tol; }

double sigma(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

TEST_CASE("cosine similarity on aligned, opposed, orthogonal pairs") {
  Tensor x = Tensor::from_data({1, 3}, {1, 2, 2});
  Tensor same = cosine_similarity_batched(x, x, 1e-8f);
  CHECK(near(same.data()[0], 1.0, 1e-6));

  Tensor neg = Tensor::from_data({1, 3}, {-1, -2, -2});
  CHECK(near(cosine_similarity_batched(x, neg, 1e-8f).data()[0], -1.0, 1e-6));

  Tensor e1 = Tensor::from_data({1, 2}, {1, 0});
  Tensor e2 = Tensor::from_data({1, 2}, {0, 1});
  CHECK(cosine_similarity_batched(e1, e2, 1e-8f).data()[0] == 0.0f);
}

TEST_CASE("zero residual trips the epsilon guard: CIR exactly one") {
  Tensor x = Tensor::from_data({2, 4}, {1, 2, 3, 4, 5, 6, 7, 8});
  Tensor r = Tensor::zeros({2, 4});
  Tensor c = cir(x, r, 1e-8f);
  CHECK(c.data()[0] == 1.0f);
  CHECK(c.data()[1] == 1.0f);

  // Guarded similarity contributes no gradient.
  Tensor xg = Tensor::from_data({1, 3}, {1, 2, 3}, /*requires_grad=*/true);
  TapeScope<float> scope;
  Tensor loss = sum_all(cir(xg, Tensor::zeros({1, 3}), 1e-8f));
  scope.tape().backward(loss);
  if (xg.has_grad()) {
    for (int i = 0; i < 3; ++i) CHECK(xg.grad()[i] == 0.0f);
  }
}

TEST_CASE("CIR stays in range over random pairs") {
  RngStream rng(101);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor x = Tensor::randn({40, 16}, rng, 3.0f);
    Tensor r = Tensor::randn({40, 16}, rng, 0.5f);
    Tensor c = cir(x, r, 1e-8f);
    for (int64_t i = 0; i < c.size(); ++i) {
      float v = c.data()[i];
      CHECK(std::isfinite(v));
      CHECK(v >= 0.0f);
      CHECK(v <= 2.0f);
    }
  }
}

TEST_CASE("CIR is invariant to positive scaling and flips under negation") {
  RngStream rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    DTensor x = DTensor::randn({4, 12}, rng);
    DTensor r = DTensor::randn({4, 12}, rng);
    double c = std::exp(rng.normal() * 2.0);  // log-uniform-ish positive scale
    DTensor rs = affine(r, c, 0.0);
    DTensor base = cir(x, r, 1e-8);
    DTensor scaled = cir(x, rs, 1e-8);
    DTensor negated = cir(x, affine(r, -c, 0.0), 1e-8);
    for (int i = 0; i < 4; ++i) {
      CHECK(near(scaled.data()[i], base.data()[i], 1e-6));
      CHECK(near(negated.data()[i], 2.0 - base.data()[i], 1e-6));
    }
  }
}

TEST_CASE("float CIR is bit-stable under power-of-two residual scaling") {
  RngStream rng(12);
  Tensor x = Tensor::randn({8, 32}, rng);
  Tensor r = Tensor::randn({8, 32}, rng);
  Tensor r4 = affine(r, 4.0f, 0.0f);
  Tensor a = cir(x, r, 1e-8f);
  Tensor b = cir(x, r4, 1e-8f);
  CHECK(std::memcmp(a.data(), b.data(), sizeof(float) * a.size()) == 0);
}

TEST_CASE("cosine gradient matches finite differences") {
  RngStream rng(19);
  DTensor x = DTensor::randn({3, 10}, rng, 1.0, /*requires_grad=*/true);
  DTensor r = DTensor::randn({3, 10}, rng, 1.0);
  FdCheckResult res = finite_difference_check<double>(
      [&](DTensor& t) { return sum_all(cosine_similarity_batched(t, r, 1e-8)); }, x,
      1e-6);
  CHECK(res.pass(1e-4));
}

TEST_CASE("controller width rule") {
  CHECK(controller_hidden_width(8) == 8);
  CHECK(controller_hidden_width(16) == 8);
  CHECK(controller_hidden_width(32) == 8);
  CHECK(controller_hidden_width(33) == 9);
  CHECK(controller_hidden_width(36) == 9);
  CHECK(controller_hidden_width(64) == 16);
}

TEST_CASE("controller is a two-layer MLP over pooled features") {
  RngStream rng(2);
  auto ctrl = make_controller<float>(8, rng);
  // Wire it by hand: hidden0 picks up channel 0's pooled mean, output reads
  // hidden0. ReLU is inactive for positive inputs.
  std::fill(ctrl.w1.weight.data(), ctrl.w1.weight.data() + ctrl.w1.weight.size(), 0.0f);
  std::fill(ctrl.w2.weight.data(), ctrl.w2.weight.data() + ctrl.w2.weight.size(), 0.0f);
  ctrl.w1.weight.data()[0] = 1.0f;  // hidden0 <- channel 0
  ctrl.w2.weight.data()[0] = 1.0f;  // out <- hidden0

  Tensor x = Tensor::zeros({2, 8, 2, 2});
  for (int i = 0; i < 4; ++i) x.data()[i] = 3.0f;           // sample 0 channel 0
  for (int i = 0; i < 4; ++i) x.data()[8 * 4 + i] = 5.0f;   // sample 1 channel 0
  Tensor out = controller_forward(x, ctrl);
  CHECK(out.shape() == Shape{2});
  CHECK(near(out.data()[0], 3.0, 1e-6));
  CHECK(near(out.data()[1], 5.0, 1e-6));
}

TEST_CASE("each controller stays far below one percent of the network") {
  GateConfig cfg;
  GatedNetwork net = build_cifar_network<float>(1, cfg, -2.5f);
  int64_t total = parameter_count(net);
  for (auto& block : net.blocks) {
    int64_t c = controller_param_count(block.controller);
    CHECK(static_cast<double>(c) < 0.01 * static_cast<double>(total));
  }
}

TEST_CASE("gate logit scales the sum of CIR and controller output") {
  Tensor cirv = Tensor::from_data({2}, {1.0f, 0.5f});
  Tensor ctrl = Tensor::from_data({2}, {0.0f, -0.3f});
  Tensor gamma = Tensor::from_data({1}, {-3.0f});
  Tensor l = gate_logit(cirv, ctrl, gamma);
  CHECK(near(l.data()[0], -3.0, 1e-6));
  CHECK(near(l.data()[1], -0.6, 1e-6));

  Tensor l2 = gate_logit(cirv, ctrl, -3.0f);
  CHECK(near(l2.data()[0], l.data()[0], 1e-7));
  CHECK(near(l2.data()[1], l.data()[1], 1e-7));

  Tensor zero_gamma = gate_logit(cirv, ctrl, 0.0f);
  CHECK(zero_gamma.data()[0] == 0.0f);
  CHECK(zero_gamma.data()[1] == 0.0f);
}

TEST_CASE("gumbel sampling is deterministic per seed with the right mean") {
  RngStream a(99), b(99), c(100);
  Tensor ga = gumbel_sample<float>({100}, a);
  Tensor gb = gumbel_sample<float>({100}, b);
  CHECK(std::memcmp(ga.data(), gb.data(), sizeof(float) * 100) == 0);
  Tensor gc = gumbel_sample<float>({100}, c);
  bool differs = false;
  for (int i = 0; i < 100; ++i) differs |= gc.data()[i] != ga.data()[i];
  CHECK(differs);

  RngStream big(4242);
  double mean = 0.0;
  constexpr int n = 1000000;
  Tensor gs = gumbel_sample<float>({n}, big);
  for (int i = 0; i < n; ++i) mean += gs.data()[i];
  mean /= n;
  CHECK(near(mean, 0.5772156649, 0.01));  // Euler–Mascheroni
}

TEST_CASE("gumbel noise is constant with respect to the tape") {
  RngStream rng(1);
  TapeScope<float> scope;
  Tensor g = gumbel_sample<float>({4, 2}, rng);
  CHECK_FALSE(g.requires_grad());
  CHECK(scope.tape().size() == 0);
}

TEST_CASE("relaxed gate oracles at zero noise") {
  Tensor noise = Tensor::zeros({1, 2});
  for (float tau : {0.25f, 1.0f, 4.0f}) {
    Tensor z = relaxed_gate(Tensor::from_data({1}, {0.0f}), noise, tau);
    CHECK(z.data()[0] == 0.5f);
  }
  Tensor z = relaxed_gate(Tensor::from_data({1}, {-2.5f}), noise, 1.0f);
  CHECK(near(z.data()[0], sigma(-2.5), 1e-6));  // ~0.0759
  Tensor z2 = relaxed_gate(Tensor::from_data({1}, {-2.5f}), noise, 0.5f);
  CHECK(near(z2.data()[0], sigma(-5.0), 1e-6));
}

TEST_CASE("relaxed gate stays strictly inside (0,1) even for extreme logits") {
  Tensor noise = Tensor::zeros({2, 2});
  Tensor z = relaxed_gate(Tensor::from_data({2}, {-1000.0f, 1000.0f}), noise, 0.01f);
  CHECK(z.data()[0] > 0.0f);
  CHECK(z.data()[0] < 1.0f);
  CHECK(z.data()[1] > 0.0f);
  CHECK(z.data()[1] < 1.0f);
}

TEST_CASE("relaxed gate validates its inputs") {
  Tensor l = Tensor::zeros({2});
  CHECK_THROWS_AS(relaxed_gate(l, Tensor::zeros({2, 2}), 0.0f), std::invalid_argument);
  CHECK_THROWS_AS(relaxed_gate(l, Tensor::zeros({2, 2}), -1.0f), std::invalid_argument);
  CHECK_THROWS_AS(relaxed_gate(l, Tensor::zeros({2}), 1.0f), std::invalid_argument);
  CHECK_THROWS_AS(relaxed_gate(l, Tensor::zeros({3, 2}), 1.0f), std::invalid_argument);
}

TEST_CASE("relaxed gate equals the two-class softmax") {
  RngStream rng(314);
  int checked = 0;
  for (int round = 0; round < 20; ++round) {
    const int b = 500;
    Tensor logit = Tensor::randn({b}, rng, 3.0f);
    Tensor noise = gumbel_sample<float>({b, 2}, rng);
    float tau = 0.25f + 3.75f * static_cast<float>(rng.uniform());
    Tensor z = relaxed_gate(logit, noise, tau);
    for (int i = 0; i < b; ++i) {
      double a0 = noise.data()[2 * i] / tau;
      double a1 = (static_cast<double>(logit.data()[i]) + noise.data()[2 * i + 1]) / tau;
      double m = std::max(a0, a1);
      double p1 = std::exp(a1 - m) / (std::exp(a0 - m) + std::exp(a1 - m));
      CHECK(near(z.data()[i], p1, 1e-6));
      ++checked;
    }
  }
  CHECK(checked == 10000);
}

TEST_CASE("mean relaxed gate at zero logit is one half") {
  RngStream rng(2718);
  const int n = 100000;
  Tensor logit = Tensor::zeros({n});
  Tensor noise = gumbel_sample<float>({n, 2}, rng);
  Tensor z = relaxed_gate(logit, noise, 1.0f);
  double mean = 0;
  for (int i = 0; i < n; ++i) mean += z.data()[i];
  mean /= n;
  CHECK(near(mean, 0.5, 0.01));
}

TEST_CASE("low temperature concentration follows the logistic law") {
  // z = sigma((l + d)/tau) with d = g1 - g0 ~ Logistic(0,1). z is within 1e-3
  // of {0,1} iff |l + d| >= tau*ln(999), so the expected miss rate at l=1,
  // tau=0.01 is sigma(t-1) - sigma(-t-1) with t = 0.01*ln(999) ~ 2.71%. The
  // sampled fraction must track that analytic value; concentration >= 99%
  // at this tolerance needs |l| >~ 2.5.
  RngStream rng(55);
  const int n = 100000;
  const double tau = 0.01;
  const double t = tau * std::log(999.0);
  for (double l : {1.0, -1.0, 3.0}) {
    Tensor logit = Tensor::full({n}, static_cast<float>(l));
    Tensor noise = gumbel_sample<float>({n, 2}, rng);
    Tensor z = relaxed_gate(logit, noise, static_cast<float>(tau));
    int concentrated = 0;
    for (int i = 0; i < n; ++i) {
      float v = z.data()[i];
      if (v <= 1e-3f || v >= 1.0f - 1e-3f) ++concentrated;
    }
    double frac = static_cast<double>(concentrated) / n;
    double expected = 1.0 - (sigma(t - l) - sigma(-t - l));
    CHECK(near(frac, expected, 0.005));
    if (std::abs(l) >= 3.0) CHECK(frac >= 0.99);
  }
}

TEST_CASE("hard gate thresholds strictly") {
  auto logit_of = [](double p) { return static_cast<float>(std::log(p / (1.0 - p))); };
  Tensor l = Tensor::from_data({3}, {logit_of(0.46), 0.0f, logit_of(0.30)});
  Tensor g = hard_gate(l, 0.45f);
  CHECK(g.data()[0] == 1.0f);  // sigma = 0.46 > 0.45
  CHECK(g.data()[1] == 1.0f);  // sigma = 0.50 > 0.45
  CHECK(g.data()[2] == 0.0f);  // sigma = 0.30 <= 0.45

  // Exact boundary: delta equal to the computed sigmoid must not open.
  float ll = 0.3f;
  float s = 1.0f / (1.0f + std::exp(-ll));
  Tensor boundary = hard_gate(Tensor::from_data({1}, {ll}), s);
  CHECK(boundary.data()[0] == 0.0f);
  Tensor above = hard_gate(Tensor::from_data({1}, {ll}), s - 1e-6f);
  CHECK(above.data()[0] == 1.0f);

  // Near the default threshold: sigma(-0.2) ~ 0.4502 opens, sigma(-0.21) ~ 0.4477
  // does not.
  Tensor close = hard_gate(Tensor::from_data({2}, {-0.2f, -0.21f}), 0.45f);
  CHECK(close.data()[0] == 1.0f);
  CHECK(close.data()[1] == 0.0f);
}

TEST_CASE("hard gate is pure: repeatable, silent on the tape, rng-free") {
  Tensor l = Tensor::from_data({4}, {-1.0f, 0.2f, 3.0f, -0.5f}, /*requires_grad=*/true);
  TapeScope<float> scope;
  Tensor a = hard_gate(l, 0.45f);
  Tensor b = hard_gate(l, 0.45f);
  CHECK(std::memcmp(a.data(), b.data(), sizeof(float) * 4) == 0);
  CHECK_FALSE(a.requires_grad());
  CHECK(scope.tape().size() == 0);
  for (int i = 0; i < 4; ++i) {
    CHECK((a.data()[i] == 0.0f || a.data()[i] == 1.0f));
  }
}

TEST_CASE("relaxed gate carries gradient through the logit") {
  Tensor l = Tensor::from_data({2}, {0.3f, -0.4f}, /*requires_grad=*/true);
  RngStream rng(8);
  Tensor noise = gumbel_sample<float>({2, 2}, rng);
  TapeScope<float> scope;
  Tensor z = relaxed_gate(l, noise, 1.0f);
  CHECK(z.requires_grad());
  scope.tape().backward(mean_all(z));
  REQUIRE(l.has_grad());
  for (int i = 0; i < 2; ++i) {
    float zi = z.data()[i];
    CHECK(near(l.grad()[i], 0.5 * zi * (1.0 - zi), 1e-6));
  }
}

TEST_CASE("gate config validation") {
  GateConfig ok;
  ok.validate();
  GateConfig bad = ok;
  bad.temperature = 0.0f;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = ok;
  bad.inference_threshold = 1.0f;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = ok;
  bad.inference_threshold = 0.0f;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = ok;
  bad.epsilon_norm = 0.0f;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}
