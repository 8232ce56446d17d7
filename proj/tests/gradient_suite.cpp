#include "gradient_suite.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>

#include "aslip/loss.hpp"
#include "aslip/model.hpp"
#include "oracles.hpp"

namespace gradient_suite {

namespace ag = aslip::ag;
using oracle::GradFn;
using oracle::random_tensor;
using oracle::TapeD;
using oracle::TensorD;

namespace {

struct Case {
  GradFn f;
  std::vector<TensorD> inputs;
};

using Generator = std::function<Case(std::mt19937_64&)>;

ag::Index pick(std::mt19937_64& rng, ag::Index lo, ag::Index hi) {
  return std::uniform_int_distribution<ag::Index>(lo, hi)(rng);
}

TensorD rnd(std::mt19937_64& rng, const ag::Shape& s, double lo = -1.0, double hi = 1.0) {
  return random_tensor(s, rng(), lo, hi);
}

// Values bounded away from zero, for ops with a kink at the origin.
TensorD away_from_zero(std::mt19937_64& rng, const ag::Shape& s) {
  TensorD t = rnd(rng, s);
  for (ag::Index i = 0; i < t.size(); ++i) t.values[i] += t.values[i] >= 0 ? 0.05 : -0.05;
  return t;
}

ag::Shape random_shape(std::mt19937_64& rng, int max_rank = 4) {
  ag::Shape s(static_cast<std::size_t>(pick(rng, 1, max_rank)));
  for (auto& d : s) d = pick(rng, 1, 4);
  return s;
}

std::vector<aslip::loss::SlipLabel> random_labels(std::mt19937_64& rng, ag::Index n) {
  std::vector<aslip::loss::SlipLabel> labels;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (ag::Index i = 0; i < n; ++i) {
    const double angle = 6.283185307179586 * u(rng);
    const double mag = u(rng) < 0.3 ? 0.2 * u(rng) : 0.6 + 4.0 * u(rng);
    auto l = aslip::loss::SlipLabel::from_displacement(mag * Eigen::Vector2d(std::cos(angle), std::sin(angle)), 0.5);
    if (l.is_slip && u(rng) < 0.6) {
      const double a2 = angle + u(rng) - 0.5;
      l.has_prev = true;
      l.prev_d_star = Eigen::Vector2d(std::cos(a2), std::sin(a2));
    }
    labels.push_back(l);
  }
  // Guarantee at least one slip window so every term is exercised.
  if (std::none_of(labels.begin(), labels.end(), [](const auto& l) { return l.is_slip; })) {
    labels[0] = aslip::loss::SlipLabel::from_displacement(Eigen::Vector2d(2.0, 1.0), 0.5);
  }
  return labels;
}

std::vector<std::pair<std::string, Generator>> generators() {
  std::vector<std::pair<std::string, Generator>> g;

  g.emplace_back("add", [](auto& rng) {
    const auto s = random_shape(rng);
    return Case{[](TapeD& t, const auto& v) { return ag::add(t, v[0], v[1]); }, {rnd(rng, s), rnd(rng, s)}};
  });
  g.emplace_back("sub", [](auto& rng) {
    const auto s = random_shape(rng);
    return Case{[](TapeD& t, const auto& v) { return ag::sub(t, v[0], v[1]); }, {rnd(rng, s), rnd(rng, s)}};
  });
  g.emplace_back("mul", [](auto& rng) {
    const auto s = random_shape(rng);
    return Case{[](TapeD& t, const auto& v) { return ag::mul(t, v[0], v[1]); }, {rnd(rng, s), rnd(rng, s)}};
  });
  g.emplace_back("scale", [](auto& rng) {
    const double k = std::uniform_real_distribution<double>(-3, 3)(rng);
    return Case{[k](TapeD& t, const auto& v) { return ag::scale(t, v[0], k); }, {rnd(rng, random_shape(rng))}};
  });
  g.emplace_back("sum", [](auto& rng) {
    return Case{[](TapeD& t, const auto& v) { return ag::sum(t, v[0]); }, {rnd(rng, random_shape(rng))}};
  });
  g.emplace_back("mean", [](auto& rng) {
    return Case{[](TapeD& t, const auto& v) { return ag::mean(t, v[0]); }, {rnd(rng, random_shape(rng))}};
  });
  g.emplace_back("mean_axis", [](auto& rng) {
    const auto s = random_shape(rng);
    const ag::Index axis = pick(rng, 0, static_cast<ag::Index>(s.size()) - 1);
    return Case{[axis](TapeD& t, const auto& v) { return ag::mean_axis(t, v[0], axis); }, {rnd(rng, s)}};
  });
  g.emplace_back("broadcast_axis", [](auto& rng) {
    const auto s = random_shape(rng, 3);
    const ag::Index axis = pick(rng, 0, static_cast<ag::Index>(s.size()));
    const ag::Index count = pick(rng, 1, 4);
    return Case{[axis, count](TapeD& t, const auto& v) { return ag::broadcast_axis(t, v[0], axis, count); },
                {rnd(rng, s)}};
  });
  g.emplace_back("reshape", [](auto& rng) {
    const auto s = random_shape(rng);
    const ag::Shape flat{ag::numel(s)};
    return Case{[flat](TapeD& t, const auto& v) { return ag::reshape(t, v[0], flat); }, {rnd(rng, s)}};
  });
  g.emplace_back("concat", [](auto& rng) {
    auto s = random_shape(rng);
    const ag::Index axis = pick(rng, 0, static_cast<ag::Index>(s.size()) - 1);
    auto s2 = s;
    s2[static_cast<std::size_t>(axis)] = pick(rng, 1, 3);
    return Case{[axis](TapeD& t, const auto& v) { return ag::concat(t, {v[0], v[1]}, axis); },
                {rnd(rng, s), rnd(rng, s2)}};
  });
  g.emplace_back("relu", [](auto& rng) {
    return Case{[](TapeD& t, const auto& v) { return ag::relu(t, v[0]); }, {away_from_zero(rng, random_shape(rng))}};
  });
  g.emplace_back("sigmoid", [](auto& rng) {
    return Case{[](TapeD& t, const auto& v) { return ag::sigmoid(t, v[0]); }, {rnd(rng, random_shape(rng), -4, 4)}};
  });
  g.emplace_back("tanh", [](auto& rng) {
    return Case{[](TapeD& t, const auto& v) { return ag::tanh(t, v[0]); }, {rnd(rng, random_shape(rng), -2, 2)}};
  });
  g.emplace_back("softplus", [](auto& rng) {
    return Case{[](TapeD& t, const auto& v) { return ag::softplus(t, v[0]); }, {rnd(rng, random_shape(rng), -4, 4)}};
  });
  g.emplace_back("softmax", [](auto& rng) {
    const auto s = random_shape(rng);
    const ag::Index axis = pick(rng, 0, static_cast<ag::Index>(s.size()) - 1);
    return Case{[axis](TapeD& t, const auto& v) { return ag::softmax(t, v[0], axis); }, {rnd(rng, s, -2, 2)}};
  });
  g.emplace_back("dropout", [](auto& rng) {
    const double p = std::uniform_real_distribution<double>(0.1, 0.6)(rng);
    const auto seed = rng();
    return Case{[p, seed](TapeD& t, const auto& v) {
                  aslip::Rng r(seed);  // same mask on every evaluation
                  return ag::dropout(t, v[0], p, ag::Mode::Train, r);
                },
                {rnd(rng, random_shape(rng))}};
  });
  g.emplace_back("linear", [](auto& rng) {
    const ag::Index n = pick(rng, 1, 4), in = pick(rng, 1, 5), out = pick(rng, 1, 4);
    return Case{[](TapeD& t, const auto& v) { return ag::linear(t, v[0], v[1], v[2]); },
                {rnd(rng, {n, in}), rnd(rng, {out, in}), rnd(rng, {out})}};
  });
  g.emplace_back("conv2d", [](auto& rng) {
    const ag::Index n = pick(rng, 1, 2), cin = pick(rng, 1, 3), cout = pick(rng, 1, 3);
    const ag::Index h = pick(rng, 1, 6), w = pick(rng, 1, 6), kh = 2 * pick(rng, 0, 2) + 1, kw = 2 * pick(rng, 0, 2) + 1;
    return Case{[](TapeD& t, const auto& v) { return ag::conv2d(t, v[0], v[1], v[2]); },
                {rnd(rng, {n, cin, h, w}), rnd(rng, {cout, cin, kh, kw}), rnd(rng, {cout})}};
  });
  g.emplace_back("conv1d", [](auto& rng) {
    const ag::Index n = pick(rng, 1, 3), cin = pick(rng, 1, 4), cout = pick(rng, 1, 4);
    const ag::Index len = pick(rng, 1, 9), k = 2 * pick(rng, 0, 3) + 1;
    return Case{[](TapeD& t, const auto& v) { return ag::conv1d(t, v[0], v[1], v[2]); },
                {rnd(rng, {n, cin, len}), rnd(rng, {cout, cin, k}), rnd(rng, {cout})}};
  });
  g.emplace_back("batchnorm_train", [](auto& rng) {
    ag::Shape s{pick(rng, 3, 5), pick(rng, 1, 4)};
    for (ag::Index extra = pick(rng, 0, 2); extra > 0; --extra) s.push_back(pick(rng, 1, 3));
    const ag::Index f = s[1];
    return Case{[f](TapeD& t, const auto& v) {
                  ag::BatchNormState<double> st(f);
                  return ag::batchnorm(t, v[0], v[1], v[2], st, ag::Mode::Train);
                },
                {rnd(rng, s, -2, 2), rnd(rng, {f}, 0.5, 1.5), rnd(rng, {f})}};
  });
  g.emplace_back("batchnorm_eval", [](auto& rng) {
    ag::Shape s{pick(rng, 1, 3), pick(rng, 1, 4), pick(rng, 1, 3)};
    const ag::Index f = s[1];
    ag::BatchNormState<double> base(f);
    base.running_mean = rnd(rng, {f}).values;
    base.running_var = rnd(rng, {f}, 0.5, 2.0).values;
    base.initialized = true;
    return Case{[base](TapeD& t, const auto& v) mutable { return ag::batchnorm(t, v[0], v[1], v[2], base, ag::Mode::Eval); },
                {rnd(rng, s), rnd(rng, {f}), rnd(rng, {f})}};
  });
  g.emplace_back("max_pool_freq", [](auto& rng) {
    const ag::Index pool = pick(rng, 1, 4);
    const ag::Shape s{pick(rng, 1, 2), pick(rng, 1, 3), pool * pick(rng, 1, 3) + pick(rng, 0, pool - 1), pick(rng, 1, 4)};
    return Case{[pool](TapeD& t, const auto& v) { return ag::max_pool_freq(t, v[0], pool); }, {rnd(rng, s)}};
  });
  g.emplace_back("channel_fuse", [](auto& rng) {
    const ag::Index n = pick(rng, 1, 3), k = pick(rng, 1, 4), r = pick(rng, 1, 4), len = pick(rng, 1, 5);
    return Case{[](TapeD& t, const auto& v) { return ag::channel_fuse(t, v[0], v[1]); },
                {rnd(rng, {n, k, r, len}), rnd(rng, {n, k, len})}};
  });
  g.emplace_back("attention_pool", [](auto& rng) {
    const ag::Index n = pick(rng, 1, 3), c = pick(rng, 1, 4), len = pick(rng, 1, 6);
    return Case{[](TapeD& t, const auto& v) { return ag::attention_pool(t, v[0], v[1]); },
                {rnd(rng, {n, c, len}), rnd(rng, {n, len})}};
  });
  g.emplace_back("total_loss", [](auto& rng) {
    const ag::Index n = pick(rng, 1, 8);
    auto labels = random_labels(rng, n);
    aslip::loss::LossConfig cfg;
    cfg.pos_weight = std::uniform_real_distribution<double>(0.5, 3.0)(rng);
    cfg.smooth_on_prediction = pick(rng, 0, 1) == 1;
    std::vector<int> prev(static_cast<std::size_t>(n), -1);
    for (ag::Index i = 1; i < n; ++i) prev[static_cast<std::size_t>(i)] = pick(rng, 0, 1) ? static_cast<int>(i - 1) : -1;
    TensorD logits = rnd(rng, {n, 2}, -1.5, 1.5);
    for (ag::Index i = 0; i < n; ++i) logits.values[2 * i] += logits.values[2 * i] >= 0 ? 0.2 : -0.2;
    return Case{[labels, cfg, prev](TapeD& t, const auto& v) {
                  return aslip::loss::total_loss(t, v[0], v[1], v[2], std::span(labels), cfg, nullptr, std::span(prev));
                },
                {rnd(rng, {n}, 0.05, 0.95), rnd(rng, {n}, 0.0, 5.0), logits}};
  });
  return g;
}

// Whole-network check: total loss w.r.t. the input and every parameter of a
// reduced-width network in train mode (batch statistics), dropout disabled.
double end_to_end_error(std::mt19937_64& rng) {
  aslip::model::ModelConfig cfg;
  cfg.channel_count = static_cast<int>(pick(rng, 1, 3));
  cfg.mel_bins = 8;
  cfg.time_frames = static_cast<int>(pick(rng, 3, 6));
  cfg.conv2d_blocks = {{3, 3, 2, 0.0}, {4, 3, 2, 0.0}};
  cfg.conv1d_layers = {{5, 3}};
  cfg.latent_dim = 6;
  cfg.gating_kernel = 3;
  cfg.gating_hidden = 3;
  cfg.attention_hidden = 4;
  cfg.per_window_weights = pick(rng, 0, 1) == 1;
  const ag::Index n = pick(rng, 2, 4);
  const auto labels = random_labels(rng, n);
  const aslip::loss::LossConfig loss_cfg;
  const TensorD input = rnd(rng, {n, cfg.channel_count, cfg.mel_bins, cfg.time_frames}, -2, 2);
  aslip::model::SlipNet<double> net(cfg, rng());

  auto loss_of = [&](aslip::model::SlipNet<double>& m, const TensorD& x) {
    TapeD tape(false);
    aslip::Rng r(1);
    const auto out = m.forward(tape, tape.constant(x), ag::Mode::Train, r);
    const auto l = aslip::loss::total_loss(tape, out.p_slip, out.magnitude, out.dir_logits, std::span(labels), loss_cfg);
    return tape.value(l).item();
  };

  TapeD tape;
  aslip::Rng r(1);
  for (auto* p : net.parameters()) p->zero_grad();
  const auto xv = tape.variable(input);
  const auto out = net.forward(tape, xv, ag::Mode::Train, r);
  tape.backward(aslip::loss::total_loss(tape, out.p_slip, out.magnitude, out.dir_logits, std::span(labels), loss_cfg));

  // Compared as one concatenated gradient vector (input first, then every
  // parameter): several parameters have structurally zero gradients (a bias
  // feeding batch norm, a softmax shift) that only carry round-off.
  const double h = 1e-6;
  std::vector<double> analytic, numeric;
  auto probe = [&](double& slot) {
    const double x0 = slot;
    slot = x0 + h;
    const double up = loss_of(net, input);
    slot = x0 - h;
    const double down = loss_of(net, input);
    slot = x0;
    numeric.push_back((up - down) / (2 * h));
  };
  TensorD x = input;
  const auto& gx = tape.grad(xv);
  for (ag::Index k = 0; k < x.size(); ++k) {
    analytic.push_back(gx[k]);
    const double x0 = x.values[k];
    x.values[k] = x0 + h;
    const double up = loss_of(net, x);
    x.values[k] = x0 - h;
    const double down = loss_of(net, x);
    x.values[k] = x0;
    numeric.push_back((up - down) / (2 * h));
  }
  for (auto* p : net.parameters()) {
    for (ag::Index k = 0; k < p->value.size(); ++k) {
      analytic.push_back(p->grad[k]);
      probe(p->value.values[k]);
    }
  }
  const Eigen::Map<const Eigen::VectorXd> a(analytic.data(), static_cast<ag::Index>(analytic.size()));
  const Eigen::Map<const Eigen::VectorXd> b(numeric.data(), static_cast<ag::Index>(numeric.size()));
  const double worst = (a - b).norm() / std::max({a.norm(), b.norm(), oracle::kGradientFloor});
  return worst;
}

}  // namespace

std::vector<OpResult> run_all(int cases, unsigned long long seed) {
  std::vector<OpResult> results;
  std::mt19937_64 rng(seed);
  for (const auto& [name, gen] : generators()) {
    OpResult r{name, 0, 0.0};
    for (int i = 0; i < cases; ++i) {
      Case c = gen(rng);
      r.worst_error = std::max(r.worst_error, oracle::gradient_error(c.f, c.inputs, rng()));
      ++r.cases;
    }
    results.push_back(r);
  }
  OpResult e2e{"end_to_end_network_loss", 0, 0.0};
  for (int i = 0; i < cases; ++i) {
    e2e.worst_error = std::max(e2e.worst_error, end_to_end_error(rng));
    ++e2e.cases;
  }
  results.push_back(e2e);
  return results;
}

}  // namespace gradient_suite
