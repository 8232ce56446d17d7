#include "aslip/loss.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "aslip/error.hpp"

namespace aslip::loss {

namespace {

constexpr double kProbClamp = 1e-7;

double clamp_prob(double p) { return std::clamp(p, kProbClamp, 1.0 - kProbClamp); }

// d(d_hat . u)/d(logits) for d_hat = logits/||logits||; zero at the fallback.
Eigen::Vector2d cosine_grad(const Eigen::Vector2d& logits, const Eigen::Vector2d& u) {
  const double n = logits.norm();
  if (n < kDirectionNormFloor) return Eigen::Vector2d::Zero();
  const Eigen::Vector2d d = logits / n;
  return (u - d * d.dot(u)) / n;
}

struct Gradients {
  std::vector<double> p, mag;
  std::vector<Eigen::Vector2d> logits;
};

LossComponents compute(std::span<const double> p_slip, std::span<const double> magnitude,
                       std::span<const Eigen::Vector2d> dir_logits, std::span<const SlipLabel> labels,
                       const LossConfig& cfg, std::span<const int> prev_index, Gradients* g) {
  const std::size_t n = labels.size();
  if (p_slip.size() != n || magnitude.size() != n || dir_logits.size() != n) {
    throw UsageError("loss: predictions and labels are misaligned");
  }
  if (cfg.smooth_on_prediction && !prev_index.empty() && prev_index.size() != n) {
    throw UsageError("loss: predecessor index list does not match the batch");
  }
  if (n == 0) throw UsageError("loss: empty batch");

  LossComponents c;
  c.windows = static_cast<int>(n);
  std::vector<Eigen::Vector2d> d_hat(n);
  for (std::size_t i = 0; i < n; ++i) d_hat[i] = normalize_direction(dir_logits[i]);

  // Collect contributing windows per term first so that means are exact.
  std::vector<std::pair<std::size_t, Eigen::Vector2d>> smooth_pairs;  // (window, reference)
  std::vector<std::pair<std::size_t, std::size_t>> smooth_pred_pairs;  // (window, predecessor)
  for (std::size_t i = 0; i < n; ++i) {
    if (!labels[i].is_slip) continue;
    ++c.slip_windows;
    if (cfg.smooth_on_prediction) {
      if (!prev_index.empty() && prev_index[i] >= 0) {
        const auto j = static_cast<std::size_t>(prev_index[i]);
        if (j >= n) throw UsageError("loss: predecessor index out of range");
        if (labels[j].is_slip) smooth_pred_pairs.emplace_back(i, j);
      }
    } else if (labels[i].has_prev) {
      smooth_pairs.emplace_back(i, labels[i].prev_d_star);
    }
  }
  c.smooth_windows = static_cast<int>(cfg.smooth_on_prediction ? smooth_pred_pairs.size() : smooth_pairs.size());

  if (g != nullptr) {
    g->p.assign(n, 0.0);
    g->mag.assign(n, 0.0);
    g->logits.assign(n, Eigen::Vector2d::Zero());
  }
  const LossWeights& w = cfg.weights;

  for (std::size_t i = 0; i < n; ++i) {
    const double p = p_slip[i];
    c.slip += slip_bce(p, labels[i].is_slip, cfg.pos_weight);
    if (g != nullptr && p > kProbClamp && p < 1.0 - kProbClamp) {
      const double dp = labels[i].is_slip ? -cfg.pos_weight / p : 1.0 / (1.0 - p);
      g->p[i] = w.slip * dp / static_cast<double>(n);
    }
  }
  c.slip /= static_cast<double>(n);

  if (c.slip_windows > 0) {
    const double inv = 1.0 / c.slip_windows;
    for (std::size_t i = 0; i < n; ++i) {
      if (!labels[i].is_slip) continue;
      const double r = magnitude[i] - labels[i].magnitude();
      c.mag += mag_huber(magnitude[i], labels[i].magnitude(), cfg.huber_delta);
      c.dir += dir_cosine(d_hat[i], labels[i].d_star);
      c.aux += dir_auxiliary(dir_logits[i], labels[i].d_star);
      if (g != nullptr) {
        const double dr = std::abs(r) <= cfg.huber_delta ? r : cfg.huber_delta * (r > 0 ? 1.0 : -1.0);
        g->mag[i] += w.mag * dr * inv;
        g->logits[i] += -w.dir * inv * cosine_grad(dir_logits[i], labels[i].d_star);
        g->logits[i] += w.dir * cfg.aux_weight * inv * (dir_logits[i] - labels[i].d_star);
      }
    }
    c.mag *= inv;
    c.dir *= inv;
    c.aux *= inv;
  }

  if (c.smooth_windows > 0) {
    const double inv = 1.0 / c.smooth_windows;
    for (const auto& [i, ref] : smooth_pairs) {
      c.smooth += smoothness(d_hat[i], ref);
      if (g != nullptr) g->logits[i] += -w.smooth * inv * cosine_grad(dir_logits[i], ref);
    }
    for (const auto& [i, j] : smooth_pred_pairs) {
      c.smooth += smoothness(d_hat[i], d_hat[j]);
      if (g != nullptr) {
        g->logits[i] += -w.smooth * inv * cosine_grad(dir_logits[i], d_hat[j]);
        g->logits[j] += -w.smooth * inv * cosine_grad(dir_logits[j], d_hat[i]);
      }
    }
    c.smooth *= inv;
  }

  c.total = weighted_total(c, w, cfg.aux_weight);
  return c;
}

}  // namespace

SlipLabel SlipLabel::from_displacement(const Eigen::Vector2d& v, double epsilon) {
  SlipLabel l;
  l.v_star = v;
  l.is_slip = v.norm() > epsilon;
  if (l.is_slip) l.d_star = v / v.norm();
  return l;
}

double slip_bce(double p_slip, bool is_slip, double pos_weight) {
  const double p = clamp_prob(p_slip);
  return is_slip ? -pos_weight * std::log(p) : -std::log(1.0 - p);
}

double mag_huber(double pred, double truth, double delta) {
  const double r = std::abs(pred - truth);
  return r <= delta ? 0.5 * r * r : delta * (r - 0.5 * delta);
}

double dir_cosine(const Eigen::Vector2d& d_hat, const Eigen::Vector2d& d_star) { return 1.0 - d_hat.dot(d_star); }

double dir_auxiliary(const Eigen::Vector2d& logits, const Eigen::Vector2d& d_star) {
  return (logits - d_star).squaredNorm() / 2.0;
}

double smoothness(const Eigen::Vector2d& d_hat_t, const Eigen::Vector2d& prev) { return 1.0 - d_hat_t.dot(prev); }

Eigen::Vector2d normalize_direction(const Eigen::Vector2d& logits, bool* degenerate) {
  const double n = logits.norm();
  const bool bad = !(n >= kDirectionNormFloor);
  if (degenerate != nullptr) *degenerate = bad;
  return bad ? Eigen::Vector2d(1.0, 0.0) : Eigen::Vector2d(logits / n);
}

double weighted_total(const LossComponents& c, const LossWeights& w, double aux_weight) {
  return w.slip * c.slip + w.mag * c.mag + w.dir * (c.dir + aux_weight * c.aux) + w.smooth * c.smooth;
}

LossComponents evaluate(std::span<const double> p_slip, std::span<const double> magnitude,
                        std::span<const Eigen::Vector2d> dir_logits, std::span<const SlipLabel> labels,
                        const LossConfig& cfg, std::span<const int> prev_index) {
  return compute(p_slip, magnitude, dir_logits, labels, cfg, prev_index, nullptr);
}

template <typename Scalar>
ag::Var total_loss(ag::Tape<Scalar>& tape, ag::Var p_slip, ag::Var magnitude, ag::Var dir_logits,
                   std::span<const SlipLabel> labels, const LossConfig& cfg, LossComponents* components,
                   std::span<const int> prev_index) {
  const auto n = static_cast<ag::Index>(labels.size());
  if (tape.value(p_slip).size() != n || tape.value(magnitude).size() != n || tape.value(dir_logits).size() != 2 * n) {
    throw UsageError("loss: head outputs do not match the label batch");
  }
  std::vector<double> p(labels.size()), m(labels.size());
  std::vector<Eigen::Vector2d> l(labels.size());
  const auto& pv = tape.value(p_slip).values;
  const auto& mv = tape.value(magnitude).values;
  const auto& lv = tape.value(dir_logits).values;
  for (ag::Index i = 0; i < n; ++i) {
    p[i] = static_cast<double>(pv[i]);
    m[i] = static_cast<double>(mv[i]);
    l[i] = Eigen::Vector2d(static_cast<double>(lv[2 * i]), static_cast<double>(lv[2 * i + 1]));
  }
  auto g = std::make_shared<Gradients>();
  const LossComponents c = compute(p, m, l, labels, cfg, prev_index, g.get());
  if (components != nullptr) *components = c;

  ag::Tensor<Scalar> out(ag::Shape{1});
  out.values[0] = static_cast<Scalar>(c.total);
  const bool rg = tape.requires_grad(p_slip) || tape.requires_grad(magnitude) || tape.requires_grad(dir_logits);
  return tape.record(std::move(out), rg,
                     [p_slip, magnitude, dir_logits, g, n](ag::Tape<Scalar>& t, const typename ag::Tape<Scalar>::Vector& dy) {
                       const double s = static_cast<double>(dy[0]);
                       if (t.requires_grad(p_slip)) {
                         auto& a = t.accumulator(p_slip);
                         for (ag::Index i = 0; i < n; ++i) a[i] += static_cast<Scalar>(s * g->p[i]);
                       }
                       if (t.requires_grad(magnitude)) {
                         auto& a = t.accumulator(magnitude);
                         for (ag::Index i = 0; i < n; ++i) a[i] += static_cast<Scalar>(s * g->mag[i]);
                       }
                       if (t.requires_grad(dir_logits)) {
                         auto& a = t.accumulator(dir_logits);
                         for (ag::Index i = 0; i < n; ++i) {
                           a[2 * i] += static_cast<Scalar>(s * g->logits[i].x());
                           a[2 * i + 1] += static_cast<Scalar>(s * g->logits[i].y());
                         }
                       }
                     });
}

template ag::Var total_loss<float>(ag::Tape<float>&, ag::Var, ag::Var, ag::Var, std::span<const SlipLabel>,
                                   const LossConfig&, LossComponents*, std::span<const int>);
template ag::Var total_loss<double>(ag::Tape<double>&, ag::Var, ag::Var, ag::Var, std::span<const SlipLabel>,
                                    const LossConfig&, LossComponents*, std::span<const int>);

}  // namespace aslip::loss
