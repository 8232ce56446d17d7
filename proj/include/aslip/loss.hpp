#pragma once

#include <Eigen/Dense>

#include <span>
#include <vector>

#include "aslip/autograd.hpp"

namespace aslip::loss {

struct LossWeights {
  double slip = 1.0;
  double mag = 0.5;
  double dir = 2.0;
  double smooth = 0.1;
};

/// Ground truth for one analysis window. v_star is the in-plane displacement
/// over the window in mm; d_star and prev_d_star are meaningful only when the
/// matching flag is set.
struct SlipLabel {
  Eigen::Vector2d v_star = Eigen::Vector2d::Zero();
  bool is_slip = false;
  Eigen::Vector2d d_star = Eigen::Vector2d::Zero();
  bool has_prev = false;
  Eigen::Vector2d prev_d_star = Eigen::Vector2d::Zero();

  double magnitude() const { return v_star.norm(); }

  /// Labels a displacement: slip iff ||v|| > epsilon.
  static SlipLabel from_displacement(const Eigen::Vector2d& v, double epsilon);
};

struct LossConfig {
  LossWeights weights;
  double epsilon = 0.5;      // mm per window
  double huber_delta = 1.0;  // mm
  double pos_weight = 1.0;
  double aux_weight = 1.0;   // auxiliary logit MSE, inside the direction group
  /// Compare d_hat_t with the previous *predicted* direction instead of the
  /// previous ground-truth direction. Needs predecessor indices.
  bool smooth_on_prediction = false;
};

// Scalar reference forms.

double slip_bce(double p_slip, bool is_slip, double pos_weight);
double mag_huber(double pred, double truth, double delta);
double dir_cosine(const Eigen::Vector2d& d_hat, const Eigen::Vector2d& d_star);
double dir_auxiliary(const Eigen::Vector2d& logits, const Eigen::Vector2d& d_star);
double smoothness(const Eigen::Vector2d& d_hat_t, const Eigen::Vector2d& prev);

/// logits / ||logits||, or (1, 0) when ||logits|| < 1e-8 (degenerate flag set).
Eigen::Vector2d normalize_direction(const Eigen::Vector2d& logits, bool* degenerate = nullptr);
inline constexpr double kDirectionNormFloor = 1e-8;

/// Per-term means over contributing windows and the weighted total.
struct LossComponents {
  double slip = 0.0;
  double mag = 0.0;
  double dir = 0.0;
  double aux = 0.0;
  double smooth = 0.0;
  double total = 0.0;
  int windows = 0;
  int slip_windows = 0;
  int smooth_windows = 0;
};

double weighted_total(const LossComponents& c, const LossWeights& w, double aux_weight = 1.0);

/// Evaluates the loss on plain values (no tape). prev_index[i] is the batch
/// position of window i's predecessor or -1; only used with smooth_on_prediction.
LossComponents evaluate(std::span<const double> p_slip, std::span<const double> magnitude,
                        std::span<const Eigen::Vector2d> dir_logits, std::span<const SlipLabel> labels,
                        const LossConfig& cfg, std::span<const int> prev_index = {});

/// The total loss as one tape node over the three head outputs:
/// p_slip [N], magnitude [N], dir_logits [N, 2]. Returns a scalar Var.
template <typename Scalar>
ag::Var total_loss(ag::Tape<Scalar>& tape, ag::Var p_slip, ag::Var magnitude, ag::Var dir_logits,
                   std::span<const SlipLabel> labels, const LossConfig& cfg, LossComponents* components = nullptr,
                   std::span<const int> prev_index = {});

}  // namespace aslip::loss
