#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "aslip/model.hpp"
#include "aslip/simulator.hpp"
#include "aslip/streaming.hpp"

// Planar closed-loop tasks driven by windowed slip estimates.
//
// The world is stepped one audio sample at a time; the relative velocity of
// object and gripper is rendered to audio by the same generator as the datasets,
// cut into windows, and handed to a detector once per control period (= the
// inference hop). A command issued at time t only ever depends on windows that
// ended at or before t.

namespace aslip::control {

using Eigen::Vector2d;

struct PlanarState {
  Vector2d gripper = Vector2d::Zero();  // mm, (x, z)
  Vector2d object = Vector2d::Zero();   // mm; for slip-stop, the object's leading face
  double time = 0.0;                    // s

  Vector2d relative() const { return object - gripper; }
};

struct World {
  std::optional<double> wall_x;    // the object cannot pass this x
  std::optional<Vector2d> push;    // while engaged, an external agent sets the object's velocity, mm/s
};

/// The gripper integrates its command; the object rides with the gripper unless
/// pushed, then is clamped by the wall.
PlanarState step_dynamics(const PlanarState& state, const Vector2d& command, double dt, const World& world);

enum class Task { SlipStop, SlipTrack };
std::string to_string(Task t);
Task task_from_string(const std::string& s);

struct TaskConfig {
  Task task = Task::SlipStop;
  std::string layout = "four";
  sim::RobotState noise = sim::RobotState::OnMoving;
  double noise_level = 1.0;
  // Condition of the held-out no-slip reference used to calibrate the energy
  // baseline: the robot powered and holding the object at rest.
  sim::RobotState calibration_noise = sim::RobotState::OnStationary;
  int surface_profile_id = 1;
  stream::StreamConfig stream;
  sim::SynthConfig synth;  // sensor floor set in the constructor below
  std::uint64_t seed = 0;

  // Slip-stop
  double wall_x = 20.0;          // mm ahead of the object at t = 0
  double approach_speed = 25.0;  // mm/s along +x
  int debounce = 2;              // consecutive positive windows before stopping
  double object_length = 120.0;  // mm of slip that loses the object
  double hold_after_stop = 0.3;  // s simulated after the stop

  // Slip-track
  double tracking_gain = 1.0;
  double command_limit = 100.0;  // mm/s per axis
  double duration = 4.0;         // s
  std::vector<sim::SlipEvent> disturbance;  // world-frame pushes on the object

  TaskConfig() { synth.sensor_noise_rms = 0.002; }
  void validate() const;
};

/// Anything that turns one window into a slip estimate. `true_displacement`
/// is the relative displacement inside the window; only oracles may look at it.
class Detector {
 public:
  virtual ~Detector() = default;
  virtual std::string name() const = 0;
  virtual model::SlipEstimate estimate(const Eigen::MatrixXf& window, const Vector2d& true_displacement) = 0;
};

class ModelDetector : public Detector {
 public:
  ModelDetector(const model::SlipNet<float>& model, const dsp::FeatureConfig& features, double window_ms);
  std::string name() const override { return "model"; }
  model::SlipEstimate estimate(const Eigen::MatrixXf& window, const Vector2d& true_displacement) override;

 private:
  stream::WindowInference inference_;
};

/// Ground truth: slip when the window displacement exceeds epsilon.
class OracleDetector : public Detector {
 public:
  explicit OracleDetector(double epsilon = 0.5) : epsilon_(epsilon) {}
  std::string name() const override { return "oracle"; }
  model::SlipEstimate estimate(const Eigen::MatrixXf& window, const Vector2d& true_displacement) override;

 private:
  double epsilon_;
};

/// Never reports slip (open loop).
class NullDetector : public Detector {
 public:
  std::string name() const override { return "none"; }
  model::SlipEstimate estimate(const Eigen::MatrixXf&, const Vector2d&) override { return {}; }
};

/// Band-limited RMS threshold. Calibrated on a no-slip recording: threshold =
/// mean + k_sigma * std of the window RMS values. Direction from the per-channel
/// band energies through oracle_direction; magnitude grows with the excess.
class EnergyThresholdBaseline : public Detector {
 public:
  struct Config {
    double band_lo_hz = 1000.0;
    double band_hi_hz = 8000.0;
    double k_sigma = 4.0;
    double mm_per_excess = 2.0;  // magnitude per unit of (rms / threshold - 1)
  };

  EnergyThresholdBaseline(const sim::MicLayout& layout, double sample_rate, double alpha, Config cfg);
  EnergyThresholdBaseline(const sim::MicLayout& layout, double sample_rate, double alpha)
      : EnergyThresholdBaseline(layout, sample_rate, alpha, Config{}) {}
  std::string name() const override { return "energy_threshold"; }

  void calibrate(const dsp::AudioBuffer& no_slip, double window_ms, double hop_ms);
  bool calibrated() const { return threshold_.has_value(); }
  double threshold() const;

  /// Throws UsageError before calibration.
  model::SlipEstimate energy_threshold_baseline(const Eigen::MatrixXf& window) const;
  model::SlipEstimate estimate(const Eigen::MatrixXf& window, const Vector2d&) override {
    return energy_threshold_baseline(window);
  }

  /// Per-channel band energy of a window (mean power in the band).
  Eigen::VectorXd band_energy(const Eigen::MatrixXf& window) const;

 private:
  sim::MicLayout layout_;
  double sample_rate_, alpha_;
  Config cfg_;
  std::optional<double> threshold_;
};

/// One row per control period.
struct TracePoint {
  double t = 0.0;
  PlanarState state;
  model::SlipEstimate estimate;
  bool has_estimate = false;
  Vector2d command = Vector2d::Zero();
};

struct TaskResult {
  Task task = Task::SlipStop;
  std::string detector;
  std::vector<TracePoint> trace;
  // Slip-stop
  bool success = false;
  bool contacted = false;
  bool stopped = false;
  double contact_time = -1.0, stop_time = -1.0;
  double delta_x = 0.0;  // mm of gripper travel past first contact
  // Slip-track
  double pose_rmse = 0.0;  // mm, relative pose deviation from its initial value
  double disturbance_displacement = 0.0;  // mm, net external push

  std::string trace_csv() const;
  static std::string row_header();
  std::string row(int trial) const;
};

TaskResult run_slip_stop(Detector& detector, const TaskConfig& cfg);
TaskResult run_slip_track(Detector& detector, const TaskConfig& cfg);
TaskResult run_task(Detector& detector, const TaskConfig& cfg);

/// Varied trials: wall distance, surface profile and seed for slip-stop; one or
/// two pushes (net displacement > 10 mm) for slip-track.
std::vector<TaskConfig> make_trials(const TaskConfig& base, int trials, std::uint64_t seed);

/// A held-out no-slip recording in cfg.calibration_noise, for baseline calibration.
dsp::AudioBuffer no_slip_recording(const TaskConfig& cfg, double seconds, std::uint64_t seed);

struct TaskSummary {
  std::string detector;
  Task task = Task::SlipStop;
  int trials = 0, successes = 0;
  double delta_x_mean = 0.0, delta_x_std = 0.0;  // over contacted trials
  double rmse_mean = 0.0, rmse_std = 0.0;

  std::string to_text() const;
};
TaskSummary summarize(const std::vector<TaskResult>& results);

}  // namespace aslip::control
