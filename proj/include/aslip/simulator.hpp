#pragma once

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "aslip/dsp.hpp"
#include "aslip/rng.hpp"

// Synthetic multi-channel slip audio with exact labels.
//
// Slip is rendered sample by sample from a relative-velocity track: Poisson
// micro-impacts (rate proportional to speed) and speed-scaled friction noise
// excite a damped band-pass resonator chosen by the surface profile. Every
// microphone receives the same source scaled by a direction-dependent gain and
// delayed by its distance from the contact point. Robot noise is added per
// channel. All randomness comes from named sub-streams of one trial seed.

namespace aslip::sim {

using Eigen::Vector2d;

struct MicLayout {
  std::string name;
  std::vector<Vector2d> positions;  // mm, grasp (x, z) plane

  int size() const { return static_cast<int>(positions.size()); }
  /// single, two_centered, two_corners, two_same_finger, four.
  static MicLayout named(const std::string& name);
  static const std::vector<std::string>& names();
};

/// 1 + alpha * (direction . normalize(mic_position)); a mic at the origin gets 1.
double channel_gain(const Vector2d& direction, const Vector2d& mic_position, double alpha);

/// Least-squares inversion of E_i = c^2 (1 + alpha u . p_i)^2 for the unit vector u.
/// Throws AmbiguityError when the layout cannot resolve a 2D direction or the
/// energies carry no directional contrast.
Vector2d oracle_direction(const Eigen::VectorXd& energies, const MicLayout& layout, double alpha);

struct SurfaceProfile {
  double center_hz = 0.0;
  double q = 1.0;
};

/// 0 is the broadband probe used for robot-induced data; 1..5 stand in for objects.
SurfaceProfile surface_profile(int id, double band_scale = 1.0);
inline constexpr int kSurfaceProfiles = 6;

enum class RobotState { Off, OnStationary, OnMoving };
std::string to_string(RobotState s);
RobotState robot_state_from_string(const std::string& s);

struct NoiseModel {
  RobotState robot_state = RobotState::Off;
  double hum_fundamental = 50.0;  // Hz
  double hum_level = 1.0;         // relative to the calibrated default
  double broadband_level = 1.0;

  static NoiseModel for_state(RobotState s) { return NoiseModel{s}; }
};

/// One slip episode: the object moves relative to the gripper along a direction
/// that may turn and wobble; speed may fluctuate. All shape randomness is drawn
/// from `seed`, so the velocity track is a pure function of the event.
struct SlipEvent {
  double t0 = 0.0;         // s
  double duration = 0.0;   // s
  double direction = 0.0;  // rad, angle in the (x, z) plane
  double speed = 0.0;      // mm/s, plateau speed
  double ramp = 0.02;      // s, linear speed ramp at both ends
  int surface_profile_id = 0;
  double turn_rate = 0.0;       // rad/s, deterministic curvature
  double direction_wobble = 0.0;  // rad/sqrt(s), random-walk intensity
  double speed_wobble = 0.0;      // std of log-speed fluctuation
  double level = 1.0;             // contact-strength factor on the emitted vibration
  std::uint64_t seed = 0;

  /// Per-sample velocity (mm/s) over [0, duration) at the given sample rate.
  std::vector<Vector2d> velocity_track(double sample_rate) const;
};

/// Impulsive contact not caused by slip (decoy) or marking slip onset.
struct Knock {
  double t = 0.0;        // s
  double amplitude = 0.0;
  double direction = 0.0;  // rad; sets the channel gain pattern
};

/// Brief rubbing contact with no net displacement: for `duration` the surface
/// sounds as if slipping at `speed` along `direction` (raised-cosine edges).
struct Rub {
  double t = 0.0;         // s
  double duration = 0.05;  // s
  double speed = 30.0;     // mm/s equivalent
  double direction = 0.0;  // rad
};

struct SynthConfig {
  double sample_rate = 48000.0;
  double alpha = 0.5;
  double delay_ms_per_mm = 0.02;
  Vector2d contact_point = Vector2d::Zero();
  double reference_speed = 50.0;     // mm/s at which levels below apply
  double impacts_per_mm = 4.0;       // 200 impacts/s at 50 mm/s
  double impact_level = 0.85;        // mean impact amplitude at reference speed
  double impact_jitter = 0.3;        // lognormal sigma of impact amplitude
  double friction_level = 0.015;     // friction noise RMS at reference speed
  double band_scale = 1.0;           // probe profile band scaling
  double track_hop_ms = 10.0;        // slip-track resolution
  double pink_rms = 0.029;           // on_stationary broadband level
  double hum_amplitude = 0.02;       // hum fundamental amplitude
  /// White microphone self-noise present in every robot state. The bare
  /// generator defaults to 0 (noise "off" is exact silence); datasets set a floor.
  double sensor_noise_rms = 0.0;

  void validate() const;
};

/// Sample-sequential renderer shared by trial synthesis and closed-loop runs.
class SlipSynth {
 public:
  SlipSynth(const MicLayout& layout, const NoiseModel& noise, const SynthConfig& cfg, std::uint64_t seed);

  /// Renders velocity.size() samples into out (rows = samples, cols = channels),
  /// overwriting it. velocity is the object-relative-to-gripper velocity, mm/s.
  void render(const std::vector<Vector2d>& velocity, int surface_profile_id, Eigen::MatrixXf& out, double level = 1.0);

  /// Schedules a knock `delay_samples` after the next rendered sample.
  void knock(const Knock& k, long delay_samples = 0);
  /// Schedules a rub burst the same way.
  void rub(const Rub& r, long delay_samples = 0);

  long position() const { return position_; }
  int channels() const { return layout_.size(); }

 private:
  struct Biquad {
    double b0 = 0, b2 = 0, a1 = 0, a2 = 0;
    double x1 = 0, x2 = 0, y1 = 0, y2 = 0;
    double process(double x);
  };
  static Biquad bandpass(double center_hz, double q, double sample_rate);
  void set_profile(int id);

  MicLayout layout_;
  NoiseModel noise_;
  SynthConfig cfg_;
  std::vector<long> delays_;
  long max_delay_ = 0;
  long position_ = 0;
  int profile_ = -1;
  Biquad resonator_;
  Biquad knock_filter_;

  Rng impact_rng_, amplitude_rng_, friction_rng_, noise_rng_, whine_rng_, click_rng_;
  std::vector<Rng> pink_rngs_;
  std::vector<Rng> sensor_rngs_;
  std::vector<std::array<double, 7>> pink_state_;
  std::vector<double> hum_coupling_;
  std::vector<double> hum_phase_;
  double am_rate_ = 0.0, am_phase_ = 0.0;
  double whine_hz_ = 0.0, whine_phase_ = 0.0, whine_level_ = 0.0, whine_drift_ = 0.0;
  double click_rate_ = 0.0;
  Biquad click_filter_;
  double click_env_ = 0.0;
  std::vector<double> click_gains_;

  // Delay line of source samples with the direction that shapes their gains.
  struct Tap {
    double value = 0.0;
    Vector2d direction{1.0, 0.0};
    double knock = 0.0;
    Vector2d knock_direction{1.0, 0.0};
  };
  std::vector<Tap> line_;
  Vector2d last_direction_{1.0, 0.0};

  struct PendingKnock {
    long at = 0;
    Knock k;
  };
  std::vector<PendingKnock> pending_;
  struct PendingRub {
    long at = 0;
    long length = 0;
    Vector2d velocity{0.0, 0.0};
  };
  std::vector<PendingRub> rubs_;
  double knock_env_ = 0.0;
  Vector2d knock_dir_{1.0, 0.0};
  Rng knock_rng_;
};

/// Ground-truth displacement per fixed hop: increments[k] covers
/// [k * hop_s, (k + 1) * hop_s).
struct SlipTrack {
  double hop_s = 0.01;
  std::vector<Vector2d> increments;  // mm

  /// Sum of increments over [begin_s, begin_s + length_s); both multiples of hop_s.
  Vector2d displacement(double begin_s, double length_s) const;
  Vector2d total() const;
};

struct TrialSpec {
  std::string trial_id;
  MicLayout layout;
  NoiseModel noise;
  int surface_profile_id = 0;
  double duration = 1.0;  // s
  std::vector<SlipEvent> events;
  std::vector<Knock> knocks;
  std::vector<Rub> rubs;
  SynthConfig synth;
  std::uint64_t seed = 0;

  /// Per-sample relative velocity of all events (sum where they overlap).
  std::vector<Vector2d> velocity_track() const;
  SlipTrack slip_track() const;
};

struct SimTrial {
  TrialSpec spec;
  dsp::AudioBuffer audio;
  SlipTrack track;
};

SimTrial synth_trial(const TrialSpec& spec);

// ---------------------------------------------------------------------------
// Datasets

enum class DatasetKind { RobotInduced, ExternallyInduced };

struct NoiseMix {
  int on_stationary = 0;
  int on_moving = 0;
  int off = 0;
};

struct DatasetSpec {
  std::string name = "dataset";
  DatasetKind kind = DatasetKind::RobotInduced;
  std::string layout = "four";
  double trial_seconds = 6.0;
  int target_slip_windows = 2000;
  int max_trials = 100000;
  NoiseMix noise{1, 1, 0};
  std::vector<int> profiles{0};
  double speed_min = 10.0, speed_max = 50.0;  // mm/s
  double window_ms = 200.0;                   // used to count slip windows
  double hop_ms = 50.0;
  double epsilon = 0.5;
  double decoy_rate = 0.3;  // knocks/rubs per second without slip
  double rub_fraction = 0.5;  // share of decoys that are rubs rather than knocks
  /// Per-trial robot-noise level (hum and broadband), uniform in this range.
  double noise_level_min = 1.0, noise_level_max = 1.0;
  std::uint64_t seed = 1;
  SynthConfig synth;

  static DatasetSpec pretrain_default();
  static DatasetSpec finetune_default();
};

/// Deterministic trial plans; stops once the slip-window target is reached.
std::vector<TrialSpec> plan_dataset(const DatasetSpec& spec);
/// Slip-labeled windows of a planned trial for a given window, hop and epsilon.
int count_slip_windows(const TrialSpec& trial, double window_ms, double hop_ms, double epsilon);

struct ManifestEntry {
  std::string trial_id;
  std::string audio_path;  // relative to the manifest directory
  std::string track_path;
  std::string layout;
  RobotState noise = RobotState::Off;
  int surface_profile_id = 0;
  std::uint64_t seed = 0;
  double duration = 0.0;
};

struct Manifest {
  std::filesystem::path directory;
  std::vector<ManifestEntry> entries;

  void write(const std::filesystem::path& path) const;
  static Manifest read(const std::filesystem::path& path);
  /// FNV-1a over the manifest text and every referenced file.
  std::uint64_t digest() const;
};

/// Synthesizes every planned trial into out_dir (audio WAV + track text) and writes
/// manifest.txt. Returns the manifest.
Manifest make_dataset(const DatasetSpec& spec, const std::filesystem::path& out_dir);

void write_track(const std::filesystem::path& path, const SlipTrack& track);
SlipTrack read_track(const std::filesystem::path& path);

/// Loads one trial back from a manifest entry.
SimTrial load_trial(const Manifest& manifest, const ManifestEntry& entry);

std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t h = 0xcbf29ce484222325ULL);

}  // namespace aslip::sim
