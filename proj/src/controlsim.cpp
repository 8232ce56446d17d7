#include "aslip/controlsim.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <sstream>

#include <unsupported/Eigen/FFT>

#include "aslip/error.hpp"
#include "aslip/rng.hpp"

namespace aslip::control {

namespace {

constexpr double kPi = 3.14159265358979323846;

enum Stream : std::uint64_t { kSynth = 1, kTrials, kKnock, kCalibration };

long to_samples(double s, double fs) { return std::lround(s * fs); }

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

double std_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

sim::NoiseModel noise_for(const TaskConfig& cfg, sim::RobotState state) {
  auto n = sim::NoiseModel::for_state(state);
  n.hum_level = n.broadband_level = cfg.noise_level;
  return n;
}

// Sample-level co-simulation shared by both tasks. The controller callback runs
// once per control period with the window that just completed (if any) and
// returns the command for the next period.
struct Episode {
  const TaskConfig& cfg;
  Detector& detector;
  double fs;
  long hop, window;
  sim::SlipSynth synth;
  stream::WindowAssembler assembler;
  std::vector<Vector2d> cumulative{Vector2d::Zero()};  // relative displacement at each sample boundary
  PlanarState state;
  TaskResult result;

  Episode(Detector& d, const TaskConfig& c)
      : cfg(c),
        detector(d),
        fs(c.synth.sample_rate),
        hop(to_samples(c.stream.hop_ms * 1e-3, fs)),
        window(to_samples(c.stream.window_ms * 1e-3, fs)),
        synth(sim::MicLayout::named(c.layout), noise_for(c, c.noise), c.synth, derive_seed(c.seed, kSynth)),
        assembler(synth.channels(), window, hop) {
    result.task = c.task;
    result.detector = d.name();
  }

  /// Advances one control period under `command`. `push(i)` gives the external
  /// push at absolute sample i, if engaged; `on_sample` sees each new state.
  template <typename Push, typename OnSample>
  std::optional<model::SlipEstimate> period(const Vector2d& command, const World& world_base, Push&& push,
                                            OnSample&& on_sample) {
    const double dt = 1.0 / fs;
    std::vector<Vector2d> rel_velocity(static_cast<std::size_t>(hop));
    World world = world_base;
    for (long i = 0; i < hop; ++i) {
      const long abs_i = synth.position() + i;
      world.push = push(abs_i);
      const Vector2d before = state.relative();
      state = step_dynamics(state, command, dt, world);
      state.time = static_cast<double>(abs_i + 1) / fs;  // exact, no accumulated drift
      Vector2d v = (state.relative() - before) * fs;
      if (v.norm() < 1e-9) v.setZero();
      rel_velocity[static_cast<std::size_t>(i)] = v;
      cumulative.push_back(cumulative.back() + v * dt);
      on_sample(i);
    }
    Eigen::MatrixXf audio;
    synth.render(rel_velocity, cfg.surface_profile_id, audio);
    assembler.push(audio);
    std::optional<model::SlipEstimate> latest;
    while (auto w = assembler.next()) {
      const Vector2d truth = cumulative[static_cast<std::size_t>(w->start + window)] -
                             cumulative[static_cast<std::size_t>(w->start)];
      latest = detector.estimate(w->samples, truth);
    }
    return latest;
  }
};

std::string fmt(double x, int precision = 4) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(precision);
  os << x;
  return os.str();
}

}  // namespace

PlanarState step_dynamics(const PlanarState& s, const Vector2d& command, double dt, const World& world) {
  PlanarState out = s;
  out.time = s.time + dt;
  out.gripper = s.gripper + command * dt;
  out.object = s.object + world.push.value_or(command) * dt;
  if (world.wall_x && out.object.x() > *world.wall_x) out.object.x() = std::max(*world.wall_x, s.object.x());
  return out;
}

std::string to_string(Task t) { return t == Task::SlipStop ? "slip-stop" : "slip-track"; }

Task task_from_string(const std::string& s) {
  if (s == "slip-stop" || s == "slip_stop") return Task::SlipStop;
  if (s == "slip-track" || s == "slip_track") return Task::SlipTrack;
  throw ConfigError("unknown task '" + s + "' (slip-stop|slip-track)");
}

void TaskConfig::validate() const {
  stream.validate();
  synth.validate();
  sim::MicLayout::named(layout);
  sim::surface_profile(surface_profile_id);
  if (debounce < 1) throw ConfigError("debounce must be at least 1");
  if (!(tracking_gain > 0.0) || !(approach_speed > 0.0) || !(command_limit > 0.0))
    throw ConfigError("gains and speeds must be positive");
  if (!(wall_x > 0.0) || !(object_length > 0.0)) throw ConfigError("wall distance and object length must be positive");
  if (!(duration > 0.0) || hold_after_stop < 0.0) throw ConfigError("durations must be positive");
  if (noise_level < 0.0) throw ConfigError("noise level must be non-negative");
  const double fs = synth.sample_rate;
  const long hop = to_samples(stream.hop_ms * 1e-3, fs);
  if (std::abs(static_cast<double>(hop) - stream.hop_ms * 1e-3 * fs) > 1e-6)
    throw ConfigError("control period must be a whole number of samples");
}

// ---------------------------------------------------------------------------
// Detectors

ModelDetector::ModelDetector(const model::SlipNet<float>& model, const dsp::FeatureConfig& features, double window_ms)
    : inference_(model, features, window_ms) {}

model::SlipEstimate ModelDetector::estimate(const Eigen::MatrixXf& window, const Vector2d&) {
  return inference_.infer(window);
}

model::SlipEstimate OracleDetector::estimate(const Eigen::MatrixXf&, const Vector2d& d) {
  const double m = d.norm();
  if (m <= epsilon_) return model::SlipEstimate::from_heads(0.0, 0.0, Vector2d(1.0, 0.0));
  return model::SlipEstimate::from_heads(1.0, m, d / m);
}

EnergyThresholdBaseline::EnergyThresholdBaseline(const sim::MicLayout& layout, double sample_rate, double alpha,
                                                 Config cfg)
    : layout_(layout), sample_rate_(sample_rate), alpha_(alpha), cfg_(cfg) {
  if (!(cfg.band_lo_hz >= 0.0 && cfg.band_hi_hz > cfg.band_lo_hz && cfg.band_hi_hz <= sample_rate / 2.0))
    throw ConfigError("baseline band must lie within [0, Nyquist]");
  if (!(cfg.k_sigma >= 0.0) || !(cfg.mm_per_excess >= 0.0)) throw ConfigError("baseline constants must be non-negative");
}

double EnergyThresholdBaseline::threshold() const {
  if (!threshold_) throw UsageError("energy baseline is not calibrated");
  return *threshold_;
}

Eigen::VectorXd EnergyThresholdBaseline::band_energy(const Eigen::MatrixXf& window) const {
  if (window.cols() != layout_.size()) throw InputError("window channel count does not match the layout");
  const long n = window.rows();
  if (n < 2) throw InputError("window too short");
  const long lo = static_cast<long>(std::ceil(cfg_.band_lo_hz * static_cast<double>(n) / sample_rate_));
  const long hi = std::min(n / 2, static_cast<long>(std::floor(cfg_.band_hi_hz * static_cast<double>(n) / sample_rate_)));
  Eigen::FFT<double> fft;
  fft.SetFlag(Eigen::FFT<double>::HalfSpectrum);
  std::vector<double> x(static_cast<std::size_t>(n));
  std::vector<std::complex<double>> spectrum;
  Eigen::VectorXd e(window.cols());
  for (Eigen::Index c = 0; c < window.cols(); ++c) {
    for (long i = 0; i < n; ++i) x[static_cast<std::size_t>(i)] = window(i, c);
    fft.fwd(spectrum, x);
    double s = 0.0;
    for (long k = lo; k <= hi; ++k) s += std::norm(spectrum[static_cast<std::size_t>(k)]);
    // Parseval: one-sided band power as a mean-square amplitude.
    e[c] = 2.0 * s / (static_cast<double>(n) * static_cast<double>(n));
  }
  return e;
}

void EnergyThresholdBaseline::calibrate(const dsp::AudioBuffer& no_slip, double window_ms, double hop_ms) {
  if (std::abs(no_slip.sample_rate - sample_rate_) > 1e-9) throw InputError("calibration sample rate mismatch");
  const long w = to_samples(window_ms * 1e-3, sample_rate_), h = to_samples(hop_ms * 1e-3, sample_rate_);
  if (w < 2 || h < 1) throw ConfigError("bad calibration window");
  std::vector<double> rms;
  for (long s = 0; s + w <= no_slip.length(); s += h) {
    rms.push_back(std::sqrt(band_energy(no_slip.samples.middleRows(s, w)).mean()));
  }
  if (rms.size() < 2) throw InputError("calibration recording shorter than two windows");
  threshold_ = mean_of(rms) + cfg_.k_sigma * std_of(rms);
}

model::SlipEstimate EnergyThresholdBaseline::energy_threshold_baseline(const Eigen::MatrixXf& window) const {
  const double thr = threshold();
  const Eigen::VectorXd e = band_energy(window);
  const double rms = std::sqrt(e.mean());
  if (!(rms > thr)) return model::SlipEstimate::from_heads(0.0, 0.0, Vector2d(1.0, 0.0));
  Vector2d dir(1.0, 0.0);
  try {
    dir = sim::oracle_direction(e, layout_, alpha_);
  } catch (const AmbiguityError&) {
    // A single mic or flat energies: report slip with an arbitrary direction.
  }
  return model::SlipEstimate::from_heads(1.0, cfg_.mm_per_excess * (rms / thr - 1.0), dir);
}

// ---------------------------------------------------------------------------
// Tasks

TaskResult run_slip_stop(Detector& detector, const TaskConfig& cfg) {
  cfg.validate();
  Episode ep(detector, cfg);
  TaskResult& r = ep.result;
  const World world{cfg.wall_x, std::nullopt};
  const double t_max = (cfg.wall_x + cfg.object_length) / cfg.approach_speed + 1.0;
  Rng knock_rng(derive_seed(cfg.seed, kKnock));

  Vector2d command(cfg.approach_speed, 0.0);
  double gripper_at_contact = 0.0;
  int positives = 0;
  double stop_deadline = -1.0;
  while (true) {
    auto est = ep.period(command, world, [](long) { return std::optional<Vector2d>(); }, [&](long i) {
      if (!r.contacted && ep.state.object.x() >= cfg.wall_x) {
        r.contacted = true;
        r.contact_time = ep.state.time;
        gripper_at_contact = ep.state.gripper.x();
        // The object strikes the wall.
        ep.synth.knock({0.0, 4.0 * cfg.synth.impact_level * uniform(knock_rng, 0.5, 1.5), kPi}, i);
      }
    });
    TracePoint tp;
    tp.t = ep.state.time;
    tp.state = ep.state;
    if (est) {
      tp.estimate = *est;
      tp.has_estimate = true;
      positives = est->is_slip() ? positives + 1 : 0;
    }
    if (r.contacted) r.delta_x = ep.state.gripper.x() - gripper_at_contact;
    if (!r.stopped && positives >= cfg.debounce) {
      r.stopped = true;
      r.stop_time = ep.state.time;
      stop_deadline = ep.state.time + cfg.hold_after_stop;
      command.setZero();
    }
    tp.command = command;
    r.trace.push_back(tp);
    if (r.contacted && r.delta_x >= cfg.object_length) {
      r.delta_x = cfg.object_length;  // the object is lost; full travel
      break;
    }
    if (r.stopped && ep.state.time >= stop_deadline - 1e-12) break;
    if (ep.state.time >= t_max) break;
  }
  r.success = r.contacted && r.stopped && r.stop_time >= r.contact_time && r.delta_x < cfg.object_length;
  return r;
}

TaskResult run_slip_track(Detector& detector, const TaskConfig& cfg) {
  cfg.validate();
  Episode ep(detector, cfg);
  TaskResult& r = ep.result;
  const double fs = ep.fs;
  const long total = to_samples(cfg.duration, fs);

  // World-frame push velocity per sample, where engaged, and onset knocks.
  std::vector<Vector2d> push(static_cast<std::size_t>(total), Vector2d::Zero());
  std::vector<char> engaged(static_cast<std::size_t>(total), 0);
  Rng knock_rng(derive_seed(cfg.seed, kKnock));
  for (const auto& ev : cfg.disturbance) {
    const long s0 = to_samples(ev.t0, fs);
    const auto v = ev.velocity_track(fs);
    for (std::size_t i = 0; i < v.size(); ++i) {
      const long j = s0 + static_cast<long>(i);
      if (j < 0 || j >= total) throw ConfigError("disturbance extends beyond the task duration");
      push[static_cast<std::size_t>(j)] += v[i];
      engaged[static_cast<std::size_t>(j)] = 1;
    }
    ep.synth.knock({0.0, 4.0 * cfg.synth.impact_level * uniform(knock_rng, 0.5, 1.5), ev.direction}, s0);
  }
  Vector2d net = Vector2d::Zero();
  for (const auto& v : push) net += v / fs;
  r.disturbance_displacement = net.norm();

  const World world{std::nullopt, std::nullopt};
  const double w_s = cfg.stream.window_ms * 1e-3;
  // Integrating law: each window reports the mean relative velocity v/W over the
  // last W seconds; the command accumulates it, scaled by hop/W because every
  // stretch of slip is reported by W/hop overlapping windows.
  const double step_gain = cfg.tracking_gain * (cfg.stream.hop_ms / cfg.stream.window_ms) / w_s;
  Vector2d command = Vector2d::Zero();
  const Vector2d rel0 = ep.state.relative();
  double sq = 0.0;
  long n = 0;
  while (ep.synth.position() + ep.hop <= total) {
    auto at = [&](long i) {
      const auto k = static_cast<std::size_t>(i);
      return engaged[k] ? std::optional<Vector2d>(push[k]) : std::nullopt;
    };
    auto est = ep.period(command, world, at, [&](long) {
      sq += (ep.state.relative() - rel0).squaredNorm();
      ++n;
    });
    TracePoint tp;
    tp.t = ep.state.time;
    tp.state = ep.state;
    if (est) {
      tp.estimate = *est;
      tp.has_estimate = true;
      command = (command + step_gain * est->vector).cwiseMax(-cfg.command_limit).cwiseMin(cfg.command_limit);
    }
    tp.command = command;
    r.trace.push_back(tp);
  }
  r.pose_rmse = n > 0 ? std::sqrt(sq / static_cast<double>(n)) : 0.0;
  return r;
}

TaskResult run_task(Detector& detector, const TaskConfig& cfg) {
  return cfg.task == Task::SlipStop ? run_slip_stop(detector, cfg) : run_slip_track(detector, cfg);
}

std::vector<TaskConfig> make_trials(const TaskConfig& base, int trials, std::uint64_t seed) {
  if (trials < 0) throw ConfigError("trial count must be non-negative");
  std::vector<TaskConfig> out;
  for (int i = 0; i < trials; ++i) {
    TaskConfig c = base;
    c.seed = derive_seed(seed, kTrials, static_cast<std::uint64_t>(i));
    Rng rng(c.seed);
    c.surface_profile_id = 1 + i % 5;
    if (base.task == Task::SlipStop) {
      c.wall_x = uniform(rng, 10.0, 30.0);
    } else {
      c.disturbance.clear();
      const int pushes = 1 + static_cast<int>(uniform_index(rng, 2));
      double t = uniform(rng, 0.4, 0.8);
      for (int k = 0; k < pushes; ++k) {
        sim::SlipEvent ev;
        ev.t0 = t;
        ev.duration = uniform(rng, 0.6, 1.2);
        ev.direction = uniform(rng, 0.0, 2.0 * kPi);
        ev.speed = uniform(rng, 20.0, 40.0);
        ev.ramp = 0.05;
        ev.direction_wobble = 0.3;
        ev.speed_wobble = 0.2;
        ev.surface_profile_id = c.surface_profile_id;
        ev.seed = derive_seed(c.seed, static_cast<std::uint64_t>(k));
        c.disturbance.push_back(ev);
        t += ev.duration + uniform(rng, 0.5, 0.9);
      }
      c.duration = std::ceil((t + 0.5) / (c.stream.hop_ms * 1e-3)) * (c.stream.hop_ms * 1e-3);
    }
    out.push_back(std::move(c));
  }
  return out;
}

dsp::AudioBuffer no_slip_recording(const TaskConfig& cfg, double seconds, std::uint64_t seed) {
  cfg.validate();
  sim::SlipSynth synth(sim::MicLayout::named(cfg.layout), noise_for(cfg, cfg.calibration_noise), cfg.synth,
                       derive_seed(seed, kCalibration));
  const long n = to_samples(seconds, cfg.synth.sample_rate);
  dsp::AudioBuffer out;
  out.sample_rate = cfg.synth.sample_rate;
  synth.render(std::vector<Vector2d>(static_cast<std::size_t>(std::max(n, 0L)), Vector2d::Zero()),
               cfg.surface_profile_id, out.samples);
  return out;
}

// ---------------------------------------------------------------------------
// Reports

std::string TaskResult::trace_csv() const {
  std::ostringstream os;
  os << "t,gripper_x,gripper_z,object_x,object_z,p_slip,v_x,v_z,command_x,command_z\n";
  for (const auto& p : trace) {
    os << fmt(p.t, 3) << ',' << fmt(p.state.gripper.x()) << ',' << fmt(p.state.gripper.y()) << ','
       << fmt(p.state.object.x()) << ',' << fmt(p.state.object.y()) << ',';
    if (p.has_estimate) {
      os << fmt(p.estimate.p_slip) << ',' << fmt(p.estimate.vector.x()) << ',' << fmt(p.estimate.vector.y());
    } else {
      os << ",,";
    }
    os << ',' << fmt(p.command.x()) << ',' << fmt(p.command.y()) << '\n';
  }
  return os.str();
}

std::string TaskResult::row_header() {
  return "trial,task,detector,success,contacted,stopped,contact_time_s,stop_time_s,delta_x_mm,pose_rmse_mm,"
         "disturbance_mm";
}

std::string TaskResult::row(int trial) const {
  std::ostringstream os;
  os << trial << ',' << to_string(task) << ',' << detector << ',' << success << ',' << contacted << ',' << stopped
     << ',' << fmt(contact_time, 3) << ',' << fmt(stop_time, 3) << ',' << fmt(delta_x, 3) << ','
     << fmt(pose_rmse, 3) << ',' << fmt(disturbance_displacement, 3);
  return os.str();
}

TaskSummary summarize(const std::vector<TaskResult>& results) {
  TaskSummary s;
  s.trials = static_cast<int>(results.size());
  std::vector<double> dx, rmse;
  for (const auto& r : results) {
    s.detector = r.detector;
    s.task = r.task;
    if (r.success) ++s.successes;
    if (r.contacted) dx.push_back(r.delta_x);
    rmse.push_back(r.pose_rmse);
  }
  s.delta_x_mean = mean_of(dx);
  s.delta_x_std = std_of(dx);
  s.rmse_mean = mean_of(rmse);
  s.rmse_std = std_of(rmse);
  return s;
}

std::string TaskSummary::to_text() const {
  std::ostringstream os;
  os << "task = " << to_string(task) << '\n' << "detector = " << detector << '\n' << "trials = " << trials << '\n';
  if (task == Task::SlipStop) {
    os << "success = " << successes << '/' << trials << '\n'
       << "delta_x_mm = " << fmt(delta_x_mean, 2) << " +- " << fmt(delta_x_std, 2) << '\n';
  } else {
    os << "pose_rmse_mm = " << fmt(rmse_mean, 2) << " +- " << fmt(rmse_std, 2) << '\n';
  }
  return os.str();
}

}  // namespace aslip::control
