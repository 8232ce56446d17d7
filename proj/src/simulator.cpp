#include "aslip/simulator.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "aslip/error.hpp"
#include "aslip/wav.hpp"

namespace aslip::sim {

namespace {

constexpr double kPi = 3.141592653589793238462643383279502884;
constexpr double kTwoPi = 2.0 * kPi;

// Named RNG sub-streams of a trial seed.
enum Stream : std::uint64_t {
  kImpacts = 1,
  kAmplitudes,
  kFriction,
  kNoise,
  kPink,
  kWhine,
  kClicks,
  kKnocks,
  kPlan,
  kEventShape,
  kSensor,
};

Vector2d unit(double theta) { return {std::cos(theta), std::sin(theta)}; }

std::string format_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

double parse_double(const std::string& s, const std::string& what) {
  double v = 0.0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) throw FormatError("bad number in " + what + ": '" + s + "'");
  return v;
}

}  // namespace

// ---------------------------------------------------------------------------
// Geometry

MicLayout MicLayout::named(const std::string& name) {
  // Pads are 20 x 20 mm with the contact point at the origin. The two-mic
  // layouts all lie on a line through the origin; only "four" spans the plane.
  if (name == "single") return {name, {{0.0, 0.0}}};
  if (name == "two_centered") return {name, {{0.0, 10.0}, {0.0, -10.0}}};
  if (name == "two_corners") return {name, {{-10.0, 10.0}, {10.0, -10.0}}};
  if (name == "two_same_finger") return {name, {{-10.0, 0.0}, {10.0, 0.0}}};
  if (name == "four") return {name, {{-10.0, 10.0}, {10.0, 10.0}, {-10.0, -10.0}, {10.0, -10.0}}};
  throw ConfigError("unknown microphone layout '" + name + "'");
}

const std::vector<std::string>& MicLayout::names() {
  static const std::vector<std::string> n{"single", "two_centered", "two_corners", "two_same_finger", "four"};
  return n;
}

double channel_gain(const Vector2d& direction, const Vector2d& mic_position, double alpha) {
  const double r = mic_position.norm();
  if (r == 0.0) return 1.0;
  return 1.0 + alpha * direction.dot(mic_position / r);
}

Vector2d oracle_direction(const Eigen::VectorXd& energies, const MicLayout& layout, double alpha) {
  const int n = layout.size();
  if (energies.size() != n) throw InputError("oracle_direction: energy count does not match layout");
  if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("oracle_direction: alpha must be in (0, 1)");
  if ((energies.array() <= 0.0).any()) throw InputError("oracle_direction: energies must be positive");

  // sqrt(E_i) = c + w . p_hat_i with w = c * alpha * u: linear in (c, w).
  Eigen::MatrixXd a(n, 3);
  Eigen::VectorXd b(n);
  for (int i = 0; i < n; ++i) {
    const Vector2d& p = layout.positions[i];
    const double r = p.norm();
    const Vector2d ph = r > 0.0 ? Vector2d(p / r) : Vector2d::Zero();
    a(i, 0) = 1.0;
    a(i, 1) = ph.x();
    a(i, 2) = ph.y();
    b[i] = std::sqrt(energies[i]);
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(a);
  qr.setThreshold(1e-9);
  if (qr.rank() < 3) {
    throw AmbiguityError("layout '" + layout.name +
                         "' is collinear through the contact point; direction is determined only up to a mirror");
  }
  const Eigen::Vector3d x = qr.solve(b);
  const Vector2d w(x[1], x[2]);
  if (w.norm() <= 1e-9 * std::abs(x[0]) || w.norm() == 0.0) {
    throw AmbiguityError("energies carry no directional contrast");
  }
  return w.normalized();
}

SurfaceProfile surface_profile(int id, double band_scale) {
  switch (id) {
    case 0: return {3000.0 * band_scale, 0.7};
    case 1: return {1800.0, 4.0};
    case 2: return {2600.0, 6.0};
    case 3: return {3400.0, 3.0};
    case 4: return {4800.0, 5.0};
    case 5: return {6200.0, 2.5};
    default: throw ConfigError("unknown surface profile " + std::to_string(id));
  }
}

std::string to_string(RobotState s) {
  switch (s) {
    case RobotState::Off: return "off";
    case RobotState::OnStationary: return "on_stationary";
    case RobotState::OnMoving: return "on_moving";
  }
  return "off";
}

RobotState robot_state_from_string(const std::string& s) {
  if (s == "off") return RobotState::Off;
  if (s == "on_stationary") return RobotState::OnStationary;
  if (s == "on_moving") return RobotState::OnMoving;
  throw ConfigError("unknown robot state '" + s + "'");
}

// ---------------------------------------------------------------------------
// Events

std::vector<Vector2d> SlipEvent::velocity_track(double sample_rate) const {
  if (!(duration > 0.0)) throw ConfigError("slip event duration must be positive");
  if (speed < 0.0) throw ConfigError("slip event speed must be non-negative");
  const long n = std::lround(duration * sample_rate);
  std::vector<Vector2d> out(static_cast<std::size_t>(std::max(n, 0L)));
  if (n <= 0) return out;

  // Wobble is a random walk in angle and an Ornstein-Uhlenbeck process in log
  // speed, both evaluated on a 1 ms control grid and interpolated.
  const double dt = 1e-3;
  const long knots = static_cast<long>(std::ceil(duration / dt)) + 2;
  std::vector<double> angle(knots), log_speed(knots);
  Rng rng(derive_seed(seed, kEventShape));
  const double tau = 0.05;
  const double rho = std::exp(-dt / tau);
  const double innovation = speed_wobble * std::sqrt(1.0 - rho * rho);
  double a = 0.0, s = speed_wobble * normal01(rng);
  for (long k = 0; k < knots; ++k) {
    angle[k] = a;
    log_speed[k] = s;
    a += direction_wobble * std::sqrt(dt) * normal01(rng);
    s = rho * s + innovation * normal01(rng);
  }
  const double bias = 0.5 * speed_wobble * speed_wobble;  // keeps the mean speed at `speed`
  const double r = std::min(ramp, 0.5 * duration);
  for (long i = 0; i < n; ++i) {
    const double t = static_cast<double>(i) / sample_rate;
    const double u = t / dt;
    const long k = std::min(static_cast<long>(u), knots - 2);
    const double f = u - static_cast<double>(k);
    const double wob_a = angle[k] + f * (angle[k + 1] - angle[k]);
    const double wob_s = log_speed[k] + f * (log_speed[k + 1] - log_speed[k]);
    double env = 1.0;
    if (r > 0.0) env = std::clamp(std::min(t / r, (duration - t) / r), 0.0, 1.0);
    const double v = speed * env * std::exp(wob_s - bias);
    out[i] = v * unit(direction + turn_rate * t + wob_a);
  }
  return out;
}

void SynthConfig::validate() const {
  if (!(sample_rate > 0.0)) throw ConfigError("sample_rate must be positive");
  if (!(alpha >= 0.0 && alpha < 1.0)) throw ConfigError("alpha must be in [0, 1)");
  if (delay_ms_per_mm < 0.0) throw ConfigError("delay_ms_per_mm must be non-negative");
  if (!(reference_speed > 0.0)) throw ConfigError("reference_speed must be positive");
  if (impacts_per_mm < 0.0 || impact_level < 0.0 || impact_jitter < 0.0 || friction_level < 0.0)
    throw ConfigError("slip source levels must be non-negative");
  if (!(band_scale > 0.0)) throw ConfigError("band_scale must be positive");
  if (!(track_hop_ms > 0.0)) throw ConfigError("track_hop_ms must be positive");
  if (pink_rms < 0.0 || hum_amplitude < 0.0 || sensor_noise_rms < 0.0) throw ConfigError("noise levels must be non-negative");
  for (int id = 0; id < kSurfaceProfiles; ++id) {
    const SurfaceProfile p = surface_profile(id, band_scale);
    const double upper = p.center_hz * (1.0 + 1.0 / (2.0 * p.q));
    if (upper >= 0.5 * sample_rate)
      throw ConfigError("surface profile " + std::to_string(id) + " band exceeds the Nyquist frequency");
  }
  if (impacts_per_mm * reference_speed / sample_rate > 0.5)
    throw ConfigError("impact rate too high for the sample rate");
}

// ---------------------------------------------------------------------------
// Renderer

double SlipSynth::Biquad::process(double x) {
  const double y = b0 * x + b2 * x2 - a1 * y1 - a2 * y2;
  x2 = x1;
  x1 = x;
  y2 = y1;
  y1 = y;
  return y;
}

SlipSynth::Biquad SlipSynth::bandpass(double center_hz, double q, double sample_rate) {
  // Constant-peak band-pass, then rescaled to a unit-energy impulse response so
  // that every profile emits the same power for the same excitation.
  const double w0 = kTwoPi * center_hz / sample_rate;
  const double al = std::sin(w0) / (2.0 * q);
  const double a0 = 1.0 + al;
  Biquad f;
  f.b0 = al / a0;
  f.b2 = -al / a0;
  f.a1 = -2.0 * std::cos(w0) / a0;
  f.a2 = (1.0 - al) / a0;
  Biquad probe = f;
  double energy = 0.0;
  for (int i = 0; i < static_cast<int>(sample_rate); ++i) {
    const double y = probe.process(i == 0 ? 1.0 : 0.0);
    energy += y * y;
  }
  const double g = 1.0 / std::sqrt(energy);
  f.b0 *= g;
  f.b2 *= g;
  return f;
}

namespace {

// Paul Kellet's pink filter; the scale below brings white N(0,1) input to unit RMS.
struct Pink {
  static double step(std::array<double, 7>& b, double w) {
    b[0] = 0.99886 * b[0] + w * 0.0555179;
    b[1] = 0.99332 * b[1] + w * 0.0750759;
    b[2] = 0.96900 * b[2] + w * 0.1538520;
    b[3] = 0.86650 * b[3] + w * 0.3104856;
    b[4] = 0.55000 * b[4] + w * 0.5329522;
    b[5] = -0.7616 * b[5] - w * 0.0168980;
    const double out = b[0] + b[1] + b[2] + b[3] + b[4] + b[5] + b[6] + w * 0.5362;
    b[6] = w * 0.115926;
    return out;
  }
  static double unit_scale() {
    static const double s = [] {
      std::array<double, 7> b{};
      Rng rng(12345);
      double acc = 0.0;
      const int n = 1 << 19;
      for (int i = 0; i < n; ++i) {
        const double y = step(b, normal01(rng));
        acc += y * y;
      }
      return 1.0 / std::sqrt(acc / n);
    }();
    return s;
  }
};

constexpr int kHumHarmonics = 5;
constexpr double kKnockTau = 0.003;  // s
constexpr double kClickTau = 0.001;

}  // namespace

SlipSynth::SlipSynth(const MicLayout& layout, const NoiseModel& noise, const SynthConfig& cfg, std::uint64_t seed)
    : layout_(layout),
      noise_(noise),
      cfg_(cfg),
      impact_rng_(derive_seed(seed, kImpacts)),
      amplitude_rng_(derive_seed(seed, kAmplitudes)),
      friction_rng_(derive_seed(seed, kFriction)),
      noise_rng_(derive_seed(seed, kNoise)),
      whine_rng_(derive_seed(seed, kWhine)),
      click_rng_(derive_seed(seed, kClicks)),
      knock_rng_(derive_seed(seed, kKnocks)) {
  cfg_.validate();
  if (layout_.size() < 1) throw ConfigError("layout has no microphones");
  if (noise_.hum_level < 0.0 || noise_.broadband_level < 0.0) throw ConfigError("noise levels must be non-negative");
  if (!(noise_.hum_fundamental > 0.0) || kHumHarmonics * noise_.hum_fundamental >= 0.5 * cfg_.sample_rate)
    throw ConfigError("hum fundamental out of range");

  const int n = layout_.size();
  for (const auto& p : layout_.positions) {
    const double d = (p - cfg_.contact_point).norm();
    delays_.push_back(std::lround(d * cfg_.delay_ms_per_mm * 1e-3 * cfg_.sample_rate));
  }
  max_delay_ = *std::max_element(delays_.begin(), delays_.end());
  line_.assign(static_cast<std::size_t>(max_delay_ + 1), Tap{});

  for (int c = 0; c < n; ++c) {
    pink_rngs_.emplace_back(derive_seed(seed, kPink, static_cast<std::uint64_t>(c)));
    sensor_rngs_.emplace_back(derive_seed(seed, kSensor, static_cast<std::uint64_t>(c)));
  }
  pink_state_.assign(static_cast<std::size_t>(n), std::array<double, 7>{});
  for (int c = 0; c < n; ++c) hum_coupling_.push_back(uniform(noise_rng_, 0.8, 1.2));
  for (int k = 0; k < kHumHarmonics; ++k) hum_phase_.push_back(uniform(noise_rng_, 0.0, kTwoPi));
  am_rate_ = uniform(noise_rng_, 0.3, 2.0);
  am_phase_ = uniform(noise_rng_, 0.0, kTwoPi);
  whine_hz_ = uniform(whine_rng_, 400.0, 1200.0);
  whine_phase_ = uniform(whine_rng_, 0.0, kTwoPi);
  whine_level_ = uniform(whine_rng_, 0.004, 0.012);
  click_rate_ = 1.5;
  click_filter_ = bandpass(4000.0, 1.0, cfg_.sample_rate);
  click_gains_.assign(static_cast<std::size_t>(n), 1.0);
  knock_filter_ = bandpass(1500.0, 0.6, cfg_.sample_rate);
}

void SlipSynth::set_profile(int id) {
  if (id == profile_) return;
  const SurfaceProfile p = surface_profile(id, cfg_.band_scale);
  Biquad f = bandpass(p.center_hz, p.q, cfg_.sample_rate);
  // Keep the filter state so a profile switch does not click.
  f.x1 = resonator_.x1;
  f.x2 = resonator_.x2;
  f.y1 = resonator_.y1;
  f.y2 = resonator_.y2;
  resonator_ = f;
  profile_ = id;
}

void SlipSynth::knock(const Knock& k, long delay_samples) {
  if (delay_samples < 0) throw InputError("knock delay must be non-negative");
  pending_.push_back({position_ + delay_samples, k});
}

void SlipSynth::rub(const Rub& r, long delay_samples) {
  if (delay_samples < 0) throw InputError("rub delay must be non-negative");
  if (!(r.duration > 0.0) || r.speed < 0.0) throw InputError("rub needs a positive duration and non-negative speed");
  rubs_.push_back({position_ + delay_samples, std::max(1L, std::lround(r.duration * cfg_.sample_rate)),
                   r.speed * unit(r.direction)});
}

void SlipSynth::render(const std::vector<Vector2d>& velocity, int surface_profile_id, Eigen::MatrixXf& out,
                       double level) {
  set_profile(surface_profile_id);
  const int n = layout_.size();
  const long len = static_cast<long>(velocity.size());
  out.setZero(len, n);

  const double fs = cfg_.sample_rate;
  const double ref = cfg_.reference_speed;
  const double jitter = cfg_.impact_jitter;
  const double knock_decay = std::exp(-1.0 / (kKnockTau * fs));
  const double click_decay = std::exp(-1.0 / (kClickTau * fs));
  const bool robot_on = noise_.robot_state != RobotState::Off;
  const bool moving = noise_.robot_state == RobotState::OnMoving;
  const double pink_scale = Pink::unit_scale() * cfg_.pink_rms * noise_.broadband_level;
  const std::size_t ring = line_.size();

  for (long i = 0; i < len; ++i) {
    const long pos = position_ + i;
    Vector2d v = velocity[static_cast<std::size_t>(i)];
    // Rubs add to what the surface hears, not to the displacement.
    for (auto it = rubs_.begin(); it != rubs_.end();) {
      const long k = pos - it->at;
      if (k >= it->length) {
        it = rubs_.erase(it);
        continue;
      }
      if (k >= 0) v += 0.5 * (1.0 - std::cos(kTwoPi * (k + 0.5) / it->length)) * it->velocity;
      ++it;
    }
    const double speed = v.norm();
    if (speed > 0.0) last_direction_ = v / speed;

    // Slip source: both streams advance every sample regardless of speed.
    const double r_imp = uniform01(impact_rng_);
    const double r_fric = normal01(friction_rng_);
    double e = cfg_.friction_level * (speed / ref) * r_fric;
    if (r_imp < cfg_.impacts_per_mm * speed / fs) {
      const double amp = cfg_.impact_level * std::sqrt(speed / ref) *
                         std::exp(jitter * normal01(amplitude_rng_) - 0.5 * jitter * jitter);
      e += amp;
    }
    const double slip = resonator_.process(level * e);

    // Knocks.
    for (auto it = pending_.begin(); it != pending_.end();) {
      if (it->at == pos) {
        knock_env_ += it->k.amplitude;
        knock_dir_ = unit(it->k.direction);
        it = pending_.erase(it);
      } else {
        ++it;
      }
    }
    double knock = 0.0;
    if (knock_env_ > 0.0) {
      knock = knock_filter_.process(knock_env_ * normal01(knock_rng_));
      knock_env_ *= knock_decay;
      if (knock_env_ < 1e-7) knock_env_ = 0.0;
    } else {
      knock = knock_filter_.process(0.0);
    }

    Tap& tap = line_[static_cast<std::size_t>(pos) % ring];
    tap.value = slip;
    tap.direction = last_direction_;
    tap.knock = knock;
    tap.knock_direction = knock_dir_;

    for (int c = 0; c < n; ++c) {
      const long src = pos - delays_[c];
      if (src < 0) continue;
      const Tap& t = line_[static_cast<std::size_t>(src) % ring];
      const Vector2d& p = layout_.positions[c];
      out(i, c) = static_cast<float>(channel_gain(t.direction, p, cfg_.alpha) * t.value +
                                     channel_gain(t.knock_direction, p, cfg_.alpha) * t.knock);
    }

    if (cfg_.sensor_noise_rms > 0.0) {
      for (int c = 0; c < n; ++c) out(i, c) += static_cast<float>(cfg_.sensor_noise_rms * normal01(sensor_rngs_[c]));
    }
    if (!robot_on) continue;
    const double t = static_cast<double>(pos) / fs;
    double hum = 0.0;
    for (int k = 0; k < kHumHarmonics; ++k) {
      hum += std::sin(kTwoPi * (k + 1) * noise_.hum_fundamental * t + hum_phase_[k]) / (k + 1);
    }
    hum *= cfg_.hum_amplitude * noise_.hum_level;
    double am = 1.0, whine = 0.0, click = 0.0;
    if (moving) {
      am = 1.0 + 0.3 * std::sin(kTwoPi * am_rate_ * t + am_phase_);
      whine_hz_ = std::clamp(whine_hz_ + 20.0 * normal01(whine_rng_) / std::sqrt(fs), 400.0, 1200.0);
      whine_phase_ = std::fmod(whine_phase_ + kTwoPi * whine_hz_ / fs, kTwoPi);
      whine = whine_level_ * noise_.hum_level * std::sin(whine_phase_);
      if (uniform01(click_rng_) < click_rate_ / fs) {
        click_env_ += cfg_.impact_level * uniform(click_rng_, 0.5, 1.5);
        for (int c = 0; c < n; ++c) click_gains_[c] = uniform(click_rng_, 0.7, 1.3);
      }
      click = click_filter_.process(click_env_ * normal01(click_rng_));
      click_env_ *= click_decay;
      if (click_env_ < 1e-7) click_env_ = 0.0;
    }
    for (int c = 0; c < n; ++c) {
      const double pink = pink_scale * Pink::step(pink_state_[c], normal01(pink_rngs_[c]));
      const double value = am * (hum * hum_coupling_[c] + pink) + whine * hum_coupling_[c] + click * click_gains_[c];
      out(i, c) += static_cast<float>(value);
    }
  }
  position_ += len;
}

// ---------------------------------------------------------------------------
// Trials

Vector2d SlipTrack::displacement(double begin_s, double length_s) const {
  const long b = std::lround(begin_s / hop_s);
  const long n = std::lround(length_s / hop_s);
  Vector2d d = Vector2d::Zero();
  for (long k = std::max(b, 0L); k < std::min(b + n, static_cast<long>(increments.size())); ++k) d += increments[k];
  return d;
}

Vector2d SlipTrack::total() const {
  Vector2d d = Vector2d::Zero();
  for (const auto& x : increments) d += x;
  return d;
}

std::vector<Vector2d> TrialSpec::velocity_track() const {
  const double fs = synth.sample_rate;
  const long len = std::lround(duration * fs);
  std::vector<Vector2d> v(static_cast<std::size_t>(std::max(len, 0L)), Vector2d::Zero());
  for (const auto& ev : events) {
    const long s0 = std::lround(ev.t0 * fs);
    const auto track = ev.velocity_track(fs);
    for (std::size_t i = 0; i < track.size(); ++i) {
      const long j = s0 + static_cast<long>(i);
      if (j < 0 || j >= len) throw ConfigError("slip event extends beyond the trial");
      v[static_cast<std::size_t>(j)] += track[i];
    }
  }
  return v;
}

SlipTrack TrialSpec::slip_track() const {
  const double fs = synth.sample_rate;
  const long hop = std::lround(synth.track_hop_ms * 1e-3 * fs);
  const auto v = velocity_track();
  SlipTrack track;
  track.hop_s = static_cast<double>(hop) / fs;
  const long len = static_cast<long>(v.size());
  track.increments.assign(static_cast<std::size_t>((len + hop - 1) / hop), Vector2d::Zero());
  for (long i = 0; i < len; ++i) track.increments[static_cast<std::size_t>(i / hop)] += v[i] / fs;
  return track;
}

SimTrial synth_trial(const TrialSpec& spec) {
  spec.synth.validate();
  const double fs = spec.synth.sample_rate;
  SimTrial trial;
  trial.spec = spec;
  trial.track = spec.slip_track();
  const auto velocity = spec.velocity_track();
  const long len = static_cast<long>(velocity.size());

  // Per-sample contact level and profile; events may override the trial profile.
  std::vector<double> level(static_cast<std::size_t>(len), 1.0);
  std::vector<int> profile(static_cast<std::size_t>(len), spec.surface_profile_id);
  for (const auto& ev : spec.events) {
    const long s0 = std::lround(ev.t0 * fs);
    const long s1 = std::min(len, s0 + std::lround(ev.duration * fs));
    for (long j = std::max(s0, 0L); j < s1; ++j) {
      level[j] = ev.level;
      profile[j] = ev.surface_profile_id;
    }
  }

  SlipSynth synth(spec.layout, spec.noise, spec.synth, spec.seed);
  for (const auto& k : spec.knocks) synth.knock(k, std::lround(k.t * fs));
  for (const auto& r : spec.rubs) synth.rub(r, std::lround(r.t * fs));
  trial.audio = dsp::AudioBuffer::zeros(spec.layout.size(), len, fs);
  Eigen::MatrixXf chunk;
  long i = 0;
  while (i < len) {
    long j = i + 1;
    while (j < len && level[j] == level[i] && profile[j] == profile[i]) ++j;
    const std::vector<Vector2d> part(velocity.begin() + i, velocity.begin() + j);
    synth.render(part, profile[i], chunk, level[i]);
    trial.audio.samples.middleRows(i, j - i) = chunk;
    i = j;
  }
  return trial;
}

// ---------------------------------------------------------------------------
// Dataset planning

DatasetSpec DatasetSpec::pretrain_default() {
  DatasetSpec s;
  s.name = "pretrain";
  s.kind = DatasetKind::RobotInduced;
  s.trial_seconds = 6.0;
  s.target_slip_windows = 2000;
  s.noise = {1, 1, 0};
  s.profiles = {0};
  s.decoy_rate = 0.2;
  s.noise_level_min = 0.25;
  s.noise_level_max = 1.25;
  s.synth.sensor_noise_rms = 0.002;
  s.seed = 1;
  return s;
}

DatasetSpec DatasetSpec::finetune_default() {
  DatasetSpec s;
  s.name = "finetune";
  s.kind = DatasetKind::ExternallyInduced;
  s.trial_seconds = 5.0;
  s.target_slip_windows = 500;
  s.noise = {30, 10, 20};
  s.profiles = {1, 2, 3, 4, 5};
  s.decoy_rate = 1.0;
  s.synth.sensor_noise_rms = 0.002;
  s.seed = 2;
  return s;
}

int count_slip_windows(const TrialSpec& trial, double window_ms, double hop_ms, double epsilon) {
  const SlipTrack track = trial.slip_track();
  const long per_window = std::lround(window_ms * 1e-3 / track.hop_s);
  const long per_hop = std::lround(hop_ms * 1e-3 / track.hop_s);
  if (per_window <= 0 || per_hop <= 0) throw ConfigError("window and hop must cover at least one track step");
  // Windows must also fit the audio; the first frame starts at 0.
  const long usable = std::lround(trial.duration * trial.synth.sample_rate) /
                      std::lround(track.hop_s * trial.synth.sample_rate);
  int count = 0;
  for (long b = 0; b + per_window <= usable; b += per_hop) {
    Vector2d d = Vector2d::Zero();
    for (long k = b; k < b + per_window; ++k) d += track.increments[k];
    if (d.norm() > epsilon) ++count;
  }
  return count;
}

namespace {

std::vector<RobotState> noise_pattern(const NoiseMix& mix) {
  int a = mix.on_stationary, b = mix.on_moving, c = mix.off;
  if (a < 0 || b < 0 || c < 0) throw ConfigError("noise mix counts must be non-negative");
  const int g = std::gcd(std::gcd(a, b), c);
  if (g == 0) throw ConfigError("noise mix is empty");
  a /= g;
  b /= g;
  c /= g;
  std::vector<RobotState> out;
  for (int j = 0; j < std::max({a, b, c}); ++j) {
    if (j < a) out.push_back(RobotState::OnStationary);
    if (j < b) out.push_back(RobotState::OnMoving);
    if (j < c) out.push_back(RobotState::Off);
  }
  return out;
}

void add_decoys(TrialSpec& t, const DatasetSpec& spec, double from, double to, Rng& rng, double level) {
  // Poisson decoys in a slip-free interval: knocks, or rubs that sound like a
  // few tens of ms of slip without moving anything.
  const double rate = spec.decoy_rate;
  if (rate <= 0.0 || to - from < 0.05) return;
  double x = from;
  while (true) {
    x += -std::log(1.0 - uniform01(rng)) / rate;
    if (x > to - 0.02) break;
    if (uniform01(rng) < spec.rub_fraction) {
      Rub r{x, uniform(rng, 0.03, 0.08), uniform(rng, spec.speed_min, spec.speed_max), uniform(rng, 0.0, kTwoPi)};
      if (x + r.duration > to - 0.02) break;
      t.rubs.push_back(r);
      x += r.duration;
    } else {
      t.knocks.push_back({x, level * uniform(rng, 0.5, 2.0), uniform(rng, 0.0, kTwoPi)});
    }
  }
}

}  // namespace

std::vector<TrialSpec> plan_dataset(const DatasetSpec& spec) {
  spec.synth.validate();
  if (spec.target_slip_windows < 0 || spec.max_trials < 0) throw ConfigError("dataset counts must be non-negative");
  if (!(spec.trial_seconds > 1.0)) throw ConfigError("trial_seconds must exceed 1 s");
  if (spec.profiles.empty()) throw ConfigError("dataset needs at least one surface profile");
  if (!(spec.speed_min > 0.0 && spec.speed_max >= spec.speed_min)) throw ConfigError("bad speed range");
  if (!(spec.noise_level_min >= 0.0 && spec.noise_level_max >= spec.noise_level_min))
    throw ConfigError("bad noise level range");
  for (int p : spec.profiles) surface_profile(p);
  const MicLayout layout = MicLayout::named(spec.layout);
  const auto pattern = noise_pattern(spec.noise);

  std::vector<TrialSpec> trials;
  int windows = 0;
  long event_counter = 0;  // stratifies initial directions over 8 bins
  const double knock_level = spec.synth.impact_level * 4.0;
  for (int i = 0; windows < spec.target_slip_windows && i < spec.max_trials; ++i) {
    TrialSpec t;
    t.trial_id = spec.name + "_" + std::to_string(i);
    t.layout = layout;
    t.noise = NoiseModel::for_state(pattern[static_cast<std::size_t>(i) % pattern.size()]);
    t.surface_profile_id = spec.profiles[static_cast<std::size_t>(i) % spec.profiles.size()];
    t.duration = spec.trial_seconds;
    t.synth = spec.synth;
    t.seed = derive_seed(spec.seed, static_cast<std::uint64_t>(i));
    Rng rng(derive_seed(t.seed, kPlan));
    if (t.surface_profile_id == 0) t.synth.band_scale = spec.synth.band_scale * uniform(rng, 0.85, 1.15);
    const double noise_level = uniform(rng, spec.noise_level_min, spec.noise_level_max);
    t.noise.hum_level = t.noise.broadband_level = noise_level;

    const double end = spec.trial_seconds - 0.1;
    double now = uniform(rng, 0.2, 0.6);
    double quiet_from = 0.0;
    auto next_direction = [&] {
      const double bin = static_cast<double>(event_counter++ % 8);
      return (bin + uniform01(rng)) * kPi / 4.0;
    };
    if (spec.kind == DatasetKind::RobotInduced) {
      // Straight sweeps separated by pauses.
      while (true) {
        const double dur = uniform(rng, 0.5, 1.2);
        if (now + dur > end) break;
        SlipEvent ev;
        ev.t0 = now;
        ev.duration = dur;
        ev.direction = next_direction();
        ev.speed = uniform(rng, spec.speed_min, spec.speed_max);
        ev.ramp = 0.03;
        ev.surface_profile_id = t.surface_profile_id;
        ev.speed_wobble = 0.1;
        ev.seed = derive_seed(t.seed, kEventShape, t.events.size());
        add_decoys(t, spec, quiet_from, now, rng, knock_level);
        t.events.push_back(ev);
        now += dur;
        quiet_from = now;
        now += uniform(rng, 0.2, 0.6);
      }
    } else {
      // Chains of 1-3 pushes with direction changes between segments; a knock
      // marks each chain onset.
      while (true) {
        const int segments = 1 + static_cast<int>(uniform_index(rng, 3));
        std::vector<double> durs;
        double total = 0.0;
        for (int s = 0; s < segments; ++s) {
          durs.push_back(uniform(rng, 0.3, 0.8));
          total += durs.back();
        }
        if (now + total > end) break;
        add_decoys(t, spec, quiet_from, now, rng, knock_level);
        double theta = next_direction();
        const double level = uniform(rng, 0.9, 1.1);
        t.knocks.push_back({now, knock_level * uniform(rng, 0.5, 1.5), theta});
        for (int s = 0; s < segments; ++s) {
          if (s > 0) theta += (uniform01(rng) < 0.5 ? -1.0 : 1.0) * uniform(rng, kPi / 9.0, kPi / 3.0);
          SlipEvent ev;
          ev.t0 = now;
          ev.duration = durs[s];
          ev.direction = theta;
          ev.speed = uniform(rng, spec.speed_min, spec.speed_max);
          ev.ramp = 0.015;
          ev.surface_profile_id = t.surface_profile_id;
          ev.turn_rate = uniform(rng, -1.0, 1.0);
          ev.direction_wobble = 1.0;
          ev.speed_wobble = 0.35;
          ev.level = level;
          ev.seed = derive_seed(t.seed, kEventShape, t.events.size());
          t.events.push_back(ev);
          now += durs[s];
        }
        quiet_from = now;
        now += uniform(rng, 0.3, 0.8);
      }
    }
    add_decoys(t, spec, quiet_from, spec.trial_seconds, rng, knock_level);
    std::sort(t.knocks.begin(), t.knocks.end(), [](const Knock& a, const Knock& b) { return a.t < b.t; });
    windows += count_slip_windows(t, spec.window_ms, spec.hop_ms, spec.epsilon);
    trials.push_back(std::move(t));
  }
  if (spec.target_slip_windows == 0) trials.clear();
  return trials;
}

// ---------------------------------------------------------------------------
// Files

std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t h) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < size; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

void write_track(const std::filesystem::path& path, const SlipTrack& track) {
  std::ofstream out(path);
  if (!out) throw EnvironmentError("cannot write " + path.string());
  for (std::size_t k = 0; k < track.increments.size(); ++k) {
    out << format_double(static_cast<double>(k) * track.hop_s) << ' ' << format_double(track.increments[k].x())
        << ' ' << format_double(track.increments[k].y()) << '\n';
  }
  if (!out) throw EnvironmentError("write failed: " + path.string());
}

SlipTrack read_track(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path.string());
  SlipTrack track;
  std::string line;
  std::vector<double> times;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string t, x, z;
    if (!(ss >> t >> x >> z)) throw FormatError("bad slip-track line in " + path.string());
    times.push_back(parse_double(t, path.string()));
    track.increments.emplace_back(parse_double(x, path.string()), parse_double(z, path.string()));
  }
  if (times.size() >= 2) track.hop_s = times[1] - times[0];
  return track;
}

void Manifest::write(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw EnvironmentError("cannot write " + path.string());
  out << "# trial_id\taudio\ttrack\tlayout\tnoise\tsurface_profile\tseed\tduration\n";
  for (const auto& e : entries) {
    out << e.trial_id << '\t' << e.audio_path << '\t' << e.track_path << '\t' << e.layout << '\t'
        << to_string(e.noise) << '\t' << e.surface_profile_id << '\t' << e.seed << '\t' << format_double(e.duration)
        << '\n';
  }
  if (!out) throw EnvironmentError("write failed: " + path.string());
}

Manifest Manifest::read(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open manifest " + path.string());
  Manifest m;
  m.directory = path.parent_path();
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> f;
    std::istringstream ss(line);
    std::string field;
    while (std::getline(ss, field, '\t')) f.push_back(field);
    if (f.size() != 8) throw FormatError("manifest line has " + std::to_string(f.size()) + " fields: " + line);
    ManifestEntry e;
    e.trial_id = f[0];
    e.audio_path = f[1];
    e.track_path = f[2];
    e.layout = f[3];
    e.noise = robot_state_from_string(f[4]);
    try {
      e.surface_profile_id = std::stoi(f[5]);
      e.seed = std::stoull(f[6]);
    } catch (const std::exception&) {
      throw FormatError("bad manifest line: " + line);
    }
    e.duration = parse_double(f[7], path.string());
    m.entries.push_back(std::move(e));
  }
  return m;
}

std::uint64_t Manifest::digest() const {
  std::ostringstream text;
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& e : entries) {
    const std::string row = e.trial_id + '\t' + e.layout + '\t' + to_string(e.noise) + '\t' +
                            std::to_string(e.surface_profile_id) + '\t' + std::to_string(e.seed) + '\n';
    h = fnv1a(row.data(), row.size(), h);
    for (const auto& rel : {e.audio_path, e.track_path}) {
      std::ifstream in(directory / rel, std::ios::binary);
      if (!in) throw InputError("manifest references missing file " + (directory / rel).string());
      const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
      h = fnv1a(bytes.data(), bytes.size(), h);
    }
  }
  return h;
}

Manifest make_dataset(const DatasetSpec& spec, const std::filesystem::path& out_dir) {
  const auto plans = plan_dataset(spec);
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw EnvironmentError("cannot create " + out_dir.string() + ": " + ec.message());
  Manifest m;
  m.directory = out_dir;
  for (const auto& plan : plans) {
    const SimTrial trial = synth_trial(plan);
    ManifestEntry e;
    e.trial_id = plan.trial_id;
    e.audio_path = plan.trial_id + ".wav";
    e.track_path = plan.trial_id + ".track";
    e.layout = plan.layout.name;
    e.noise = plan.noise.robot_state;
    e.surface_profile_id = plan.surface_profile_id;
    e.seed = plan.seed;
    e.duration = plan.duration;
    try {
      dsp::write_wav(out_dir / e.audio_path, trial.audio);
    } catch (const std::exception& ex) {
      throw EnvironmentError(ex.what());
    }
    write_track(out_dir / e.track_path, trial.track);
    m.entries.push_back(std::move(e));
  }
  m.write(out_dir / "manifest.txt");
  return m;
}

SimTrial load_trial(const Manifest& manifest, const ManifestEntry& entry) {
  SimTrial t;
  t.audio = dsp::read_wav(manifest.directory / entry.audio_path);
  t.track = read_track(manifest.directory / entry.track_path);
  t.spec.trial_id = entry.trial_id;
  t.spec.layout = MicLayout::named(entry.layout);
  t.spec.noise = NoiseModel::for_state(entry.noise);
  t.spec.surface_profile_id = entry.surface_profile_id;
  t.spec.seed = entry.seed;
  t.spec.duration = entry.duration;
  t.spec.synth.sample_rate = t.audio.sample_rate;
  if (t.audio.channel_count() != t.spec.layout.size())
    throw FormatError(entry.trial_id + ": audio channel count does not match layout");
  return t;
}

}  // namespace aslip::sim
