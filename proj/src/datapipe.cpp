#include "aslip/datapipe.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "aslip/error.hpp"
#include "aslip/rng.hpp"

namespace aslip::data {

namespace {

long samples_of(double ms, double sample_rate) { return std::lround(ms * sample_rate / 1000.0); }

}  // namespace

TrialFeatures featurize(const sim::SimTrial& trial, const dsp::FeatureConfig& features, const dsp::MelFilterbank& fb) {
  TrialFeatures f;
  f.trial_id = trial.spec.trial_id;
  f.spectrogram = dsp::log_mel(trial.audio, fb, features);
  f.track = trial.track;
  f.noise = trial.spec.noise.robot_state;
  f.surface_profile_id = trial.spec.surface_profile_id;
  f.samples = trial.audio.length();
  f.sample_rate = trial.audio.sample_rate;
  return f;
}

long window_count(dsp::Index samples, double sample_rate, double window_ms, double hop_ms) {
  const long w = samples_of(window_ms, sample_rate);
  const long h = samples_of(hop_ms, sample_rate);
  if (w <= 0 || h <= 0) throw ConfigError("window and hop must be positive");
  if (samples < w) return 0;
  return 1 + (static_cast<long>(samples) - w) / h;
}

std::vector<WindowSample> slice_windows(const TrialFeatures& trial, const dsp::FeatureConfig& features,
                                        const WindowConfig& cfg, const dsp::NormStats& stats) {
  const double fs = trial.sample_rate;
  const long frame_hop = features.hop_samples();
  const long win = samples_of(cfg.window_ms, fs);
  const long hop = samples_of(cfg.hop_ms, fs);
  const long track_hop = std::lround(trial.track.hop_s * fs);
  if (hop <= 0 || win <= 0) throw ConfigError("window and hop must be positive");
  if (hop > win) throw ConfigError("hop must not exceed the window");
  if (hop % frame_hop != 0) throw ConfigError("window hop must be a multiple of the frame hop");
  if (track_hop <= 0 || win % track_hop != 0 || hop % track_hop != 0)
    throw ConfigError("window and hop must be multiples of the slip-track resolution");

  const long frames = features.frames_per_window(cfg.window_ms);
  const long count = window_count(trial.samples, fs, cfg.window_ms, cfg.hop_ms);
  const auto normalized = dsp::normalize(trial.spectrogram, stats);

  std::vector<WindowSample> out;
  out.reserve(static_cast<std::size_t>(count));
  for (long j = 0; j < count; ++j) {
    const long start = j * hop;
    WindowSample s;
    s.spectrogram = normalized.slice_frames(start / frame_hop, frames).cast<float>();
    Eigen::Vector2d v = Eigen::Vector2d::Zero();
    const long k0 = start / track_hop, k1 = (start + win) / track_hop;
    for (long k = k0; k < std::min(k1, static_cast<long>(trial.track.increments.size())); ++k) {
      v += trial.track.increments[k];
    }
    s.label = loss::SlipLabel::from_displacement(v, cfg.epsilon);
    if (j > 0 && out.back().label.is_slip) {
      s.label.has_prev = true;
      s.label.prev_d_star = out.back().label.d_star;
    }
    s.trial_id = trial.trial_id;
    s.window_index = static_cast<int>(j);
    s.t_begin = static_cast<double>(start) / fs;
    s.noise = trial.noise;
    s.surface_profile_id = trial.surface_profile_id;
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<WindowSample> slice_windows(const sim::SimTrial& trial, double window_ms, double hop_ms,
                                        const dsp::MelFilterbank& fb, const dsp::NormStats& stats,
                                        double epsilon) {
  dsp::FeatureConfig features;
  features.sample_rate = fb.sample_rate;
  features.mel_bins = fb.mel_bins();
  features.f_min = fb.f_min;
  features.f_max = fb.f_max;
  features.fft_size = fb.fft_size;
  return slice_windows(featurize(trial, features, fb), features, WindowConfig{window_ms, hop_ms, epsilon}, stats);
}

RebalanceMode rebalance_mode_from_string(const std::string& s) {
  if (s == "subsample") return RebalanceMode::Subsample;
  if (s == "reweight") return RebalanceMode::Reweight;
  if (s == "both") return RebalanceMode::Both;
  throw ConfigError("unknown rebalance mode '" + s + "'");
}

std::string to_string(RebalanceMode m) {
  switch (m) {
    case RebalanceMode::Subsample: return "subsample";
    case RebalanceMode::Reweight: return "reweight";
    case RebalanceMode::Both: return "both";
  }
  return "both";
}

RebalanceResult rebalance(std::vector<WindowSample> samples, double target_ratio, RebalanceMode mode,
                          std::uint64_t seed) {
  if (!(target_ratio > 0.0)) throw ConfigError("rebalance target_ratio must be positive");
  RebalanceResult r;
  std::vector<std::size_t> slip, no_slip;
  for (std::size_t i = 0; i < samples.size(); ++i) (samples[i].label.is_slip ? slip : no_slip).push_back(i);
  if (slip.empty()) {
    r.no_slip_samples = true;
    r.samples = std::move(samples);
    return r;
  }

  std::vector<char> keep(samples.size(), 1);
  std::size_t retained = no_slip.size();
  if (mode != RebalanceMode::Reweight) {
    const auto cap = static_cast<std::size_t>(std::floor(target_ratio * static_cast<double>(slip.size())));
    if (no_slip.size() > cap) {
      // Partial Fisher-Yates picks which no-slip windows survive.
      Rng rng(seed);
      for (std::size_t i = 0; i < cap; ++i) {
        const std::size_t j = i + uniform_index(rng, no_slip.size() - i);
        std::swap(no_slip[i], no_slip[j]);
      }
      for (std::size_t i = cap; i < no_slip.size(); ++i) keep[no_slip[i]] = 0;
      retained = cap;
    }
  }
  if (mode != RebalanceMode::Subsample) {
    r.pos_weight = static_cast<double>(retained) / static_cast<double>(slip.size());
    // An all-slip set would get zero weight on every positive; keep it neutral.
    if (retained == 0) r.pos_weight = 1.0;
  }
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (keep[i]) r.samples.push_back(std::move(samples[i]));
  }
  return r;
}

void AugmentConfig::validate(dsp::Index mel_bins, dsp::Index frames) const {
  if (time_masks < 0 || freq_masks < 0 || time_mask_max < 0 || freq_mask_max < 0)
    throw ConfigError("mask counts and widths must be non-negative");
  if (time_masks > 0 && time_mask_max >= frames) throw ConfigError("time mask width must be below the frame count");
  if (freq_masks > 0 && freq_mask_max >= mel_bins) throw ConfigError("frequency mask width must be below the bin count");
  if (gain_jitter_db < 0.0) throw ConfigError("gain jitter must be non-negative");
}

void augment(WindowSpectrogram& spec, const AugmentConfig& cfg, const dsp::NormStats& stats, std::uint64_t seed) {
  const dsp::Index m = spec.mel_bins(), t = spec.time_frames();
  cfg.validate(m, t);
  if (cfg.identity()) return;
  Rng rng(seed);

  if (cfg.gain_jitter_db > 0.0) {
    const double db = uniform(rng, -cfg.gain_jitter_db, cfg.gain_jitter_db);
    const double shift = 2.0 * std::log(std::pow(10.0, db / 20.0));
    for (dsp::Index c = 0; c < spec.channel_count(); ++c) {
      for (dsp::Index b = 0; b < m; ++b) {
        const auto d = static_cast<float>(shift / std::sqrt(stats.variance(c, b)));
        spec.channels[c].row(b).array() += d;
      }
    }
  }
  for (int k = 0; k < cfg.time_masks && cfg.time_mask_max > 0; ++k) {
    const auto w = static_cast<dsp::Index>(uniform_index(rng, static_cast<std::uint64_t>(cfg.time_mask_max) + 1));
    const auto s = static_cast<dsp::Index>(uniform_index(rng, static_cast<std::uint64_t>(t - w) + 1));
    for (auto& ch : spec.channels) ch.middleCols(s, w).setZero();
  }
  for (int k = 0; k < cfg.freq_masks && cfg.freq_mask_max > 0; ++k) {
    const auto w = static_cast<dsp::Index>(uniform_index(rng, static_cast<std::uint64_t>(cfg.freq_mask_max) + 1));
    const auto s = static_cast<dsp::Index>(uniform_index(rng, static_cast<std::uint64_t>(m - w) + 1));
    for (auto& ch : spec.channels) ch.middleRows(s, w).setZero();
  }
}

WindowSample augment(const WindowSample& sample, const AugmentConfig& cfg, const dsp::NormStats& stats,
                     std::uint64_t seed) {
  WindowSample out = sample;
  augment(out.spectrogram, cfg, stats, seed);
  return out;
}

// ---------------------------------------------------------------------------

Corpus load_corpus(const sim::Manifest& manifest, const dsp::FeatureConfig& features) {
  Corpus c;
  c.features = features;
  const auto fb = features.make_filterbank();
  for (const auto& e : manifest.entries) c.trials.push_back(featurize(sim::load_trial(manifest, e), features, fb));
  return c;
}

Corpus synth_corpus(const std::vector<sim::TrialSpec>& plans, const dsp::FeatureConfig& features) {
  Corpus c;
  c.features = features;
  const auto fb = features.make_filterbank();
  for (const auto& p : plans) c.trials.push_back(featurize(sim::synth_trial(p), features, fb));
  return c;
}

dsp::NormStats corpus_norm_stats(const Corpus& corpus, const std::vector<std::size_t>& trial_indices) {
  std::vector<const dsp::LogMelSpectrogram*> specs;
  for (auto i : trial_indices) specs.push_back(&corpus.trials.at(i).spectrogram);
  return dsp::compute_norm_stats(specs);
}

std::vector<WindowSample> corpus_windows(const Corpus& corpus, const std::vector<std::size_t>& trial_indices,
                                         const WindowConfig& cfg, const dsp::NormStats& stats) {
  std::vector<WindowSample> out;
  for (auto i : trial_indices) {
    auto w = slice_windows(corpus.trials.at(i), corpus.features, cfg, stats);
    std::move(w.begin(), w.end(), std::back_inserter(out));
  }
  return out;
}

Split split_trials(std::size_t trials, double val_fraction, std::uint64_t seed) {
  if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw ConfigError("validation fraction must be in [0, 1)");
  std::vector<std::size_t> idx(trials);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed);
  for (std::size_t i = trials; i > 1; --i) std::swap(idx[i - 1], idx[uniform_index(rng, i)]);
  std::size_t nval = static_cast<std::size_t>(std::lround(val_fraction * static_cast<double>(trials)));
  if (trials < 2) nval = 0;  // never leave training empty
  else if (val_fraction > 0.0) nval = std::clamp<std::size_t>(nval, 1, trials - 1);
  Split s;
  s.val.assign(idx.begin(), idx.begin() + static_cast<long>(nval));
  s.train.assign(idx.begin() + static_cast<long>(nval), idx.end());
  std::sort(s.val.begin(), s.val.end());
  std::sort(s.train.begin(), s.train.end());
  return s;
}

std::vector<std::size_t> all_trials(const Corpus& corpus) {
  std::vector<std::size_t> idx(corpus.trials.size());
  std::iota(idx.begin(), idx.end(), 0);
  return idx;
}

}  // namespace aslip::data
