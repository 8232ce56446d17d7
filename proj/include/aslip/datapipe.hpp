#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "aslip/dsp.hpp"
#include "aslip/loss.hpp"
#include "aslip/simulator.hpp"

// Trials -> labeled, normalized analysis windows -> training batches.
//
// A trial is featurized once at the frame hop; windows are column slices of
// that spectrogram, so a window starting on a frame boundary has exactly the
// bits a streaming featurizer would produce for the same samples.

namespace aslip::data {

using WindowSpectrogram = dsp::LogMelSpectrogramT<float>;

struct WindowSample {
  WindowSpectrogram spectrogram;  // normalized, one analysis window
  loss::SlipLabel label;
  double weight = 1.0;
  std::string trial_id;
  int window_index = 0;
  double t_begin = 0.0;  // s
  sim::RobotState noise = sim::RobotState::Off;
  int surface_profile_id = 0;
};

struct WindowConfig {
  double window_ms = 200.0;
  double hop_ms = 50.0;
  double epsilon = 0.5;  // mm per window

  /// Same hop, other length; epsilon scales with the length so the slip label keeps
  /// meaning the same slip speed.
  WindowConfig resized(double ms) const { return {ms, hop_ms, epsilon * ms / window_ms}; }
};

/// A trial featurized at the frame hop, not yet normalized.
struct TrialFeatures {
  std::string trial_id;
  dsp::LogMelSpectrogram spectrogram;
  sim::SlipTrack track;
  sim::RobotState noise = sim::RobotState::Off;
  int surface_profile_id = 0;
  dsp::Index samples = 0;
  double sample_rate = 48000.0;
};

TrialFeatures featurize(const sim::SimTrial& trial, const dsp::FeatureConfig& features, const dsp::MelFilterbank& fb);

/// 1 + floor((samples - window) / hop), or 0.
long window_count(dsp::Index samples, double sample_rate, double window_ms, double hop_ms);

/// Overlapping windows at cfg.hop_ms; labels are vector sums of the track
/// increments inside each window. Window and hop must be multiples of the frame
/// hop and of the track resolution.
std::vector<WindowSample> slice_windows(const TrialFeatures& trial, const dsp::FeatureConfig& features,
                                        const WindowConfig& cfg, const dsp::NormStats& stats);

std::vector<WindowSample> slice_windows(const sim::SimTrial& trial, double window_ms, double hop_ms,
                                        const dsp::MelFilterbank& fb, const dsp::NormStats& stats,
                                        double epsilon = 0.5);

enum class RebalanceMode { Subsample, Reweight, Both };
RebalanceMode rebalance_mode_from_string(const std::string& s);
std::string to_string(RebalanceMode m);

struct RebalanceResult {
  std::vector<WindowSample> samples;
  double pos_weight = 1.0;
  bool no_slip_samples = false;  // nothing to balance against; passed through
};

/// Caps no-slip windows at target_ratio x slip windows (subsample) and/or sets
/// pos_weight = retained no-slip / slip (reweight). Slip windows are never dropped
/// and the retained windows keep their input order.
RebalanceResult rebalance(std::vector<WindowSample> samples, double target_ratio, RebalanceMode mode,
                          std::uint64_t seed);

struct AugmentConfig {
  int time_masks = 2;
  int time_mask_max = 4;   // frames
  int freq_masks = 2;
  int freq_mask_max = 8;   // bins
  double gain_jitter_db = 6.0;  // uniform in [-x, +x], common to all channels

  void validate(dsp::Index mel_bins, dsp::Index frames) const;
  bool identity() const { return (time_masks == 0 || time_mask_max == 0) && (freq_masks == 0 || freq_mask_max == 0) && gain_jitter_db == 0.0; }
};

/// SpecAugment-style masking (filled with 0, the normalized mean) and a random
/// gain, applied as 2 log(g) / sigma per (channel, bin) cell.
void augment(WindowSpectrogram& spectrogram, const AugmentConfig& cfg, const dsp::NormStats& stats,
             std::uint64_t seed);
WindowSample augment(const WindowSample& sample, const AugmentConfig& cfg, const dsp::NormStats& stats,
                     std::uint64_t seed);

// ---------------------------------------------------------------------------

/// A loaded dataset: per-trial features plus the windows cut from them.
struct Corpus {
  std::vector<TrialFeatures> trials;
  dsp::FeatureConfig features;
};

Corpus load_corpus(const sim::Manifest& manifest, const dsp::FeatureConfig& features);
/// Synthesizes planned trials directly in memory (no files).
Corpus synth_corpus(const std::vector<sim::TrialSpec>& plans, const dsp::FeatureConfig& features);

dsp::NormStats corpus_norm_stats(const Corpus& corpus, const std::vector<std::size_t>& trial_indices);
std::vector<WindowSample> corpus_windows(const Corpus& corpus, const std::vector<std::size_t>& trial_indices,
                                         const WindowConfig& cfg, const dsp::NormStats& stats);

/// Deterministic trial-level split: val gets round(fraction * trials) trials,
/// at least one when there are two or more trials; a single trial always trains.
struct Split {
  std::vector<std::size_t> train, val;
};
Split split_trials(std::size_t trials, double val_fraction, std::uint64_t seed);

std::vector<std::size_t> all_trials(const Corpus& corpus);

}  // namespace aslip::data
