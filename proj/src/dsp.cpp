#include "aslip/dsp.hpp"

#include <unsupported/Eigen/FFT>

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>
#include <string>

#include "aslip/error.hpp"

namespace aslip::dsp {

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }

double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

MelFilterbank build_mel_filterbank(int mel_bins, double f_min, double f_max, double sample_rate,
                                   int fft_size) {
  if (mel_bins < 2) throw ConfigError("mel filterbank needs at least 2 bins");
  if (sample_rate <= 0.0) throw ConfigError("sample rate must be positive");
  if (fft_size < 2) throw ConfigError("fft size must be at least 2");
  if (!(f_min >= 0.0 && f_min < f_max && f_max <= sample_rate / 2.0)) {
    throw ConfigError("invalid mel frequency range [" + std::to_string(f_min) + ", " +
                      std::to_string(f_max) + "] for sample rate " + std::to_string(sample_rate));
  }

  const int bins = fft_size / 2 + 1;
  const double mel_lo = hz_to_mel(f_min);
  const double mel_hi = hz_to_mel(f_max);

  // M + 2 edges equally spaced in mel; filter m spans edges m..m+2.
  Eigen::VectorXd edges(mel_bins + 2);
  for (int i = 0; i < mel_bins + 2; ++i) {
    edges[i] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * i / (mel_bins + 1));
  }

  MelFilterbank fb;
  fb.filters = Eigen::MatrixXd::Zero(mel_bins, bins);
  fb.center_hz = edges.segment(1, mel_bins);
  fb.f_min = f_min;
  fb.f_max = f_max;
  fb.sample_rate = sample_rate;
  fb.fft_size = fft_size;

  for (int m = 0; m < mel_bins; ++m) {
    const double lo = edges[m], mid = edges[m + 1], hi = edges[m + 2];
    for (int k = 0; k < bins; ++k) {
      const double f = k * sample_rate / fft_size;
      double w = 0.0;
      if (f > lo && f <= mid) {
        w = (f - lo) / (mid - lo);
      } else if (f > mid && f < hi) {
        w = (hi - f) / (hi - mid);
      }
      fb.filters(m, k) = w;
    }
    const double peak = fb.filters.row(m).maxCoeff();
    if (peak <= 0.0) {
      throw ConfigError("mel filter " + std::to_string(m) +
                        " covers no FFT bin; increase fft_size or reduce mel_bins");
    }
    fb.filters.row(m) /= peak;
  }
  return fb;
}

template <typename Scalar>
LogMelSpectrogramT<Scalar> LogMelSpectrogramT<Scalar>::slice_frames(Index begin, Index count) const {
  if (begin < 0 || count < 0 || begin + count > time_frames()) {
    throw InputError("frame slice out of range");
  }
  LogMelSpectrogramT out;
  out.window_ms = window_ms;
  out.hop_ms = hop_ms;
  out.channels.reserve(channels.size());
  for (const auto& c : channels) out.channels.push_back(c.middleCols(begin, count));
  out.frame_times.assign(frame_times.begin() + begin, frame_times.begin() + begin + count);
  return out;
}

template struct LogMelSpectrogramT<double>;
template struct LogMelSpectrogramT<float>;

Index FeatureConfig::frame_samples() const {
  return static_cast<Index>(std::llround(frame_ms * sample_rate / 1000.0));
}

Index FeatureConfig::hop_samples() const {
  return static_cast<Index>(std::llround(hop_ms * sample_rate / 1000.0));
}

int FeatureConfig::resolved_fft_size() const {
  if (fft_size > 0) return fft_size;
  int n = 1;
  while (n < frame_samples()) n <<= 1;
  return n;
}

Index FeatureConfig::frames_per_window(double window_ms) const {
  const auto window = static_cast<Index>(std::llround(window_ms * sample_rate / 1000.0));
  return frame_count(window, frame_samples(), hop_samples());
}

MelFilterbank FeatureConfig::make_filterbank() const {
  return build_mel_filterbank(mel_bins, f_min, resolved_f_max(), sample_rate, resolved_fft_size());
}

Index frame_count(Index length, Index frame_samples, Index hop_samples) {
  if (frame_samples <= 0 || hop_samples <= 0) throw ConfigError("frame and hop must be positive");
  if (length < frame_samples) return 0;
  return 1 + (length - frame_samples) / hop_samples;
}

Eigen::VectorXd hann_window(Index length) {
  Eigen::VectorXd w(length);
  for (Index i = 0; i < length; ++i) {
    w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) /
                                static_cast<double>(length));
  }
  return w;
}

FrameAnalyzer::FrameAnalyzer(const MelFilterbank& fb, Index frame_samples, double floor)
    : fb_(&fb), window_(hann_window(frame_samples)), floor_(floor), log_floor_(std::log(floor)) {
  if (!(floor > 0.0)) throw ConfigError("energy floor must be positive");
  if (frame_samples > fb.fft_size) throw ConfigError("frame longer than fft size");
  fft_.SetFlag(Eigen::FFT<double>::HalfSpectrum);
  time_.assign(static_cast<std::size_t>(fb.fft_size), 0.0);
  power_.resize(fb.fft_bins());
}

void FrameAnalyzer::analyze(const float* samples, Index stride, double* out) {
  const Index frame = window_.size();
  for (Index i = 0; i < frame; ++i) time_[i] = static_cast<double>(samples[i * stride]) * window_[i];
  fft_.fwd(freq_, time_);
  for (int k = 0; k < fb_->fft_bins(); ++k) power_[k] = std::norm(freq_[k]);
  energy_.noalias() = fb_->filters * power_;
  for (int m = 0; m < fb_->mel_bins(); ++m) out[m] = energy_[m] > floor_ ? std::log(energy_[m]) : log_floor_;
}

LogMelSpectrogram log_mel(const AudioBuffer& buffer, const MelFilterbank& fb, double frame_ms,
                          double hop_ms, double floor) {
  if (fb.sample_rate != buffer.sample_rate) {
    throw InputError("filterbank sample rate does not match audio sample rate");
  }
  if (!(floor > 0.0)) throw ConfigError("energy floor must be positive");
  const auto frame = static_cast<Index>(std::llround(frame_ms * buffer.sample_rate / 1000.0));
  const auto hop = static_cast<Index>(std::llround(hop_ms * buffer.sample_rate / 1000.0));
  if (frame > fb.fft_size) throw ConfigError("frame longer than fft size");
  const Index frames = frame_count(buffer.length(), frame, hop);
  if (frames == 0) throw InputError("audio buffer shorter than one analysis frame");

  FrameAnalyzer analyzer(fb, frame, floor);
  LogMelSpectrogram out;
  out.window_ms = frame_ms;
  out.hop_ms = hop_ms;
  out.frame_times.resize(frames);
  for (Index t = 0; t < frames; ++t) {
    out.frame_times[t] = static_cast<double>(t * hop) / buffer.sample_rate;
  }

  for (Index c = 0; c < buffer.channel_count(); ++c) {
    Eigen::MatrixXd values(fb.mel_bins(), frames);
    const float* channel = buffer.samples.col(c).data();
    for (Index t = 0; t < frames; ++t) analyzer.analyze(channel + t * hop, 1, values.col(t).data());
    out.channels.push_back(std::move(values));
  }
  return out;
}

NormStats compute_norm_stats(const std::vector<const LogMelSpectrogram*>& spectrograms) {
  if (spectrograms.empty()) throw InputError("cannot compute normalization stats of nothing");
  const Index n = spectrograms.front()->channel_count();
  const Index m = spectrograms.front()->mel_bins();
  Index count = 0;
  Eigen::MatrixXd sum = Eigen::MatrixXd::Zero(n, m);
  for (const auto* s : spectrograms) {
    if (s->channel_count() != n || s->mel_bins() != m) {
      throw InputError("inconsistent spectrogram shapes in normalization set");
    }
    for (Index c = 0; c < n; ++c) sum.row(c) += s->channels[c].rowwise().sum().transpose();
    count += s->time_frames();
  }
  if (count == 0) throw InputError("normalization set has no frames");
  NormStats stats;
  stats.mean = sum / static_cast<double>(count);

  Eigen::MatrixXd sq = Eigen::MatrixXd::Zero(n, m);
  for (const auto* s : spectrograms) {
    for (Index c = 0; c < n; ++c) {
      const Eigen::MatrixXd centered = s->channels[c].colwise() - stats.mean.row(c).transpose();
      sq.row(c) += centered.array().square().rowwise().sum().matrix().transpose();
    }
  }
  stats.variance = (sq / static_cast<double>(count)).cwiseMax(NormStats::kVarianceFloor);
  return stats;
}

NormStats compute_norm_stats(const std::vector<LogMelSpectrogram>& spectrograms) {
  std::vector<const LogMelSpectrogram*> ptrs;
  ptrs.reserve(spectrograms.size());
  for (const auto& s : spectrograms) ptrs.push_back(&s);
  return compute_norm_stats(ptrs);
}

namespace {

void check_shape(const LogMelSpectrogram& spec, const NormStats& stats) {
  if (spec.channel_count() != stats.mean.rows() || spec.mel_bins() != stats.mean.cols()) {
    throw InputError("spectrogram shape does not match normalization stats");
  }
}

}  // namespace

LogMelSpectrogram normalize(const LogMelSpectrogram& spec, const NormStats& stats) {
  check_shape(spec, stats);
  LogMelSpectrogram out = spec;
  for (Index c = 0; c < spec.channel_count(); ++c) {
    const Eigen::VectorXd mean = stats.mean.row(c).transpose();
    const Eigen::VectorXd sd = stats.variance.row(c).transpose().cwiseSqrt();
    for (Index t = 0; t < spec.time_frames(); ++t) {
      out.channels[c].col(t) = (spec.channels[c].col(t) - mean).cwiseQuotient(sd);
    }
  }
  return out;
}

LogMelSpectrogram denormalize(const LogMelSpectrogram& spec, const NormStats& stats) {
  check_shape(spec, stats);
  LogMelSpectrogram out = spec;
  for (Index c = 0; c < spec.channel_count(); ++c) {
    const Eigen::VectorXd mean = stats.mean.row(c).transpose();
    const Eigen::VectorXd sd = stats.variance.row(c).transpose().cwiseSqrt();
    for (Index t = 0; t < spec.time_frames(); ++t) {
      out.channels[c].col(t) = spec.channels[c].col(t).cwiseProduct(sd) + mean;
    }
  }
  return out;
}

}  // namespace aslip::dsp
