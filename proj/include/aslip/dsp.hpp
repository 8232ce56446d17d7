#pragma once

#include <Eigen/Dense>

#include <complex>
#include <vector>

#include <unsupported/Eigen/FFT>

namespace aslip::dsp {

using Eigen::Index;

/// Synchronized multi-channel audio. One column per microphone; samples are
/// stored at 32-bit precision, exactly as they appear in a float WAV file.
struct AudioBuffer {
  Eigen::MatrixXf samples;  // length x channel_count
  double sample_rate = 48000.0;

  Index channel_count() const { return samples.cols(); }
  Index length() const { return samples.rows(); }
  double duration() const { return static_cast<double>(length()) / sample_rate; }

  static AudioBuffer zeros(Index channels, Index length, double sample_rate) {
    return AudioBuffer{Eigen::MatrixXf::Zero(length, channels), sample_rate};
  }
};

double hz_to_mel(double hz);
double mel_to_hz(double mel);

/// Triangular filters over the one-sided power spectrum, peak-normalized to 1.
struct MelFilterbank {
  Eigen::MatrixXd filters;    // mel_bins x (fft_size/2 + 1)
  Eigen::VectorXd center_hz;  // mel_bins
  double f_min = 0.0;
  double f_max = 0.0;
  double sample_rate = 0.0;
  int fft_size = 0;

  int mel_bins() const { return static_cast<int>(filters.rows()); }
  int fft_bins() const { return static_cast<int>(filters.cols()); }
};

MelFilterbank build_mel_filterbank(int mel_bins, double f_min, double f_max, double sample_rate,
                                   int fft_size);

/// n x M x T log-energy tensor; one M x T matrix per channel.
template <typename Scalar>
struct LogMelSpectrogramT {
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

  std::vector<Matrix> channels;
  double window_ms = 0.0;  // analysis frame length
  double hop_ms = 0.0;
  std::vector<double> frame_times;  // frame start, seconds

  Index channel_count() const { return static_cast<Index>(channels.size()); }
  Index mel_bins() const { return channels.empty() ? 0 : channels.front().rows(); }
  Index time_frames() const { return channels.empty() ? 0 : channels.front().cols(); }

  template <typename Other>
  LogMelSpectrogramT<Other> cast() const {
    LogMelSpectrogramT<Other> out;
    out.channels.reserve(channels.size());
    for (const auto& c : channels) out.channels.push_back(c.template cast<Other>());
    out.window_ms = window_ms;
    out.hop_ms = hop_ms;
    out.frame_times = frame_times;
    return out;
  }

  /// Frames [begin, begin + count) of every channel.
  LogMelSpectrogramT slice_frames(Index begin, Index count) const;
};

using LogMelSpectrogram = LogMelSpectrogramT<double>;

extern template struct LogMelSpectrogramT<double>;
extern template struct LogMelSpectrogramT<float>;

/// Per-(channel, mel-bin) standardization statistics.
struct NormStats {
  Eigen::MatrixXd mean;      // channels x mel_bins
  Eigen::MatrixXd variance;  // channels x mel_bins, floored

  static constexpr double kVarianceFloor = 1e-8;

  static NormStats identity(Index channels, Index mel_bins) {
    return NormStats{Eigen::MatrixXd::Zero(channels, mel_bins),
                     Eigen::MatrixXd::Ones(channels, mel_bins)};
  }
};

/// Front-end settings. fft_size = 0 selects the next power of two >= frame length.
struct FeatureConfig {
  double sample_rate = 48000.0;
  int mel_bins = 64;
  double f_min = 20.0;
  double f_max = 0.0;  // 0 selects Nyquist
  double frame_ms = 25.0;
  double hop_ms = 10.0;
  double energy_floor = 1e-10;
  int fft_size = 0;

  Index frame_samples() const;
  Index hop_samples() const;
  int resolved_fft_size() const;
  double resolved_f_max() const { return f_max > 0.0 ? f_max : sample_rate / 2.0; }
  /// Frames in an analysis window of the given length.
  Index frames_per_window(double window_ms) const;
  MelFilterbank make_filterbank() const;
};

/// 1 + floor((length - frame) / hop), or 0 when the buffer is shorter than a frame.
Index frame_count(Index length, Index frame_samples, Index hop_samples);

/// Periodic Hann window.
Eigen::VectorXd hann_window(Index length);

/// Log-mel column of a single frame. Shared by batch and streaming featurization
/// so both produce identical bits. Not thread-safe (owns scratch buffers).
class FrameAnalyzer {
 public:
  FrameAnalyzer(const MelFilterbank& fb, Index frame_samples, double floor);
  /// Reads frame_samples values at samples[i * stride]; writes mel_bins values.
  void analyze(const float* samples, Index stride, double* out);
  Index frame_samples() const { return window_.size(); }

 private:
  const MelFilterbank* fb_;
  Eigen::VectorXd window_;
  double floor_, log_floor_;
  Eigen::FFT<double> fft_;
  std::vector<double> time_;
  std::vector<std::complex<double>> freq_;
  Eigen::VectorXd power_, energy_;
};

LogMelSpectrogram log_mel(const AudioBuffer& buffer, const MelFilterbank& fb, double frame_ms,
                          double hop_ms, double floor);

inline LogMelSpectrogram log_mel(const AudioBuffer& buffer, const MelFilterbank& fb,
                                 const FeatureConfig& cfg) {
  return log_mel(buffer, fb, cfg.frame_ms, cfg.hop_ms, cfg.energy_floor);
}

/// Pooled moments over every frame of every input.
NormStats compute_norm_stats(const std::vector<const LogMelSpectrogram*>& spectrograms);
NormStats compute_norm_stats(const std::vector<LogMelSpectrogram>& spectrograms);

LogMelSpectrogram normalize(const LogMelSpectrogram& spec, const NormStats& stats);
LogMelSpectrogram denormalize(const LogMelSpectrogram& spec, const NormStats& stats);

}  // namespace aslip::dsp
