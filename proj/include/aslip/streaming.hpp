#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "aslip/dsp.hpp"
#include "aslip/model.hpp"

// Sliding-window inference over a live or replayed multi-channel stream.
//
// Window j covers samples [j * hop, j * hop + window). Its event is produced
// once the last of those samples has arrived, from exactly those samples, with
// the same frame analysis and normalization as the batch path; a replayed trial
// therefore reproduces batch predictions bit for bit.

namespace aslip::stream {

enum class DropPolicy { DropOldest, Block };
DropPolicy drop_policy_from_string(const std::string& s);
std::string to_string(DropPolicy p);

struct StreamConfig {
  double window_ms = 200.0;
  double hop_ms = 50.0;
  int queue_capacity = 8;  // windows waiting for the consumer
  DropPolicy drop_policy = DropPolicy::Block;

  void validate() const;
};

struct EstimateEvent {
  long window_index = 0;
  double t_window_end = 0.0;  // s, stream time of the window's last sample
  model::SlipEstimate estimate;
  double latency_ms = 0.0;  // window complete -> estimate ready (includes queueing)
  double compute_ms = 0.0;  // featurize + forward pass only
  bool gap = false;         // window overlaps zero-filled missing samples

  /// "t p_slip v_x v_z latency_ms" plus a gap flag.
  std::string to_line() const;
};

/// One read from a source. `missing` marks samples the source failed to
/// deliver (underrun); they reach the pipeline as zeros.
struct Chunk {
  Eigen::MatrixXf samples;  // frames x channels
  bool missing = false;
};

class AudioSource {
 public:
  virtual ~AudioSource() = default;
  virtual int channels() const = 0;
  virtual double sample_rate() const = 0;
  /// Up to max_frames frames; std::nullopt at end of stream.
  virtual std::optional<Chunk> read(long max_frames) = 0;
};

/// Replays an in-memory buffer (e.g. a WAV file) in fixed-size reads.
class BufferSource : public AudioSource {
 public:
  explicit BufferSource(dsp::AudioBuffer buffer);
  int channels() const override { return static_cast<int>(buffer_.channel_count()); }
  double sample_rate() const override { return buffer_.sample_rate; }
  std::optional<Chunk> read(long max_frames) override;

 private:
  dsp::AudioBuffer buffer_;
  long position_ = 0;
};

std::unique_ptr<AudioSource> open_wav_source(const std::filesystem::path& path);

// Raw pipe: 16-byte header (magic "ASRW", u32 channels, u32 sample rate,
// u32 reserved = 0), then interleaved little-endian float32 frames.
inline constexpr char kRawMagic[4] = {'A', 'S', 'R', 'W'};

class RawPipeSource : public AudioSource {
 public:
  /// Reads and validates the header; the stream must outlive the source.
  explicit RawPipeSource(std::istream& in);
  int channels() const override { return channels_; }
  double sample_rate() const override { return sample_rate_; }
  std::optional<Chunk> read(long max_frames) override;

 private:
  std::istream& in_;
  int channels_ = 0;
  double sample_rate_ = 0.0;
};

void write_raw_header(std::ostream& out, int channels, std::uint32_t sample_rate);
void write_raw_frames(std::ostream& out, const Eigen::MatrixXf& samples);

/// Producer side: accumulates samples and cuts complete windows.
class WindowAssembler {
 public:
  struct Window {
    long index = 0;
    long start = 0;           // first sample
    Eigen::MatrixXf samples;  // window x channels
    bool gap = false;
    std::chrono::steady_clock::time_point ready;
  };

  WindowAssembler(int channels, long window_samples, long hop_samples);
  void push(const Eigen::MatrixXf& samples, bool missing = false);
  /// Next complete window, in order.
  std::optional<Window> next();
  long received() const { return received_; }

 private:
  int channels_;
  long window_, hop_;
  long received_ = 0;      // samples pushed so far
  long buffer_start_ = 0;  // stream index of buffer_ row 0
  Eigen::MatrixXf buffer_;
  long fill_ = 0;
  std::vector<std::pair<long, long>> gaps_;  // [begin, end) sample ranges
  long next_index_ = 0;
};

/// Consumer side: window samples -> normalized log-mel -> estimate.
class WindowInference {
 public:
  /// Throws ConfigError when the model does not fit the features/window.
  WindowInference(const model::SlipNet<float>& model, const dsp::FeatureConfig& features, double window_ms);
  model::SlipEstimate infer(const Eigen::MatrixXf& window_samples);
  long window_samples() const { return window_samples_; }

 private:
  const model::SlipNet<float>* model_;
  dsp::FeatureConfig features_;
  dsp::MelFilterbank fb_;
  dsp::FrameAnalyzer analyzer_;
  long window_samples_, frames_, frame_hop_;
  Eigen::VectorXd column_;
};

struct StreamStats {
  long events = 0;
  long dropped = 0;
  long gap_events = 0;
  double audio_seconds = 0.0;
  double wall_seconds = 0.0;
  double max_compute_ms = 0.0, mean_compute_ms = 0.0;
  double max_latency_ms = 0.0;

  double real_time_factor() const { return wall_seconds > 0.0 ? audio_seconds / wall_seconds : 0.0; }
};

/// Producer thread reads the source and cuts windows into a bounded queue; the
/// calling thread featurizes, infers and hands events to `sink` in time order.
/// Throws ConfigError at startup if the source does not match the model.
StreamStats run_stream(AudioSource& source, const model::SlipNet<float>& model, const dsp::FeatureConfig& features,
                       const StreamConfig& cfg, const std::function<void(const EstimateEvent&)>& sink,
                       long read_frames = 480);

/// Windows a stream of `samples` yields.
long expected_events(long samples, double sample_rate, const StreamConfig& cfg);

}  // namespace aslip::stream
