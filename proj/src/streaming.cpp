#include "aslip/streaming.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <condition_variable>
#include <cstring>
#include <deque>
#include <exception>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include "aslip/error.hpp"
#include "aslip/wav.hpp"

namespace aslip::stream {

static_assert(std::endian::native == std::endian::little, "raw pipe I/O assumes a little-endian host");

using Clock = std::chrono::steady_clock;

namespace {

long to_samples(double ms, double fs) { return std::lround(ms * fs / 1000.0); }

double ms_between(Clock::time_point a, Clock::time_point b) {
  return std::chrono::duration<double, std::milli>(b - a).count();
}

}  // namespace

DropPolicy drop_policy_from_string(const std::string& s) {
  if (s == "drop-oldest" || s == "drop_oldest") return DropPolicy::DropOldest;
  if (s == "block") return DropPolicy::Block;
  throw ConfigError("unknown drop policy '" + s + "' (drop-oldest|block)");
}

std::string to_string(DropPolicy p) { return p == DropPolicy::DropOldest ? "drop-oldest" : "block"; }

void StreamConfig::validate() const {
  if (!(window_ms > 0.0) || !(hop_ms > 0.0)) throw ConfigError("stream window and hop must be positive");
  if (hop_ms > window_ms) throw ConfigError("stream hop must not exceed the window");
  if (queue_capacity < 1) throw ConfigError("queue capacity must be at least 1");
}

std::string EstimateEvent::to_line() const {
  std::ostringstream os;
  os.precision(9);
  os << t_window_end << ' ' << estimate.p_slip << ' ' << estimate.vector.x() << ' ' << estimate.vector.y() << ' ';
  os.precision(4);
  os << std::fixed << latency_ms << (gap ? " gap" : "");
  return os.str();
}

long expected_events(long samples, double sample_rate, const StreamConfig& cfg) {
  cfg.validate();
  const long w = to_samples(cfg.window_ms, sample_rate), h = to_samples(cfg.hop_ms, sample_rate);
  return samples < w ? 0 : 1 + (samples - w) / h;
}

// ---------------------------------------------------------------------------
// Sources

BufferSource::BufferSource(dsp::AudioBuffer buffer) : buffer_(std::move(buffer)) {}

std::optional<Chunk> BufferSource::read(long max_frames) {
  if (max_frames < 1) throw UsageError("read size must be positive");
  const long left = static_cast<long>(buffer_.length()) - position_;
  if (left <= 0) return std::nullopt;
  const long n = std::min(left, max_frames);
  Chunk c{buffer_.samples.middleRows(position_, n), false};
  position_ += n;
  return c;
}

std::unique_ptr<AudioSource> open_wav_source(const std::filesystem::path& path) {
  return std::make_unique<BufferSource>(dsp::read_wav(path));
}

RawPipeSource::RawPipeSource(std::istream& in) : in_(in) {
  char header[16];
  in_.read(header, 16);
  if (!in_) throw FormatError("raw stream ended inside its 16-byte header");
  if (std::memcmp(header, kRawMagic, 4) != 0) throw FormatError("raw stream has a bad magic (expected ASRW)");
  std::uint32_t ch = 0, fs = 0;
  std::memcpy(&ch, header + 4, 4);
  std::memcpy(&fs, header + 8, 4);
  if (ch < 1 || ch > 64) throw FormatError("raw stream declares " + std::to_string(ch) + " channels");
  if (fs < 1000) throw FormatError("raw stream declares an implausible sample rate");
  channels_ = static_cast<int>(ch);
  sample_rate_ = fs;
}

std::optional<Chunk> RawPipeSource::read(long max_frames) {
  if (max_frames < 1) throw UsageError("read size must be positive");
  std::vector<float> buf(static_cast<std::size_t>(max_frames * channels_));
  in_.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
  const auto got = static_cast<long>(in_.gcount()) / static_cast<long>(sizeof(float) * channels_);
  if (got == 0) return std::nullopt;  // a trailing partial frame is discarded
  Chunk c;
  c.samples.resize(got, channels_);
  for (long i = 0; i < got; ++i) {
    for (int k = 0; k < channels_; ++k) c.samples(i, k) = buf[static_cast<std::size_t>(i * channels_ + k)];
  }
  return c;
}

void write_raw_header(std::ostream& out, int channels, std::uint32_t sample_rate) {
  const auto ch = static_cast<std::uint32_t>(channels);
  const std::uint32_t reserved = 0;
  out.write(kRawMagic, 4);
  out.write(reinterpret_cast<const char*>(&ch), 4);
  out.write(reinterpret_cast<const char*>(&sample_rate), 4);
  out.write(reinterpret_cast<const char*>(&reserved), 4);
}

void write_raw_frames(std::ostream& out, const Eigen::MatrixXf& samples) {
  const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> interleaved = samples;
  out.write(reinterpret_cast<const char*>(interleaved.data()),
            static_cast<std::streamsize>(interleaved.size() * sizeof(float)));
}

// ---------------------------------------------------------------------------
// Windowing

WindowAssembler::WindowAssembler(int channels, long window_samples, long hop_samples)
    : channels_(channels), window_(window_samples), hop_(hop_samples) {
  if (channels < 1 || window_samples < 1 || hop_samples < 1 || hop_samples > window_samples)
    throw ConfigError("bad window assembler geometry");
  buffer_.resize(2 * window_, channels_);
}

void WindowAssembler::push(const Eigen::MatrixXf& samples, bool missing) {
  if (samples.cols() != channels_) throw InputError("chunk channel count does not match the stream");
  const long n = samples.rows();
  if (n == 0) return;
  if (fill_ + n > buffer_.rows()) {
    // Drop everything before the next window's first sample, then grow if needed.
    const long keep_from = std::clamp(next_index_ * hop_ - buffer_start_, 0L, fill_);
    const long kept = fill_ - keep_from;
    if (kept > 0) {
      Eigen::MatrixXf tail = buffer_.middleRows(keep_from, kept);
      if (kept + n > buffer_.rows()) buffer_.resize(std::max(2 * buffer_.rows(), kept + n), channels_);
      buffer_.topRows(kept) = tail;
    } else if (n > buffer_.rows()) {
      buffer_.resize(n + window_, channels_);
    }
    buffer_start_ += keep_from;
    fill_ = kept;
  }
  if (missing) {
    buffer_.middleRows(fill_, n).setZero();
    gaps_.emplace_back(received_, received_ + n);
  } else {
    buffer_.middleRows(fill_, n) = samples;
  }
  fill_ += n;
  received_ += n;
}

std::optional<WindowAssembler::Window> WindowAssembler::next() {
  const long start = next_index_ * hop_;
  if (received_ < start + window_) return std::nullopt;
  Window w;
  w.index = next_index_;
  w.start = start;
  w.samples = buffer_.middleRows(start - buffer_start_, window_);
  w.ready = Clock::now();
  for (const auto& [b, e] : gaps_) {
    if (b < start + window_ && e > start) w.gap = true;
  }
  ++next_index_;
  const long keep = next_index_ * hop_;
  std::erase_if(gaps_, [keep](const auto& g) { return g.second <= keep; });
  return w;
}

WindowInference::WindowInference(const model::SlipNet<float>& model, const dsp::FeatureConfig& features,
                                 double window_ms)
    : model_(&model),
      features_(features),
      fb_(features.make_filterbank()),
      analyzer_(fb_, features.frame_samples(), features.energy_floor),
      window_samples_(to_samples(window_ms, features.sample_rate)),
      frames_(features.frames_per_window(window_ms)),
      frame_hop_(features.hop_samples()) {
  const auto& mc = model.config();
  if (mc.mel_bins != features.mel_bins) throw ConfigError("model mel bins do not match the front end");
  if (mc.time_frames != frames_)
    throw ConfigError("model expects " + std::to_string(mc.time_frames) + " frames but a " +
                      std::to_string(window_ms) + " ms window has " + std::to_string(frames_));
  const auto& ns = model.norm_stats;
  if (ns.mean.rows() != mc.channel_count || ns.mean.cols() != mc.mel_bins)
    throw ConfigError("model normalization statistics do not match its config");
  column_.resize(features.mel_bins);
}

model::SlipEstimate WindowInference::infer(const Eigen::MatrixXf& window_samples) {
  const auto& mc = model_->config();
  if (window_samples.rows() != window_samples_ || window_samples.cols() != mc.channel_count)
    throw InputError("window has the wrong shape for this model");
  const long m = features_.mel_bins, t = frames_;
  ag::Tensor<float> x(ag::Shape{1, mc.channel_count, m, t});
  float* dst = x.values.data();
  const auto& ns = model_->norm_stats;
  for (int c = 0; c < mc.channel_count; ++c) {
    const Eigen::VectorXd mean = ns.mean.row(c).transpose();
    const Eigen::VectorXd sd = ns.variance.row(c).transpose().cwiseSqrt();
    const float* channel = window_samples.col(c).data();
    for (long j = 0; j < t; ++j) {
      analyzer_.analyze(channel + j * frame_hop_, 1, column_.data());
      const Eigen::VectorXd z = (column_ - mean).cwiseQuotient(sd);
      for (long i = 0; i < m; ++i) dst[i * t + j] = static_cast<float>(z[i]);
    }
    dst += m * t;
  }
  return model_->predict_normalized(x);
}

// ---------------------------------------------------------------------------

StreamStats run_stream(AudioSource& source, const model::SlipNet<float>& model, const dsp::FeatureConfig& features,
                       const StreamConfig& cfg, const std::function<void(const EstimateEvent&)>& sink,
                       long read_frames) {
  cfg.validate();
  if (read_frames < 1) throw UsageError("read size must be positive");
  if (std::abs(source.sample_rate() - features.sample_rate) > 1e-9)
    throw ConfigError("source sample rate " + std::to_string(source.sample_rate()) + " Hz does not match the model's " +
                      std::to_string(features.sample_rate) + " Hz");
  if (source.channels() != model.config().channel_count)
    throw ConfigError("source has " + std::to_string(source.channels()) + " channels, model expects " +
                      std::to_string(model.config().channel_count));
  const double fs = features.sample_rate;
  const long hop = to_samples(cfg.hop_ms, fs);
  if (hop % features.hop_samples() != 0) throw ConfigError("stream hop must be a multiple of the frame hop");
  WindowInference inference(model, features, cfg.window_ms);
  WindowAssembler assembler(source.channels(), inference.window_samples(), hop);

  std::mutex mu;
  std::condition_variable not_empty, not_full;
  std::deque<WindowAssembler::Window> queue;
  bool done = false, stop = false;
  long dropped = 0, samples = 0;
  std::exception_ptr producer_error;

  const auto started = Clock::now();
  std::thread producer([&] {
    try {
      while (true) {
        auto chunk = source.read(read_frames);
        if (!chunk) break;
        assembler.push(chunk->samples, chunk->missing);
        while (auto w = assembler.next()) {
          std::unique_lock lock(mu);
          if (cfg.drop_policy == DropPolicy::Block) {
            not_full.wait(lock, [&] { return stop || static_cast<int>(queue.size()) < cfg.queue_capacity; });
          } else if (static_cast<int>(queue.size()) >= cfg.queue_capacity) {
            queue.pop_front();
            ++dropped;
          }
          if (stop) return;
          queue.push_back(std::move(*w));
          not_empty.notify_one();
        }
      }
    } catch (...) {
      std::lock_guard lock(mu);
      producer_error = std::current_exception();
    }
    std::lock_guard lock(mu);
    samples = assembler.received();
    done = true;
    not_empty.notify_one();
  });

  StreamStats stats;
  double compute_total = 0.0;
  try {
    while (true) {
      WindowAssembler::Window w;
      {
        std::unique_lock lock(mu);
        not_empty.wait(lock, [&] { return done || !queue.empty(); });
        if (queue.empty()) break;
        w = std::move(queue.front());
        queue.pop_front();
        not_full.notify_one();
      }
      const auto t0 = Clock::now();
      EstimateEvent ev;
      ev.window_index = w.index;
      ev.t_window_end = static_cast<double>(w.start + inference.window_samples()) / fs;
      ev.estimate = inference.infer(w.samples);
      const auto t1 = Clock::now();
      ev.compute_ms = ms_between(t0, t1);
      ev.latency_ms = ms_between(w.ready, t1);
      ev.gap = w.gap;
      ++stats.events;
      if (ev.gap) ++stats.gap_events;
      compute_total += ev.compute_ms;
      stats.max_compute_ms = std::max(stats.max_compute_ms, ev.compute_ms);
      stats.max_latency_ms = std::max(stats.max_latency_ms, ev.latency_ms);
      if (sink) sink(ev);
    }
  } catch (...) {
    {
      std::lock_guard lock(mu);
      stop = true;
    }
    not_full.notify_all();
    producer.join();
    throw;
  }
  producer.join();
  if (producer_error) std::rethrow_exception(producer_error);
  stats.wall_seconds = std::chrono::duration<double>(Clock::now() - started).count();
  stats.dropped = dropped;
  stats.audio_seconds = static_cast<double>(samples) / fs;
  stats.mean_compute_ms = stats.events > 0 ? compute_total / static_cast<double>(stats.events) : 0.0;
  return stats;
}

}  // namespace aslip::stream
