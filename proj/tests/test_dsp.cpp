#include <cmath>
#include <sstream>

#include "aslip/dsp.hpp"
#include "aslip/error.hpp"
#include "aslip/wav.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace aslip;
using namespace aslip::dsp;

namespace {

AudioBuffer sine(double hz, double seconds, double fs = 48000.0, double amplitude = 1.0) {
  const Index n = static_cast<Index>(std::lround(seconds * fs));
  AudioBuffer b = AudioBuffer::zeros(1, n, fs);
  for (Index i = 0; i < n; ++i) b.samples(i, 0) = static_cast<float>(amplitude * std::sin(2.0 * M_PI * hz * i / fs));
  return b;
}

}  // namespace

TEST_CASE("mel scale round trip") {
  for (double hz : {0.0, 20.0, 700.0, 1000.0, 8000.0, 24000.0}) CHECK(mel_to_hz(hz_to_mel(hz)) == doctest::Approx(hz).epsilon(1e-12));
  CHECK(hz_to_mel(700.0) == doctest::Approx(2595.0 * std::log10(2.0)));
}

TEST_CASE("filterbank structure") {
  FeatureConfig cfg;
  const auto fb = cfg.make_filterbank();
  CHECK(fb.mel_bins() == 64);
  CHECK(fb.fft_bins() == 2048 / 2 + 1);
  CHECK((fb.filters.array() >= 0.0).all());
  for (int m = 0; m < fb.mel_bins(); ++m) CHECK(fb.filters.row(m).maxCoeff() == doctest::Approx(1.0));
  for (int m = 1; m < fb.mel_bins(); ++m) CHECK(fb.center_hz(m) > fb.center_hz(m - 1));

  // every bin strictly between the first and last centers is covered
  const double bin_hz = fb.sample_rate / fb.fft_size;
  for (int k = 0; k < fb.fft_bins(); ++k) {
    const double f = k * bin_hz;
    if (f > fb.center_hz(0) && f < fb.center_hz(fb.mel_bins() - 1)) CHECK(fb.filters.col(k).sum() > 0.0);
  }
}

TEST_CASE("two-bin filterbank partitions the band") {
  const auto fb = build_mel_filterbank(2, 0.0, 24000.0, 48000.0, 1024);
  CHECK(fb.mel_bins() == 2);
  CHECK((fb.filters.array() >= 0.0).all());
  CHECK(fb.filters.row(0).maxCoeff() == doctest::Approx(1.0));
  CHECK(fb.filters.row(1).maxCoeff() == doctest::Approx(1.0));
}

TEST_CASE("filter centers match the closed-form mel formula") {
  const auto fb = build_mel_filterbank(64, 20.0, 24000.0, 48000.0, 1024);
  const auto ref = oracle::mel_centers(64, 20.0L, 24000.0L);
  for (int m = 0; m < 64; ++m) CHECK(std::abs(fb.center_hz(m) - static_cast<double>(ref[m])) < 1e-9);
}

TEST_CASE("filterbank rejects bad ranges") {
  CHECK_THROWS_AS(build_mel_filterbank(64, 500.0, 100.0, 48000.0, 2048), ConfigError);
  CHECK_THROWS_AS(build_mel_filterbank(64, 20.0, 30000.0, 48000.0, 2048), ConfigError);
  CHECK_THROWS_AS(build_mel_filterbank(64, -1.0, 1000.0, 48000.0, 2048), ConfigError);
}

TEST_CASE("frame arithmetic") {
  FeatureConfig cfg;
  CHECK(cfg.frame_samples() == 1200);
  CHECK(cfg.hop_samples() == 480);
  CHECK(cfg.resolved_fft_size() == 2048);
  CHECK(cfg.frames_per_window(200.0) == 18);
  CHECK(cfg.frames_per_window(100.0) == 8);
  CHECK(cfg.frames_per_window(300.0) == 28);
  CHECK(frame_count(1199, 1200, 480) == 0);
  CHECK(frame_count(1200, 1200, 480) == 1);
  for (Index len = 1200; len < 20000; len += 137) CHECK(frame_count(len, 1200, 480) == 1 + (len - 1200) / 480);
}

TEST_CASE("periodic hann") {
  const auto w = hann_window(8);
  CHECK(w(0) == doctest::Approx(0.0));
  CHECK(w(4) == doctest::Approx(1.0));
  CHECK(w(2) == doctest::Approx(0.5));
  CHECK(w(6) == doctest::Approx(0.5));
}

TEST_CASE("silence maps to the log floor") {
  FeatureConfig cfg;
  const auto fb = cfg.make_filterbank();
  const auto spec = log_mel(AudioBuffer::zeros(2, 9600, 48000.0), fb, cfg);
  REQUIRE(spec.channel_count() == 2);
  CHECK(spec.mel_bins() == 64);
  CHECK(spec.time_frames() == 18);
  for (const auto& c : spec.channels) CHECK((c.array() == std::log(1e-10)).all());
}

TEST_CASE("short buffer is an input error") {
  FeatureConfig cfg;
  const auto fb = cfg.make_filterbank();
  CHECK_THROWS_AS(log_mel(AudioBuffer::zeros(1, 1000, 48000.0), fb, cfg), InputError);
}

TEST_CASE("sine at a mel center peaks in that bin") {
  FeatureConfig cfg;
  const auto fb = cfg.make_filterbank();
  for (int m : {10, 30, 50}) {
    const auto spec = log_mel(sine(fb.center_hz(m), 0.2), fb, cfg);
    for (Index t = 0; t < spec.time_frames(); ++t) {
      Index arg = 0;
      spec.channels[0].col(t).maxCoeff(&arg);
      CHECK(arg == m);
    }
  }
}

TEST_CASE("log_mel matches the direct DFT oracle") {
  FeatureConfig cfg;
  const auto fb = cfg.make_filterbank();
  for (int seed = 0; seed < 3; ++seed) {
    const auto buf = oracle::random_buffer(1 + seed, 0.06, 48000.0, 100 + seed);
    const auto spec = log_mel(buf, fb, cfg);
    const auto ref = oracle::log_mel_direct(buf, 64, 20.0, 24000.0, 25.0, 10.0, 1e-10, 2048);
    REQUIRE(ref.size() == spec.channels.size());
    for (std::size_t c = 0; c < ref.size(); ++c) CHECK((spec.channels[c] - ref[c]).cwiseAbs().maxCoeff() < 1e-9);
  }
}

TEST_CASE("gain covariance") {
  FeatureConfig cfg;
  const auto fb = cfg.make_filterbank();
  auto buf = oracle::random_buffer(1, 0.1, 48000.0, 5);
  const auto a = log_mel(buf, fb, cfg);
  buf.samples *= 0.5f;  // exact in float
  const auto b = log_mel(buf, fb, cfg);
  CHECK(((a.channels[0] - b.channels[0]).array() - 2.0 * std::log(2.0)).abs().maxCoeff() < 1e-9);
}

TEST_CASE("frame analyzer reproduces batch columns") {
  FeatureConfig cfg;
  const auto fb = cfg.make_filterbank();
  const auto buf = oracle::random_buffer(2, 0.2, 48000.0, 9);
  const auto spec = log_mel(buf, fb, cfg);
  FrameAnalyzer fa(fb, cfg.frame_samples(), cfg.energy_floor);
  Eigen::VectorXd col(64);
  for (Index c = 0; c < 2; ++c)
    for (Index t = 0; t < spec.time_frames(); ++t) {
      fa.analyze(buf.samples.data() + c * buf.length() + t * cfg.hop_samples(), 1, col.data());
      CHECK(col == spec.channels[c].col(t));
    }
}

TEST_CASE("normalization statistics") {
  LogMelSpectrogram a, b;
  a.channels = {Eigen::MatrixXd::Constant(3, 4, 2.0)};
  b.channels = {Eigen::MatrixXd::Constant(3, 4, 6.0)};

  SUBCASE("constant input has floored variance") {
    const auto s = compute_norm_stats(std::vector<LogMelSpectrogram>{a});
    CHECK((s.mean.array() == 2.0).all());
    CHECK((s.variance.array() == NormStats::kVarianceFloor).all());
  }
  SUBCASE("two-point statistics") {
    const auto s = compute_norm_stats(std::vector<LogMelSpectrogram>{a, b});
    CHECK((s.mean.array() - 4.0).abs().maxCoeff() < 1e-12);
    CHECK((s.variance.array() - 4.0).abs().maxCoeff() < 1e-12);
  }
  SUBCASE("pooled equals concatenated") {
    LogMelSpectrogram cat;
    cat.channels = {Eigen::MatrixXd(3, 8)};
    cat.channels[0] << a.channels[0], b.channels[0];
    const auto s1 = compute_norm_stats(std::vector<LogMelSpectrogram>{a, b});
    const auto s2 = compute_norm_stats(std::vector<LogMelSpectrogram>{cat});
    CHECK((s1.mean - s2.mean).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((s1.variance - s2.variance).cwiseAbs().maxCoeff() < 1e-12);
  }
  CHECK_THROWS_AS(compute_norm_stats(std::vector<LogMelSpectrogram>{}), InputError);
}

TEST_CASE("normalize is an affine bijection") {
  FeatureConfig cfg;
  const auto fb = cfg.make_filterbank();
  std::vector<LogMelSpectrogram> set;
  for (int s = 0; s < 4; ++s) set.push_back(log_mel(oracle::random_buffer(2, 0.2, 48000.0, 40 + s), fb, cfg));
  const auto stats = compute_norm_stats(set);

  std::vector<LogMelSpectrogram> normed;
  for (const auto& x : set) normed.push_back(normalize(x, stats));
  const auto check = compute_norm_stats(normed);
  CHECK(check.mean.cwiseAbs().maxCoeff() < 1e-6);
  CHECK((check.variance.array() - 1.0).abs().maxCoeff() < 1e-4);

  const auto back = denormalize(normed[0], stats);
  for (std::size_t c = 0; c < back.channels.size(); ++c)
    CHECK((back.channels[c] - set[0].channels[c]).cwiseAbs().maxCoeff() < 1e-9);

  const auto id = normalize(set[0], NormStats::identity(2, 64));
  CHECK(id.channels[1] == set[0].channels[1]);

  CHECK_THROWS_AS(normalize(set[0], NormStats::identity(4, 64)), InputError);
}

TEST_CASE("float wav round trip is bit exact") {
  auto buf = oracle::random_buffer(4, 0.05, 48000.0, 77);
  std::stringstream ss;
  write_wav(ss, buf);
  const auto back = read_wav(ss);
  CHECK(back.sample_rate == 48000.0);
  CHECK(back.samples == buf.samples);
}

TEST_CASE("wav reader rejects garbage") {
  std::stringstream ss("RIFF....WAVEjunk");
  CHECK_THROWS(read_wav(ss));
}
