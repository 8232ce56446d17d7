#include <set>

#include "aslip/datapipe.hpp"
#include "aslip/error.hpp"
#include "doctest.h"

using namespace aslip;
using namespace aslip::data;
using Eigen::Vector2d;

namespace {

sim::TrialSpec trial_with_event(double duration, double t0, double len, double theta) {
  sim::TrialSpec t;
  t.trial_id = "dp";
  t.layout = sim::MicLayout::named("four");
  t.noise = sim::NoiseModel::for_state(sim::RobotState::OnStationary);
  t.duration = duration;
  t.seed = 17;
  t.synth.sensor_noise_rms = 0.002;
  if (len > 0) {
    sim::SlipEvent ev;
    ev.t0 = t0;
    ev.duration = len;
    ev.direction = theta;
    ev.speed = 30.0;
    ev.ramp = 0.0;
    t.events.push_back(ev);
  }
  return t;
}

std::vector<WindowSample> labeled(int slip, int no_slip) {
  std::vector<WindowSample> out;
  for (int i = 0; i < slip + no_slip; ++i) {
    WindowSample w;
    w.window_index = i;
    w.label.is_slip = i < slip;
    out.push_back(w);
  }
  return out;
}

}  // namespace

TEST_CASE("window count closed form") {
  CHECK(window_count(48000, 48000.0, 200.0, 50.0) == 17);
  CHECK(window_count(9600, 48000.0, 200.0, 50.0) == 1);
  CHECK(window_count(9599, 48000.0, 200.0, 50.0) == 0);
  for (long n = 9600; n < 200000; n += 4321) CHECK(window_count(n, 48000.0, 200.0, 50.0) == 1 + (n - 9600) / 2400);
}

TEST_CASE("slicing labels") {
  dsp::FeatureConfig fc;
  const auto fb = fc.make_filterbank();
  const auto stats = dsp::NormStats::identity(4, 64);

  SUBCASE("no slip anywhere") {
    const auto w = slice_windows(sim::synth_trial(trial_with_event(1.0, 0, 0, 0)), 200.0, 50.0, fb, stats);
    CHECK(w.size() == 17);
    for (const auto& s : w) CHECK_FALSE(s.label.is_slip);
  }
  SUBCASE("a constant-direction event") {
    const double theta = 0.7;
    const auto w = slice_windows(sim::synth_trial(trial_with_event(1.0, 0.2, 0.6, theta)), 200.0, 50.0, fb, stats);
    int full = 0;
    for (const auto& s : w) {
      CHECK(s.spectrogram.time_frames() == 18);
      if (!s.label.is_slip) continue;
      CHECK((s.label.d_star - Vector2d(std::cos(theta), std::sin(theta))).norm() < 1e-6);
      if (s.t_begin >= 0.2 - 1e-9 && s.t_begin + 0.2 <= 0.8 + 1e-9) {
        CHECK(s.label.magnitude() == doctest::Approx(6.0).epsilon(1e-9));
        ++full;
      }
    }
    CHECK(full == 9);
  }
}

TEST_CASE("window spectrograms equal featurizing the window alone") {
  dsp::FeatureConfig fc;
  const auto fb = fc.make_filterbank();
  const auto trial = sim::synth_trial(trial_with_event(1.0, 0.3, 0.4, 2.0));
  dsp::NormStats stats;
  stats.mean = Eigen::MatrixXd::Constant(4, 64, -9.0);
  stats.variance = Eigen::MatrixXd::Constant(4, 64, 6.25);
  const auto windows = slice_windows(trial, 200.0, 50.0, fb, stats);
  for (std::size_t j : {0u, 5u, 16u}) {
    dsp::AudioBuffer part{trial.audio.samples.middleRows(static_cast<Eigen::Index>(j) * 2400, 9600), 48000.0};
    const auto direct = dsp::normalize(dsp::log_mel(part, fb, fc), stats).cast<float>();
    for (int c = 0; c < 4; ++c) CHECK(direct.channels[c] == windows[j].spectrogram.channels[c]);
  }
}

TEST_CASE("rebalance") {
  SUBCASE("balanced input is unchanged") {
    const auto r = rebalance(labeled(100, 150), 2.0, RebalanceMode::Both, 1);
    CHECK(r.samples.size() == 250);
    CHECK(r.pos_weight == doctest::Approx(1.5));
  }
  SUBCASE("subsample") {
    const auto r = rebalance(labeled(100, 1000), 2.0, RebalanceMode::Subsample, 1);
    int slip = 0, none = 0;
    for (const auto& s : r.samples) (s.label.is_slip ? slip : none)++;
    CHECK(slip == 100);
    CHECK(none == 200);
    CHECK(r.pos_weight == 1.0);
    for (std::size_t i = 1; i < r.samples.size(); ++i) CHECK(r.samples[i].window_index > r.samples[i - 1].window_index);
  }
  SUBCASE("reweight") {
    const auto r = rebalance(labeled(100, 1000), 2.0, RebalanceMode::Reweight, 1);
    CHECK(r.samples.size() == 1100);
    CHECK(r.pos_weight == doctest::Approx(10.0));
  }
  SUBCASE("no slip windows pass through") {
    const auto r = rebalance(labeled(0, 30), 2.0, RebalanceMode::Both, 1);
    CHECK(r.samples.size() == 30);
    CHECK(r.no_slip_samples);
  }
  SUBCASE("seeded") {
    const auto a = rebalance(labeled(50, 900), 2.0, RebalanceMode::Subsample, 9);
    const auto b = rebalance(labeled(50, 900), 2.0, RebalanceMode::Subsample, 9);
    REQUIRE(a.samples.size() == b.samples.size());
    for (std::size_t i = 0; i < a.samples.size(); ++i) CHECK(a.samples[i].window_index == b.samples[i].window_index);
  }
}

TEST_CASE("augmentation") {
  WindowSpectrogram spec;
  for (int c = 0; c < 4; ++c) spec.channels.push_back(Eigen::MatrixXf::Constant(64, 18, 0.75f));
  const auto stats = dsp::NormStats::identity(4, 64);

  AugmentConfig none;
  none.time_masks = none.freq_masks = 0;
  none.gain_jitter_db = 0.0;
  auto a = spec;
  augment(a, none, stats, 3);
  for (int c = 0; c < 4; ++c) CHECK(a.channels[c] == spec.channels[c]);

  AugmentConfig masks;
  masks.gain_jitter_db = 0.0;
  auto b = spec, b2 = spec;
  augment(b, masks, stats, 5);
  augment(b2, masks, stats, 5);
  int zeros = 0;
  for (int c = 0; c < 4; ++c) {
    CHECK(b.channels[c] == b2.channels[c]);
    CHECK(((b.channels[c].array() == 0.0f) || (b.channels[c].array() == 0.75f)).all());
    zeros += static_cast<int>((b.channels[c].array() == 0.0f).count());
  }
  CHECK(zeros > 0);

  const AugmentConfig wide{1, 40, 0, 0, 0.0};
  CHECK_THROWS_AS(wide.validate(64, 18), ConfigError);
}

TEST_CASE("trial split") {
  const auto s = split_trials(20, 0.15, 4);
  CHECK(s.val.size() == 3);
  CHECK(s.train.size() == 17);
  std::set<std::size_t> all(s.train.begin(), s.train.end());
  all.insert(s.val.begin(), s.val.end());
  CHECK(all.size() == 20);
  const auto t = split_trials(20, 0.15, 4);
  CHECK(t.val == s.val);
  CHECK(split_trials(2, 0.01, 1).val.size() == 1);
  CHECK(split_trials(1, 0.5, 1).val.empty());
}

TEST_CASE("resized windows keep the slip-speed threshold") {
  const WindowConfig w;
  const auto short_w = w.resized(100.0);
  CHECK(short_w.window_ms == 100.0);
  CHECK(short_w.hop_ms == w.hop_ms);
  CHECK(short_w.epsilon == doctest::Approx(0.25));
  CHECK(w.resized(300.0).epsilon == doctest::Approx(0.75));
}
