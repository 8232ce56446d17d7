#include <cmath>
#include <filesystem>

#include "aslip/error.hpp"
#include "aslip/simulator.hpp"
#include "doctest.h"

using namespace aslip;
using namespace aslip::sim;
namespace fs = std::filesystem;

namespace {

TrialSpec quiet_trial(double duration = 1.0) {
  TrialSpec t;
  t.trial_id = "t";
  t.layout = MicLayout::named("four");
  t.noise = NoiseModel::for_state(RobotState::Off);
  t.duration = duration;
  t.seed = 42;
  return t;
}

Eigen::VectorXd energies_for(const Vector2d& u, const MicLayout& layout, double alpha) {
  Eigen::VectorXd e(layout.size());
  for (int i = 0; i < layout.size(); ++i) e(i) = std::pow(channel_gain(u, layout.positions[i], alpha), 2);
  return e;
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("aslip_test_" + name);
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST_CASE("channel gain") {
  const Vector2d mic(10, 10);
  const Vector2d along = mic.normalized();
  CHECK(channel_gain(along, mic, 0.0) == 1.0);
  CHECK(channel_gain(along, mic, 0.5) == doctest::Approx(1.5));
  CHECK(channel_gain(-along, mic, 0.5) == doctest::Approx(0.5));
  for (double a : {0.0, 1.0, 2.5}) CHECK(channel_gain(Vector2d(std::cos(a), std::sin(a)), Vector2d::Zero(), 0.5) == 1.0);
}

TEST_CASE("layouts") {
  for (const auto& n : MicLayout::names()) CHECK(MicLayout::named(n).name == n);
  CHECK(MicLayout::named("four").size() == 4);
  CHECK(MicLayout::named("single").size() == 1);
  CHECK_THROWS_AS(MicLayout::named("five"), ConfigError);
}

TEST_CASE("oracle direction inverts the gain model") {
  const auto four = MicLayout::named("four");
  for (double deg = 0; deg < 360; deg += 15) {
    const Vector2d u(std::cos(deg * M_PI / 180), std::sin(deg * M_PI / 180));
    const Vector2d got = oracle_direction(energies_for(u, four, 0.5) * 3.7, four, 0.5);
    CHECK((got - u).norm() < 1e-6);
  }
  CHECK_THROWS_AS(oracle_direction(Eigen::VectorXd::Ones(4), four, 0.5), AmbiguityError);
  const auto same = MicLayout::named("two_same_finger");
  CHECK_THROWS_AS(oracle_direction(energies_for(Vector2d(1, 0), same, 0.5), same, 0.5), AmbiguityError);
  const auto single = MicLayout::named("single");
  CHECK_THROWS_AS(oracle_direction(Eigen::VectorXd::Ones(1), single, 0.5), AmbiguityError);
}

TEST_CASE("silent trial") {
  const auto trial = synth_trial(quiet_trial());
  CHECK(trial.audio.channel_count() == 4);
  CHECK(trial.audio.length() == 48000);
  CHECK(trial.audio.samples.isZero());
  CHECK(trial.track.total().isZero());
}

TEST_CASE("constant-speed event integrates to its length") {
  auto spec = quiet_trial();
  SlipEvent ev;
  ev.t0 = 0.3;
  ev.duration = 0.2;
  ev.speed = 50.0;
  ev.ramp = 0.0;
  spec.events.push_back(ev);
  const auto trial = synth_trial(spec);
  CHECK((trial.track.total() - Vector2d(10.0, 0.0)).norm() < 1e-6);
  CHECK(trial.track.displacement(0.3, 0.2).x() == doctest::Approx(10.0).epsilon(1e-9));
  CHECK(trial.audio.samples.cwiseAbs().maxCoeff() > 0.0f);
}

TEST_CASE("synthesis is seeded") {
  auto spec = quiet_trial();
  spec.noise = NoiseModel::for_state(RobotState::OnMoving);
  SlipEvent ev;
  ev.t0 = 0.2;
  ev.duration = 0.5;
  ev.speed = 30.0;
  ev.direction = 1.0;
  ev.direction_wobble = 0.5;
  ev.seed = 3;
  spec.events.push_back(ev);
  spec.knocks.push_back({0.8, 2.0, 0.3});
  spec.rubs.push_back({0.05, 0.05, 20.0, 2.0});
  const auto a = synth_trial(spec);
  const auto b = synth_trial(spec);
  CHECK(a.audio.samples == b.audio.samples);
  CHECK(a.track.increments == b.track.increments);
  spec.seed = 43;
  CHECK(synth_trial(spec).audio.samples != a.audio.samples);
}

TEST_CASE("rubs and knocks sound but do not move") {
  auto spec = quiet_trial();
  spec.rubs.push_back({0.2, 0.06, 30.0, 0.0});
  spec.knocks.push_back({0.6, 3.0, 1.0});
  const auto t = synth_trial(spec);
  CHECK(t.track.total().isZero());
  CHECK(t.audio.samples.cwiseAbs().maxCoeff() > 0.0f);
}

TEST_CASE("invalid configurations") {
  SynthConfig cfg;
  cfg.sample_rate = 8000.0;
  auto spec = quiet_trial();
  spec.synth = cfg;
  spec.surface_profile_id = 5;
  CHECK_THROWS_AS(synth_trial(spec), ConfigError);

  spec = quiet_trial();
  SlipEvent ev;
  ev.t0 = 0.9;
  ev.duration = 0.5;
  ev.speed = 10.0;
  spec.events.push_back(ev);
  CHECK_THROWS_AS(synth_trial(spec), ConfigError);
  CHECK_THROWS_AS(robot_state_from_string("loud"), ConfigError);
}

TEST_CASE("surface profiles stay below Nyquist") {
  for (int id = 0; id < kSurfaceProfiles; ++id) CHECK(surface_profile(id).center_hz < 24000.0);
  CHECK_THROWS_AS(surface_profile(kSurfaceProfiles), ConfigError);
}

TEST_CASE("pretrain directions cover the circle") {
  const auto plans = plan_dataset(DatasetSpec::pretrain_default());
  std::array<int, 8> bins{};
  int total = 0;
  for (const auto& p : plans) {
    const auto track = p.slip_track();
    for (double t = 0.0; t + 0.2 <= p.duration + 1e-9; t += 0.05) {
      const Vector2d d = track.displacement(t, 0.2);
      if (d.norm() <= 0.5) continue;
      double a = std::atan2(d.y(), d.x());
      if (a < 0) a += 2 * M_PI;
      ++bins[static_cast<std::size_t>(a / (M_PI / 4)) % 8];
      ++total;
    }
  }
  CHECK(total >= 2000);
  for (int b : bins) {
    CHECK(b > 0.7 * total / 8.0);
    CHECK(b < 1.3 * total / 8.0);
  }
}

TEST_CASE("dataset files and digests") {
  auto spec = DatasetSpec::finetune_default();
  spec.target_slip_windows = 20;
  const auto dir = scratch("ds");
  const auto m1 = make_dataset(spec, dir / "a");
  const auto m2 = make_dataset(spec, dir / "b");
  CHECK(!m1.entries.empty());
  CHECK(m1.digest() == m2.digest());
  const auto back = Manifest::read(dir / "a" / "manifest.txt");
  CHECK(back.entries.size() == m1.entries.size());
  const auto trial = load_trial(back, back.entries.front());
  const auto fresh = synth_trial(plan_dataset(spec).front());
  CHECK(trial.audio.samples == fresh.audio.samples);

  spec.target_slip_windows = 0;
  const auto empty = make_dataset(spec, dir / "empty");
  CHECK(empty.entries.empty());
  CHECK(Manifest::read(dir / "empty" / "manifest.txt").entries.empty());
  fs::remove_all(dir);
}

TEST_CASE("slip window counting matches the track") {
  auto spec = quiet_trial(2.0);
  SlipEvent ev;
  ev.t0 = 0.5;
  ev.duration = 0.6;
  ev.speed = 20.0;
  spec.events.push_back(ev);
  const auto track = spec.slip_track();
  int n = 0;
  for (double t = 0.0; t + 0.2 <= 2.0 + 1e-9; t += 0.05) n += track.displacement(t, 0.2).norm() > 0.5;
  CHECK(count_slip_windows(spec, 200.0, 50.0, 0.5) == n);
}
