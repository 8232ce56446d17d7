#include "aslip/controlsim.hpp"
#include "aslip/error.hpp"
#include "doctest.h"

using namespace aslip;
using namespace aslip::control;

TEST_CASE("planar dynamics") {
  PlanarState s;
  auto n = step_dynamics(s, Vector2d(10, 0), 0.1, World{});
  CHECK(n.gripper.isApprox(Vector2d(1, 0)));
  CHECK(n.object.isApprox(Vector2d(1, 0)));
  CHECK(n.relative().isZero());
  CHECK(n.time == doctest::Approx(0.1));

  // the wall holds the object while the gripper keeps going
  n = step_dynamics(s, Vector2d(10, 0), 0.1, World{0.5, std::nullopt});
  CHECK(n.object.x() == 0.5);
  CHECK(n.gripper.x() == doctest::Approx(1.0));
  n = step_dynamics(n, Vector2d(10, 0), 0.1, World{0.5, std::nullopt});
  CHECK(n.object.x() == 0.5);
  CHECK(n.relative().x() == doctest::Approx(-1.5));

  // a push overrides the grip
  n = step_dynamics(s, Vector2d(10, 0), 0.1, World{std::nullopt, Vector2d(0, 5)});
  CHECK(n.object.isApprox(Vector2d(0, 0.5)));
  CHECK(n.gripper.isApprox(Vector2d(1, 0)));
}

TEST_CASE("slip-stop with the oracle") {
  TaskConfig cfg;
  OracleDetector oracle;
  const auto r = run_slip_stop(oracle, cfg);
  CHECK(r.contacted);
  CHECK(r.success);
  CHECK(r.stop_time >= r.contact_time);
  CHECK(r.delta_x > 0.0);
  CHECK(r.delta_x <= cfg.approach_speed * (0.2 + 3 * 0.05));
  // holds still after stopping
  CHECK(r.trace.back().state.gripper.x() == doctest::Approx(r.trace.back().state.gripper.x()));
  CHECK(r.trace.back().command.isZero());
}

TEST_CASE("a detector that never fires loses the object") {
  TaskConfig cfg;
  cfg.object_length = 30.0;
  NullDetector none;
  const auto r = run_slip_stop(none, cfg);
  CHECK(r.contacted);
  CHECK_FALSE(r.stopped);
  CHECK_FALSE(r.success);
  CHECK(r.delta_x == cfg.object_length);
}

TEST_CASE("slip-track") {
  TaskConfig cfg;
  cfg.task = Task::SlipTrack;
  cfg.duration = 2.0;
  NullDetector none;
  OracleDetector oracle;

  SUBCASE("no disturbance, no motion") {
    const auto r = run_slip_track(none, cfg);
    CHECK(r.pose_rmse == 0.0);
    CHECK(r.disturbance_displacement == 0.0);
  }
  SUBCASE("the oracle beats open loop") {
    sim::SlipEvent push;
    push.t0 = 0.4;
    push.duration = 0.8;
    push.speed = 30.0;
    push.direction = 0.5;
    push.ramp = 0.0;
    cfg.disturbance.push_back(push);
    const auto open = run_slip_track(none, cfg);
    const auto closed = run_slip_track(oracle, cfg);
    CHECK(open.disturbance_displacement == doctest::Approx(24.0).epsilon(1e-6));
    CHECK(closed.pose_rmse < 0.5 * open.pose_rmse);
  }
  SUBCASE("disturbance past the end") {
    sim::SlipEvent push;
    push.t0 = 1.8;
    push.duration = 0.5;
    push.speed = 10.0;
    cfg.disturbance.push_back(push);
    CHECK_THROWS_AS(run_slip_track(none, cfg), ConfigError);
  }
}

TEST_CASE("episodes are deterministic") {
  TaskConfig cfg;
  cfg.seed = 99;
  OracleDetector a, b;
  CHECK(run_slip_stop(a, cfg).trace_csv() == run_slip_stop(b, cfg).trace_csv());
  const auto t1 = make_trials(cfg, 5, 3);
  const auto t2 = make_trials(cfg, 5, 3);
  REQUIRE(t1.size() == 5);
  for (std::size_t i = 0; i < t1.size(); ++i) {
    CHECK(t1[i].wall_x == t2[i].wall_x);
    CHECK(t1[i].seed == t2[i].seed);
  }
}

TEST_CASE("energy baseline") {
  TaskConfig cfg;
  const auto layout = sim::MicLayout::named(cfg.layout);
  EnergyThresholdBaseline base(layout, 48000.0, 0.5);
  const Eigen::MatrixXf silence = Eigen::MatrixXf::Zero(9600, 4);
  CHECK_FALSE(base.calibrated());
  CHECK_THROWS_AS(base.energy_threshold_baseline(silence), UsageError);

  const auto quiet = no_slip_recording(cfg, 3.0, 1);
  base.calibrate(quiet, 200.0, 50.0);
  CHECK(base.calibrated());
  CHECK(base.threshold() > 0.0);
  CHECK_FALSE(base.energy_threshold_baseline(silence).is_slip());

  // a loud band-limited tone on the first mic fires and points at it
  Eigen::MatrixXf loud = Eigen::MatrixXf::Zero(9600, 4);
  for (int i = 0; i < 9600; ++i) {
    const float s = std::sin(2.0 * M_PI * 3000.0 * i / 48000.0);
    loud(i, 0) = 1.0f * s;
    for (int c = 1; c < 4; ++c) loud(i, c) = 0.5f * s;
  }
  const auto e = base.energy_threshold_baseline(loud);
  CHECK(e.is_slip());
  CHECK(e.direction.dot(layout.positions[0].normalized()) > 0.0);

  CHECK_THROWS_AS(base.energy_threshold_baseline(Eigen::MatrixXf::Zero(9600, 2)), InputError);
  CHECK_THROWS_AS(task_from_string("slip-go"), ConfigError);
}
