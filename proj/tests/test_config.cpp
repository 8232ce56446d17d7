#include <filesystem>
#include <fstream>

#include "aslip/config.hpp"
#include "aslip/error.hpp"
#include "doctest.h"

using namespace aslip;
using namespace aslip::config;

TEST_CASE("ini parsing") {
  const auto c = RunConfig::parse(
      "# comment\n"
      "[windows]\n"
      "window_ms = 300   ; trailing\n"
      "\n"
      "[task]\n"
      "debounce=3\n");
  CHECK(c.get("windows", "window_ms") == "300");
  CHECK(c.get("task", "debounce") == "3");
  CHECK_FALSE(c.has("task", "layout"));

  CHECK_THROWS_AS(RunConfig::parse("key = 1\n"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse("[a\n"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse("[a]\nnovalue\n"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse("[a]\nk = 1\nk = 2\n"), ConfigError);
  CHECK_THROWS_AS(RunConfig::load("/nonexistent/aslip.ini"), InputError);
}

TEST_CASE("overrides") {
  auto c = RunConfig::parse("[task]\ndebounce = 3\n");
  c.apply_override("task.debounce=4");
  c.apply_override("stream.queue_capacity=2");
  const auto s = Settings::resolve(c);
  CHECK(s.task.debounce == 4);
  CHECK(s.stream.queue_capacity == 2);
  CHECK_THROWS_AS(c.apply_override("nodot=1"), UsageError);
}

TEST_CASE("resolution") {
  SUBCASE("defaults") {
    const auto s = Settings::resolve(RunConfig{});
    CHECK(s.features.mel_bins == 64);
    CHECK(s.windows.window_ms == 200.0);
    CHECK(s.task.debounce == 2);
    CHECK(s.pretrain.loss.weights.dir == 2.0);
  }
  SUBCASE("unknown keys are rejected") {
    CHECK_THROWS_AS(Settings::resolve(RunConfig::parse("[windows]\nwidth = 3\n")), ConfigError);
    CHECK_THROWS_AS(Settings::resolve(RunConfig::parse("[nowhere]\nx = 3\n")), ConfigError);
  }
  SUBCASE("bad values are rejected") {
    CHECK_THROWS_AS(Settings::resolve(RunConfig::parse("[task]\ndebounce = two\n")), ConfigError);
    CHECK_THROWS_AS(Settings::resolve(RunConfig::parse("[task]\ndebounce = 0\n")), ConfigError);
    CHECK_THROWS_AS(Settings::resolve(RunConfig::parse("[stream]\nwindow_ms = 100\n")), ConfigError);
  }
  SUBCASE("the window propagates") {
    const auto s = Settings::resolve(RunConfig::parse("[windows]\nwindow_ms = 100\n[stream]\nwindow_ms = 100\n"));
    CHECK(s.pretrain.windows.window_ms == 100.0);
    CHECK(s.test_data.window_ms == 100.0);
    CHECK(s.task.stream.window_ms == 100.0);
  }
  SUBCASE("the master seed moves derived seeds") {
    const auto a = Settings::resolve(RunConfig{});
    const auto b = Settings::resolve(RunConfig::parse("[run]\nseed = 10\n"));
    CHECK(b.pretrain.seed == a.pretrain.seed + 10);
    CHECK(b.model_seed == a.model_seed + 10);
  }
}

TEST_CASE("resolved configuration round trips") {
  const auto s = Settings::resolve(RunConfig::parse("[run]\nseed = 3\n[task]\napproach_speed = 20\n"));
  const auto text = s.to_config().to_text();
  CHECK(Settings::resolve(RunConfig::parse(text)).to_config().to_text() == text);

  const auto dir = std::filesystem::temp_directory_path() / "aslip_test_cfg";
  std::filesystem::remove_all(dir);
  echo_config(s, dir);
  std::ifstream in(dir / "resolved_config.ini");
  const std::string echoed{std::istreambuf_iterator<char>(in), {}};
  CHECK(echoed == text);
  std::filesystem::remove_all(dir);
}
