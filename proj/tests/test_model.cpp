#include <set>

#include "aslip/error.hpp"
#include "aslip/model.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace aslip;
using namespace aslip::model;
using Net = SlipNet<double>;

namespace {

ModelConfig small(int channels, int frames = 18) {
  ModelConfig c;
  c.channel_count = channels;
  c.time_frames = frames;
  return c;
}

ag::Tensor<double> identical_channels(int n, int T, std::uint64_t seed) {
  const auto one = oracle::random_tensor({64, T}, seed, -2.0, 2.0);
  ag::Tensor<double> x({1, n, 64, T});
  for (int c = 0; c < n; ++c) x.values.segment(c * 64 * T, 64 * T) = one.values;
  return x;
}

}  // namespace

TEST_CASE("channel attention is uniform on identical channels") {
  Net net(small(4), 1);
  const auto x = identical_channels(4, 18, 3);
  ag::Tape<double> tape(false);
  auto [w, fused] = net.channel_attention(tape, tape.constant(x));
  CHECK(tape.shape(w) == ag::Shape{1, 4, 18});
  CHECK((tape.value(w).values.array() - 0.25).abs().maxCoeff() < 1e-6);
  CHECK((tape.value(fused).values - x.values.head(64 * 18)).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("single channel passes through") {
  Net net(small(1), 2);
  const auto x = oracle::random_tensor({1, 1, 64, 18}, 4);
  ag::Tape<double> tape(false);
  auto [w, fused] = net.channel_attention(tape, tape.constant(x));
  CHECK((tape.value(w).values.array() == 1.0).all());
  CHECK(tape.value(fused).values == x.values);
}

TEST_CASE("forward invariants") {
  Net net(small(4), 5);
  const auto x = oracle::random_tensor({3, 4, 64, 18}, 6, -2.0, 2.0);
  ag::Tape<double> tape(false);
  Rng rng(1);
  const auto r = net.forward(tape, tape.constant(x), ag::Mode::Train, rng);

  const auto& w = tape.value(r.channel_weights).values;
  for (int n = 0; n < 3; ++n)
    for (int t = 0; t < 18; ++t) {
      double s = 0;
      for (int c = 0; c < 4; ++c) s += w((n * 4 + c) * 18 + t);
      CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
    }
  CHECK(tape.shape(r.features)[2] == 18);  // time preserved
  const auto& tw = tape.value(r.time_weights).values;
  for (int n = 0; n < 3; ++n) CHECK(tw.segment(n * 18, 18).sum() == doctest::Approx(1.0).epsilon(1e-6));

  const auto& p = tape.value(r.p_slip).values;
  CHECK((p.array() > 0.0).all());
  CHECK((p.array() < 1.0).all());
  CHECK((tape.value(r.magnitude).values.array() >= 0.0).all());
}

TEST_CASE("encoder keeps T for every legal window") {
  for (int T : {1, 8, 18, 28}) {
    Net net(small(2, T), 7);
    ag::Tape<double> tape(false);
    Rng rng(0);
    const auto r = net.forward(tape, tape.constant(oracle::random_tensor({2, 2, 64, T}, 8)), ag::Mode::Train, rng);
    CHECK(tape.shape(r.features)[2] == T);
  }
}

TEST_CASE("eval mode ignores dropout") {
  auto with = small(4);
  auto without = small(4);
  for (auto& b : without.conv2d_blocks) b.dropout = 0.0;
  Net a(with, 9), b(without, 9);
  const auto x = oracle::random_tensor({2, 4, 64, 18}, 10);
  Rng rng(0);
  {  // same running statistics in both
    ag::Tape<double> t(false);
    b.forward(t, t.constant(x), ag::Mode::Train, rng);
    auto sa = a.batchnorm_states();
    auto sb = b.batchnorm_states();
    for (std::size_t i = 0; i < sa.size(); ++i) *sa[i].second = *sb[i].second;
  }
  ag::Tape<double> ta(false), tb(false);
  const auto ra = a.forward(ta, ta.constant(x), ag::Mode::Eval, rng);
  const auto rb = b.forward(tb, tb.constant(x), ag::Mode::Eval, rng);
  CHECK(ta.value(ra.p_slip).values == tb.value(rb.p_slip).values);
  CHECK(ta.value(ra.dir_logits).values == tb.value(rb.dir_logits).values);
}

TEST_CASE("attention pooling of constant features") {
  ag::Tape<double> tape(false);
  ag::Tensor<double> f({1, 3, 5});
  for (int c = 0; c < 3; ++c) f.values.segment(c * 5, 5).setConstant(c + 0.5);
  auto w = ag::softmax(tape, tape.constant(oracle::random_tensor({1, 5}, 1, -3.0, 3.0)), 1);
  auto z = ag::attention_pool(tape, tape.constant(f), w);
  CHECK((tape.value(z).values - Eigen::Vector3d(0.5, 1.5, 2.5)).cwiseAbs().maxCoeff() < 1e-12);

  ag::Tensor<double> one({1, 3, 1});
  one.values << 1.0, -2.0, 4.0;
  ag::Tensor<double> unit({1, 1});
  unit.values << 1.0;
  auto z1 = ag::attention_pool(tape, tape.constant(one), tape.constant(unit));
  CHECK(tape.value(z1).values == one.values);
}

TEST_CASE("slip gating") {
  auto e = SlipEstimate::from_heads(0.49, 3.0, Eigen::Vector2d(1, 1));
  CHECK_FALSE(e.is_slip());
  CHECK(e.vector == Eigen::Vector2d::Zero());
  e = SlipEstimate::from_heads(0.5, 3.0, Eigen::Vector2d(3, 4));
  CHECK(e.is_slip());
  CHECK(e.direction.norm() == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(e.vector.isApprox(Eigen::Vector2d(1.8, 2.4)));
}

TEST_CASE("predictions are deterministic and gated") {
  SlipNet<float> net(small(4), 11);
  dsp::LogMelSpectrogram spec;
  for (int c = 0; c < 4; ++c) spec.channels.push_back(Eigen::MatrixXd::Random(64, 18));
  net.norm_stats = dsp::NormStats::identity(4, 64);
  {
    ag::Tape<float> tape(false);
    Rng rng(0);
    net.forward(tape, tape.constant(net.to_input(spec)), ag::Mode::Train, rng);  // initializes running stats
  }
  const auto a = net.predict(spec);
  const auto b = net.predict(spec);
  CHECK(a.p_slip == b.p_slip);
  CHECK(a.vector == b.vector);
  if (!a.is_slip()) CHECK(a.vector == Eigen::Vector2d::Zero());
}

TEST_CASE("channel count mismatch is a usage error") {
  Net net(small(4), 12);
  ag::Tape<double> tape(false);
  Rng rng(0);
  CHECK_THROWS_AS(net.forward(tape, tape.constant(oracle::random_tensor({1, 2, 64, 18}, 1)), ag::Mode::Train, rng),
                  UsageError);
}

TEST_CASE("model config validation and text round trip") {
  auto c = small(4);
  c.conv2d_blocks.push_back({8, 3, 4, 0.0});  // 64 / 4^4 < 1
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small(2);
  c.per_window_weights = true;
  const auto back = ModelConfig::from_text(c.to_text());
  CHECK(back.to_text() == c.to_text());
  CHECK(back.channel_count == 2);
  CHECK(back.per_window_weights);
  CHECK_THROWS_AS(ModelConfig::from_text("bogus = 1\n"), FormatError);
}

TEST_CASE("encoder and head parameters partition the model") {
  Net net(small(4), 13);
  std::set<std::string> enc, head, all;
  for (auto* p : net.encoder_parameters()) enc.insert(p->name);
  for (auto* p : net.head_parameters()) head.insert(p->name);
  for (auto* p : net.parameters()) all.insert(p->name);
  CHECK(enc.size() + head.size() == all.size());
  for (const auto& n : head) CHECK(enc.count(n) == 0);
  for (const auto& n : enc) CHECK(n.rfind("encoder.", 0) == 0);
  for (const auto& n : head) CHECK(n.rfind("head.", 0) == 0);

  net.set_encoder_trainable(false);
  for (auto* p : net.encoder_parameters()) CHECK_FALSE(p->trainable);
  for (auto* p : net.head_parameters()) CHECK(p->trainable);
}
