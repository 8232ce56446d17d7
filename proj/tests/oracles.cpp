#include "oracles.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <random>

namespace oracle {

namespace {

constexpr long double kPi = 3.141592653589793238462643383279502884L;

long double mel(long double hz) { return 2595.0L * std::log10(1.0L + hz / 700.0L); }
long double inv_mel(long double m) { return 700.0L * (std::pow(10.0L, m / 2595.0L) - 1.0L); }

}  // namespace

std::vector<long double> mel_centers(int mel_bins, long double f_min, long double f_max) {
  std::vector<long double> out;
  const long double lo = mel(f_min), hi = mel(f_max);
  for (int m = 1; m <= mel_bins; ++m) out.push_back(inv_mel(lo + (hi - lo) * m / (mel_bins + 1)));
  return out;
}

std::vector<Eigen::MatrixXd> log_mel_direct(const aslip::dsp::AudioBuffer& buffer, int mel_bins, double f_min,
                                            double f_max, double frame_ms, double hop_ms, double floor,
                                            int fft_size) {
  const double sr = buffer.sample_rate;
  const long frame = std::lround(frame_ms * sr / 1000.0);
  const long hop = std::lround(hop_ms * sr / 1000.0);
  const long frames = 1 + (buffer.length() - frame) / hop;
  const int bins = fft_size / 2 + 1;

  // Filterbank straight from the definition: triangles between adjacent edges,
  // rescaled so the largest sampled weight is one.
  std::vector<long double> edges;
  {
    const long double lo = mel(f_min), hi = mel(f_max);
    for (int i = 0; i < mel_bins + 2; ++i) edges.push_back(inv_mel(lo + (hi - lo) * i / (mel_bins + 1)));
  }
  Eigen::MatrixXd fb = Eigen::MatrixXd::Zero(mel_bins, bins);
  for (int m = 0; m < mel_bins; ++m) {
    for (int k = 0; k < bins; ++k) {
      const long double f = static_cast<long double>(k) * sr / fft_size;
      long double w = 0;
      if (f > edges[m] && f <= edges[m + 1]) w = (f - edges[m]) / (edges[m + 1] - edges[m]);
      if (f > edges[m + 1] && f < edges[m + 2]) w = (edges[m + 2] - f) / (edges[m + 2] - edges[m + 1]);
      fb(m, k) = static_cast<double>(w);
    }
    fb.row(m) /= fb.row(m).maxCoeff();
  }

  // DFT as two dense matrices; twiddle angles reduced exactly via (k*n) mod N.
  // Built once per (frame, fft size).
  static std::map<std::pair<long, int>, std::pair<Eigen::MatrixXd, Eigen::MatrixXd>> tables;
  auto& [cos_m, sin_m] = tables[{frame, fft_size}];
  if (cos_m.size() == 0) {
    cos_m.resize(bins, frame);
    sin_m.resize(bins, frame);
    for (int k = 0; k < bins; ++k) {
      for (long n = 0; n < frame; ++n) {
        const long r = (static_cast<long>(k) * n) % fft_size;
        const long double a = 2.0L * kPi * r / fft_size;
        cos_m(k, n) = static_cast<double>(std::cos(a));
        sin_m(k, n) = static_cast<double>(std::sin(a));
      }
    }
  }
  Eigen::VectorXd window(frame);
  for (long n = 0; n < frame; ++n) window[n] = static_cast<double>(0.5L - 0.5L * std::cos(2.0L * kPi * n / frame));

  std::vector<Eigen::MatrixXd> out;
  for (Eigen::Index c = 0; c < buffer.channel_count(); ++c) {
    Eigen::MatrixXd x(frame, frames);
    for (long t = 0; t < frames; ++t) {
      for (long n = 0; n < frame; ++n) x(n, t) = static_cast<double>(buffer.samples(t * hop + n, c)) * window[n];
    }
    const Eigen::MatrixXd re = cos_m * x;
    const Eigen::MatrixXd im = sin_m * x;
    const Eigen::MatrixXd power = re.array().square() + im.array().square();
    Eigen::MatrixXd energy = fb * power;
    out.push_back(energy.unaryExpr([floor](double e) { return std::log(std::max(e, floor)); }));
  }
  return out;
}

aslip::dsp::AudioBuffer random_buffer(int channels, double seconds, double sample_rate, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const auto length = static_cast<Eigen::Index>(std::lround(seconds * sample_rate));
  auto b = aslip::dsp::AudioBuffer::zeros(channels, length, sample_rate);
  for (Eigen::Index i = 0; i < length; ++i) {
    for (int c = 0; c < channels; ++c) b.samples(i, c) = static_cast<float>(u(rng));
  }
  return b;
}

TensorD random_tensor(const aslip::ag::Shape& shape, std::uint64_t seed, double lo, double hi) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  TensorD t(shape);
  for (Eigen::Index i = 0; i < t.size(); ++i) t.values[i] = u(rng);
  return t;
}

double gradient_error(const GradFn& f, std::vector<TensorD> inputs, std::uint64_t seed, double h) {
  // Contracting with a random tensor makes every output element matter.
  TensorD contraction;
  auto objective = [&](const std::vector<TensorD>& in) {
    TapeD tape;
    std::vector<aslip::ag::Var> vars;
    for (const auto& t : in) vars.push_back(tape.constant(t));
    const auto out = f(tape, vars);
    return tape.value(out).values.dot(contraction.values);
  };

  TapeD tape;
  std::vector<aslip::ag::Var> vars;
  for (const auto& t : inputs) vars.push_back(tape.variable(t));
  const auto out = f(tape, vars);
  contraction = random_tensor(tape.shape(out), seed ^ 0xC0FFEEULL);
  const auto loss = aslip::ag::sum(tape, aslip::ag::mul(tape, out, tape.constant(contraction)));
  tape.backward(loss);

  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    Eigen::VectorXd analytic =
        tape.has_grad(vars[i]) ? tape.grad(vars[i]) : Eigen::VectorXd::Zero(inputs[i].size()).eval();
    Eigen::VectorXd numeric(inputs[i].size());
    for (Eigen::Index k = 0; k < inputs[i].size(); ++k) {
      const double x0 = inputs[i].values[k];
      inputs[i].values[k] = x0 + h;
      const double up = objective(inputs);
      inputs[i].values[k] = x0 - h;
      const double down = objective(inputs);
      inputs[i].values[k] = x0;
      numeric[k] = (up - down) / (2.0 * h);
    }
    const double scale = std::max({analytic.norm(), numeric.norm(), kGradientFloor});
    worst = std::max(worst, (analytic - numeric).norm() / scale);
  }
  return worst;
}

}  // namespace oracle
