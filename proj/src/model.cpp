#include "aslip/model.hpp"

#include <cmath>
#include <sstream>

#include "aslip/error.hpp"
#include "aslip/loss.hpp"

namespace aslip::model {

using ag::Index;
using ag::Shape;
using ag::Var;

void ModelConfig::validate() const {
  if (channel_count < 1) throw ConfigError("channel_count must be >= 1");
  if (mel_bins < 1 || time_frames < 1) throw ConfigError("mel_bins and time_frames must be >= 1");
  if (conv2d_blocks.empty()) throw ConfigError("model needs at least one conv2d block");
  if (conv1d_layers.empty()) throw ConfigError("model needs at least one conv1d layer");
  if (latent_dim < 4) throw ConfigError("latent_dim must be >= 4");
  if (gating_kernel < 1 || gating_kernel % 2 == 0) throw ConfigError("gating_kernel must be odd");
  if (gating_hidden < 1 || attention_hidden < 1) throw ConfigError("hidden widths must be >= 1");
  for (const auto& b : conv2d_blocks) {
    if (b.out_channels < 1 || b.kernel < 1 || b.kernel % 2 == 0) throw ConfigError("conv2d kernels must be odd");
    if (b.pool < 1) throw ConfigError("pool size must be >= 1");
    if (!(b.dropout >= 0.0 && b.dropout < 1.0)) throw ConfigError("dropout must be in [0, 1)");
  }
  for (const auto& l : conv1d_layers) {
    if (l.out_channels < 1 || l.kernel < 1 || l.kernel % 2 == 0) throw ConfigError("conv1d kernels must be odd");
  }
  (void)mel_after_pooling();
}

int ModelConfig::mel_after_pooling() const {
  int m = mel_bins;
  for (const auto& b : conv2d_blocks) {
    m /= b.pool;
    if (m < 1) {
      throw ConfigError("mel pooling reduces " + std::to_string(mel_bins) + " bins below 1");
    }
  }
  return m;
}

std::string ModelConfig::to_text() const {
  std::ostringstream os;
  os.precision(17);
  os << "channel_count = " << channel_count << '\n'
     << "mel_bins = " << mel_bins << '\n'
     << "time_frames = " << time_frames << '\n'
     << "conv2d_blocks = ";
  for (std::size_t i = 0; i < conv2d_blocks.size(); ++i) {
    const auto& b = conv2d_blocks[i];
    os << (i ? "," : "") << b.out_channels << ':' << b.kernel << ':' << b.pool << ':' << b.dropout;
  }
  os << "\nconv1d_layers = ";
  for (std::size_t i = 0; i < conv1d_layers.size(); ++i) {
    os << (i ? "," : "") << conv1d_layers[i].out_channels << ':' << conv1d_layers[i].kernel;
  }
  os << "\nlatent_dim = " << latent_dim << '\n'
     << "gating_kernel = " << gating_kernel << '\n'
     << "gating_hidden = " << gating_hidden << '\n'
     << "attention_hidden = " << attention_hidden << '\n'
     << "per_window_weights = " << (per_window_weights ? 1 : 0) << '\n'
     << "channel_residuals = " << (channel_residuals ? 1 : 0) << '\n';
  return os.str();
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

std::vector<std::vector<double>> parse_groups(const std::string& value) {
  std::vector<std::vector<double>> out;
  std::stringstream groups(value);
  std::string group;
  while (std::getline(groups, group, ',')) {
    std::vector<double> fields;
    std::stringstream fs(group);
    std::string f;
    while (std::getline(fs, f, ':')) fields.push_back(std::stod(f));
    out.push_back(std::move(fields));
  }
  return out;
}

}  // namespace

ModelConfig ModelConfig::from_text(const std::string& text) {
  ModelConfig c;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("model config line without '=': " + line);
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    try {
      if (key == "channel_count") c.channel_count = std::stoi(value);
      else if (key == "mel_bins") c.mel_bins = std::stoi(value);
      else if (key == "time_frames") c.time_frames = std::stoi(value);
      else if (key == "latent_dim") c.latent_dim = std::stoi(value);
      else if (key == "gating_kernel") c.gating_kernel = std::stoi(value);
      else if (key == "gating_hidden") c.gating_hidden = std::stoi(value);
      else if (key == "attention_hidden") c.attention_hidden = std::stoi(value);
      else if (key == "per_window_weights") c.per_window_weights = std::stoi(value) != 0;
      else if (key == "channel_residuals") c.channel_residuals = std::stoi(value) != 0;
      else if (key == "conv2d_blocks") {
        c.conv2d_blocks.clear();
        for (const auto& g : parse_groups(value)) {
          if (g.size() != 4) throw FormatError("conv2d block needs out:kernel:pool:dropout");
          c.conv2d_blocks.push_back({static_cast<int>(g[0]), static_cast<int>(g[1]), static_cast<int>(g[2]), g[3]});
        }
      } else if (key == "conv1d_layers") {
        c.conv1d_layers.clear();
        for (const auto& g : parse_groups(value)) {
          if (g.size() != 2) throw FormatError("conv1d layer needs out:kernel");
          c.conv1d_layers.push_back({static_cast<int>(g[0]), static_cast<int>(g[1])});
        }
      } else {
        throw FormatError("unknown model config key '" + key + "'");
      }
    } catch (const std::logic_error&) {
      throw FormatError("bad value for model config key '" + key + "': " + value);
    }
  }
  c.validate();
  return c;
}

SlipEstimate SlipEstimate::from_heads(double p_slip, double magnitude, const Eigen::Vector2d& logits) {
  SlipEstimate e;
  e.p_slip = p_slip;
  e.magnitude = magnitude;
  e.logits = logits;
  e.direction = loss::normalize_direction(logits, &e.degenerate_direction);
  e.vector = e.is_slip() ? Eigen::Vector2d(magnitude * e.direction) : Eigen::Vector2d::Zero();
  return e;
}

namespace {

template <typename Scalar>
ag::Parameter<Scalar> uniform_param(std::string name, Shape shape, double bound, Rng& rng) {
  ag::Tensor<Scalar> t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t.values[i] = static_cast<Scalar>(uniform(rng, -bound, bound));
  return ag::Parameter<Scalar>(std::move(name), std::move(t));
}

template <typename Scalar>
ag::Parameter<Scalar> filled_param(std::string name, Index n, double value) {
  ag::Tensor<Scalar> t(Shape{n});
  t.values.setConstant(static_cast<Scalar>(value));
  return ag::Parameter<Scalar>(std::move(name), std::move(t));
}

}  // namespace

template <typename Scalar>
SlipNet<Scalar>::SlipNet(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(seed);
  auto conv1d = [&](const std::string& name, Index out, Index in, Index k, double gain) {
    const double bound = std::sqrt(gain / static_cast<double>(in * k));
    return Conv1d{uniform_param<Scalar>(name + ".kernel", {out, in, k}, bound, rng),
                  filled_param<Scalar>(name + ".bias", out, 0.0)};
  };
  auto linear = [&](const std::string& name, Index out, Index in, double gain) {
    const double bound = std::sqrt(gain / static_cast<double>(in));
    return Linear{uniform_param<Scalar>(name + ".weight", {out, in}, bound, rng),
                  filled_param<Scalar>(name + ".bias", out, 0.0)};
  };

  gate1_ = conv1d("encoder.gate.0", config_.gating_hidden, 1, config_.gating_kernel, 6.0);
  gate2_ = conv1d("encoder.gate.1", 1, config_.gating_hidden, config_.gating_kernel, 3.0);

  Index in = config_.encoder_input_channels();
  int mel = config_.mel_bins;
  for (std::size_t i = 0; i < config_.conv2d_blocks.size(); ++i) {
    const auto& b = config_.conv2d_blocks[i];
    const std::string name = "encoder.conv2d." + std::to_string(i);
    const double bound = std::sqrt(6.0 / static_cast<double>(in * b.kernel * b.kernel));
    ConvBlock block{uniform_param<Scalar>(name + ".kernel", {b.out_channels, in, b.kernel, b.kernel}, bound, rng),
                    filled_param<Scalar>(name + ".bias", b.out_channels, 0.0),
                    filled_param<Scalar>(name + ".bn.gamma", b.out_channels, 1.0),
                    filled_param<Scalar>(name + ".bn.beta", b.out_channels, 0.0),
                    ag::BatchNormState<Scalar>(b.out_channels)};
    blocks_.push_back(std::move(block));
    in = b.out_channels;
    mel /= b.pool;
  }
  in *= mel;
  for (std::size_t i = 0; i < config_.conv1d_layers.size(); ++i) {
    const auto& l = config_.conv1d_layers[i];
    temporal_.push_back(conv1d("encoder.conv1d." + std::to_string(i), l.out_channels, in, l.kernel, 6.0));
    in = l.out_channels;
  }
  attn1_ = conv1d("encoder.attention.0", config_.attention_hidden, in, 1, 3.0);
  attn2_ = conv1d("encoder.attention.1", 1, config_.attention_hidden, 1, 3.0);
  latent_ = linear("encoder.latent", config_.latent_dim, in, 6.0);
  cls_ = linear("head.cls", 1, config_.latent_dim, 1.0);
  mag_ = linear("head.mag", 1, config_.latent_dim, 1.0);
  dir_ = linear("head.dir", 2, config_.latent_dim, 1.0);
  norm_stats = dsp::NormStats::identity(config_.channel_count, config_.mel_bins);
}

template <typename Scalar>
std::pair<Var, Var> SlipNet<Scalar>::channel_attention(ag::Tape<Scalar>& tape, Var x) {
  const Shape xs = tape.shape(x);
  if (xs.size() != 4) throw InputError("model input must be [N, n, M, T], got " + ag::shape_string(xs));
  if (xs[1] != config_.channel_count) {
    throw UsageError("input has " + std::to_string(xs[1]) + " channels, model expects " +
                     std::to_string(config_.channel_count));
  }
  const Index n_batch = xs[0], n = xs[1], t = xs[3];
  Var profiles = ag::mean_axis(tape, x, 2);  // [N, n, T]
  Var g = ag::reshape(tape, profiles, Shape{n_batch * n, 1, t});
  g = ag::relu(tape, ag::conv1d(tape, g, tape.parameter(gate1_.kernel), tape.parameter(gate1_.bias)));
  g = ag::conv1d(tape, g, tape.parameter(gate2_.kernel), tape.parameter(gate2_.bias));
  Var scores = ag::reshape(tape, g, Shape{n_batch, n, t});
  if (config_.per_window_weights) scores = ag::broadcast_axis(tape, ag::mean_axis(tape, scores, 2), 2, t);
  Var weights = ag::softmax(tape, scores, 1);
  Var fused = ag::channel_fuse(tape, x, weights);
  return {weights, fused};
}

template <typename Scalar>
ForwardResult SlipNet<Scalar>::forward(ag::Tape<Scalar>& tape, Var x, ag::Mode mode, Rng& rng) {
  const Shape xs = tape.shape(x);
  if (xs.size() != 4 || xs[2] != config_.mel_bins) {
    throw InputError("model input must be [N, n, " + std::to_string(config_.mel_bins) + ", T], got " +
                     ag::shape_string(xs));
  }
  ForwardResult r;
  std::tie(r.channel_weights, r.fused) = channel_attention(tape, x);
  const Index n_batch = xs[0], n = xs[1], m = xs[2], t = xs[3];

  Var h = ag::reshape(tape, r.fused, Shape{n_batch, 1, m, t});
  if (config_.encoder_input_channels() > 1) {
    Var residual = ag::sub(tape, x, ag::broadcast_axis(tape, r.fused, 1, n));
    h = ag::concat(tape, {h, residual}, 1);
  }
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    auto& b = blocks_[i];
    const auto& cfg = config_.conv2d_blocks[i];
    h = ag::conv2d(tape, h, tape.parameter(b.kernel), tape.parameter(b.bias));
    h = ag::batchnorm(tape, h, tape.parameter(b.gamma), tape.parameter(b.beta), b.bn, mode);
    h = ag::relu(tape, h);
    h = ag::dropout(tape, h, cfg.dropout, mode, rng);
    h = ag::max_pool_freq(tape, h, static_cast<Index>(cfg.pool));
  }
  const Shape hs = tape.shape(h);
  h = ag::reshape(tape, h, Shape{n_batch, hs[1] * hs[2], t});
  for (auto& l : temporal_) {
    h = ag::relu(tape, ag::conv1d(tape, h, tape.parameter(l.kernel), tape.parameter(l.bias)));
  }
  r.features = h;

  Var a = ag::tanh(tape, ag::conv1d(tape, h, tape.parameter(attn1_.kernel), tape.parameter(attn1_.bias)));
  a = ag::conv1d(tape, a, tape.parameter(attn2_.kernel), tape.parameter(attn2_.bias));
  r.time_weights = ag::softmax(tape, ag::reshape(tape, a, Shape{n_batch, t}), 1);
  Var pooled = ag::attention_pool(tape, h, r.time_weights);
  r.latent = ag::relu(tape, ag::linear(tape, pooled, tape.parameter(latent_.weight), tape.parameter(latent_.bias)));

  Var cls = ag::linear(tape, r.latent, tape.parameter(cls_.weight), tape.parameter(cls_.bias));
  r.p_slip = ag::reshape(tape, ag::sigmoid(tape, cls), Shape{n_batch});
  Var mag = ag::linear(tape, r.latent, tape.parameter(mag_.weight), tape.parameter(mag_.bias));
  r.magnitude = ag::reshape(tape, ag::softplus(tape, mag), Shape{n_batch});
  r.dir_logits = ag::linear(tape, r.latent, tape.parameter(dir_.weight), tape.parameter(dir_.bias));
  return r;
}

template <typename Scalar>
typename SlipNet<Scalar>::Tensor SlipNet<Scalar>::to_input(const dsp::LogMelSpectrogram& spec) const {
  if (spec.channel_count() != config_.channel_count || spec.mel_bins() != config_.mel_bins) {
    throw UsageError("spectrogram shape does not match the model (" + std::to_string(spec.channel_count()) +
                     " channels, " + std::to_string(spec.mel_bins()) + " bins)");
  }
  const auto normalized = dsp::normalize(spec, norm_stats).template cast<Scalar>();
  Tensor x(Shape{1, spec.channel_count(), spec.mel_bins(), spec.time_frames()});
  write_input(normalized, x.values.data());
  return x;
}

template <typename Scalar>
SlipEstimate SlipNet<Scalar>::predict(const dsp::LogMelSpectrogram& spec) const {
  return predict_normalized(to_input(spec));
}

template <typename Scalar>
SlipEstimate SlipNet<Scalar>::predict_normalized(const Tensor& x) const {
  if (x.rank() != 4 || x.dim(0) != 1) throw InputError("predict expects a single window [1, n, M, T]");
  // An eval-mode pass on a gradient-free tape reads parameters and batch-norm
  // statistics without modifying them.
  auto& self = const_cast<SlipNet&>(*this);
  ag::Tape<Scalar> tape(false);
  Rng unused(0);
  const ForwardResult r = self.forward(tape, tape.constant(x), ag::Mode::Eval, unused);
  const auto& l = tape.value(r.dir_logits).values;
  return SlipEstimate::from_heads(static_cast<double>(tape.value(r.p_slip).values[0]),
                                  static_cast<double>(tape.value(r.magnitude).values[0]),
                                  Eigen::Vector2d(static_cast<double>(l[0]), static_cast<double>(l[1])));
}

template <typename Scalar>
std::vector<typename SlipNet<Scalar>::Param*> SlipNet<Scalar>::encoder_parameters() {
  std::vector<Param*> out{&gate1_.kernel, &gate1_.bias, &gate2_.kernel, &gate2_.bias};
  for (auto& b : blocks_) {
    for (Param* p : {&b.kernel, &b.bias, &b.gamma, &b.beta}) out.push_back(p);
  }
  for (auto& l : temporal_) {
    out.push_back(&l.kernel);
    out.push_back(&l.bias);
  }
  for (Param* p : {&attn1_.kernel, &attn1_.bias, &attn2_.kernel, &attn2_.bias, &latent_.weight, &latent_.bias}) {
    out.push_back(p);
  }
  return out;
}

template <typename Scalar>
std::vector<typename SlipNet<Scalar>::Param*> SlipNet<Scalar>::head_parameters() {
  return {&cls_.weight, &cls_.bias, &mag_.weight, &mag_.bias, &dir_.weight, &dir_.bias};
}

template <typename Scalar>
std::vector<typename SlipNet<Scalar>::Param*> SlipNet<Scalar>::parameters() {
  auto out = encoder_parameters();
  for (Param* p : head_parameters()) out.push_back(p);
  return out;
}

template <typename Scalar>
std::vector<const typename SlipNet<Scalar>::Param*> SlipNet<Scalar>::parameters() const {
  auto mutable_params = const_cast<SlipNet&>(*this).parameters();
  return {mutable_params.begin(), mutable_params.end()};
}

template <typename Scalar>
std::vector<std::pair<std::string, ag::BatchNormState<Scalar>*>> SlipNet<Scalar>::batchnorm_states() {
  std::vector<std::pair<std::string, ag::BatchNormState<Scalar>*>> out;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    out.emplace_back("encoder.conv2d." + std::to_string(i) + ".bn", &blocks_[i].bn);
  }
  return out;
}

template <typename Scalar>
std::vector<std::pair<std::string, const ag::BatchNormState<Scalar>*>> SlipNet<Scalar>::batchnorm_states() const {
  std::vector<std::pair<std::string, const ag::BatchNormState<Scalar>*>> out;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    out.emplace_back("encoder.conv2d." + std::to_string(i) + ".bn", &blocks_[i].bn);
  }
  return out;
}

template <typename Scalar>
void SlipNet<Scalar>::set_encoder_trainable(bool trainable) {
  for (Param* p : encoder_parameters()) p->trainable = trainable;
}

template <typename Scalar>
void write_input(const dsp::LogMelSpectrogramT<Scalar>& window, Scalar* dst) {
  const Index m = window.mel_bins(), t = window.time_frames();
  for (const auto& c : window.channels) {
    for (Index i = 0; i < m; ++i) {
      for (Index j = 0; j < t; ++j) dst[i * t + j] = c(i, j);
    }
    dst += m * t;
  }
}

template class SlipNet<float>;
template class SlipNet<double>;
template void write_input<float>(const dsp::LogMelSpectrogramT<float>&, float*);
template void write_input<double>(const dsp::LogMelSpectrogramT<double>&, double*);

}  // namespace aslip::model
