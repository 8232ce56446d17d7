#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "aslip/autograd.hpp"
#include "aslip/dsp.hpp"
#include "aslip/rng.hpp"

namespace aslip::model {

struct Conv2dBlockConfig {
  int out_channels = 16;
  int kernel = 3;
  int pool = 4;
  double dropout = 0.1;
};

struct Conv1dLayerConfig {
  int out_channels = 64;
  int kernel = 5;
};

struct ModelConfig {
  int channel_count = 4;
  int mel_bins = 64;
  int time_frames = 18;
  std::vector<Conv2dBlockConfig> conv2d_blocks{{16, 3, 4, 0.1}, {32, 3, 4, 0.1}, {64, 3, 4, 0.1}};
  std::vector<Conv1dLayerConfig> conv1d_layers{{64, 5}, {64, 5}};
  int latent_dim = 128;
  int gating_kernel = 5;
  int gating_hidden = 8;
  int attention_hidden = 32;
  /// One channel weight per window (gating scores averaged over time) instead of per frame.
  bool per_window_weights = false;
  /// Feed per-channel residuals (spec_i - fused) to the encoder next to the fused
  /// map. The fused map alone is invariant to channel order, so without them the
  /// encoder cannot see which microphone carried more energy.
  bool channel_residuals = true;

  /// Throws ConfigError on an illegal configuration.
  void validate() const;
  int encoder_input_channels() const { return channel_residuals && channel_count > 1 ? channel_count + 1 : 1; }
  int mel_after_pooling() const;

  std::string to_text() const;
  static ModelConfig from_text(const std::string& text);
};

/// Gated output of one window: the 2D vector is zero whenever p_slip < 0.5.
struct SlipEstimate {
  double p_slip = 0.0;
  double magnitude = 0.0;
  Eigen::Vector2d direction{1.0, 0.0};
  Eigen::Vector2d logits = Eigen::Vector2d::Zero();
  Eigen::Vector2d vector = Eigen::Vector2d::Zero();
  bool degenerate_direction = false;

  bool is_slip() const { return p_slip >= 0.5; }
  static SlipEstimate from_heads(double p_slip, double magnitude, const Eigen::Vector2d& logits);
};

/// Tape handles produced by one forward pass.
struct ForwardResult {
  ag::Var channel_weights;  // [N, n, T]
  ag::Var fused;            // [N, M, T]
  ag::Var features;         // [N, C, T] after the 1D stack
  ag::Var time_weights;     // [N, T]
  ag::Var latent;           // [N, latent_dim]
  ag::Var p_slip;           // [N]
  ag::Var magnitude;        // [N]
  ag::Var dir_logits;       // [N, 2]
};

template <typename Scalar>
class SlipNet {
 public:
  using Param = ag::Parameter<Scalar>;
  using Tensor = ag::Tensor<Scalar>;

  struct ConvBlock {
    Param kernel, bias, gamma, beta;
    ag::BatchNormState<Scalar> bn;
  };
  struct Conv1d {
    Param kernel, bias;
  };
  struct Linear {
    Param weight, bias;
  };

  SlipNet() = default;
  /// Parameters drawn He/Glorot-uniform from `seed`.
  SlipNet(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }

  /// x: normalized input [N, n, M, T]. `mode` governs batch-norm statistics and
  /// dropout in the encoder; the heads have neither.
  ForwardResult forward(ag::Tape<Scalar>& tape, ag::Var x, ag::Mode mode, Rng& rng);

  /// Channel attention only: returns weights [N, n, T] and fused [N, M, T].
  std::pair<ag::Var, ag::Var> channel_attention(ag::Tape<Scalar>& tape, ag::Var x);

  /// Full eval-mode pipeline on an un-normalized spectrogram (one window).
  SlipEstimate predict(const dsp::LogMelSpectrogram& spec) const;
  /// Batch-1 eval on an already normalized input tensor [1, n, M, T].
  SlipEstimate predict_normalized(const Tensor& x) const;

  std::vector<Param*> encoder_parameters();
  std::vector<Param*> head_parameters();
  std::vector<Param*> parameters();
  std::vector<const Param*> parameters() const;
  /// Batch-norm layers in encoder order, with their names.
  std::vector<std::pair<std::string, ag::BatchNormState<Scalar>*>> batchnorm_states();
  std::vector<std::pair<std::string, const ag::BatchNormState<Scalar>*>> batchnorm_states() const;

  /// Marks encoder parameters frozen (trainable = false) or trainable.
  void set_encoder_trainable(bool trainable);

  dsp::NormStats norm_stats;

  /// Copies a spectrogram into a normalized [1, n, M, T] tensor.
  Tensor to_input(const dsp::LogMelSpectrogram& spec) const;

 private:
  ModelConfig config_;
  Conv1d gate1_, gate2_;
  std::vector<ConvBlock> blocks_;
  std::vector<Conv1d> temporal_;
  Conv1d attn1_, attn2_;
  Linear latent_;
  Linear cls_, mag_, dir_;
};

/// Writes one normalized window into `dst` in [n, M, T] row-major order.
template <typename Scalar>
void write_input(const dsp::LogMelSpectrogramT<Scalar>& window, Scalar* dst);

extern template class SlipNet<float>;
extern template class SlipNet<double>;

}  // namespace aslip::model
