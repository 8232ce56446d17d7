#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "aslip/autograd.hpp"
#include "aslip/datapipe.hpp"
#include "aslip/loss.hpp"
#include "aslip/model.hpp"

namespace aslip::train {

using Net = model::SlipNet<float>;

enum class Stage { Pretrain, Finetune };
std::string to_string(Stage s);
Stage stage_from_string(const std::string& s);

struct TrainConfig {
  Stage stage = Stage::Pretrain;
  int epochs_max = 1000;
  int batch_size = 32;
  int patience = 25;  // epochs without validation improvement
  double learning_rate = 1e-3;
  double weight_decay = 1e-4;
  loss::LossConfig loss;
  std::uint64_t seed = 0;
  double val_fraction = 0.15;  // by trial
  data::WindowConfig windows;
  bool augment_enabled = true;
  data::AugmentConfig augment;
  data::RebalanceMode rebalance = data::RebalanceMode::Both;
  double rebalance_ratio = 2.0;
  /// Finetune only: run the frozen encoder in train mode so batch-norm running
  /// statistics adapt (weights stay frozen). Off by default: fully frozen.
  bool unfreeze_batchnorm = false;

  void validate() const;
};

/// Accuracy/MAE/RMSE over one set of windows.
struct Metrics {
  int windows = 0;
  int slip_windows = 0;
  double detection_accuracy = 0.0;  // %
  /// Over true-slip windows; a missed slip window scores 180 degrees.
  double direction_mae = 0.0, direction_mae_std = 0.0;
  /// Over windows where truth and prediction both indicate slip.
  double conditional_mae = 0.0, conditional_mae_std = 0.0;
  int conditional_windows = 0;
  /// Magnitude-head error over true-slip windows, mm.
  double magnitude_rmse = 0.0, magnitude_abs_std = 0.0;
};

struct EvalReport {
  Metrics overall;
  std::map<std::string, Metrics> by_noise;
  std::map<std::string, Metrics> by_profile;
  loss::LossComponents loss;

  std::string to_text() const;
  static std::string csv_header();
  std::string csv_row(const std::string& label) const;
};

struct EpochRecord {
  int epoch = 0;
  loss::LossComponents train;
  loss::LossComponents val;
  Metrics val_metrics;
  bool improved = false;

  std::string to_line() const;
};

struct TrainResult {
  Net model;
  std::vector<EpochRecord> history;
  int best_epoch = 0;
  double best_val_loss = 0.0;
  double pos_weight = 1.0;
  int train_windows = 0;
  int val_windows = 0;
  ag::AdamState<float> optimizer;
  data::Split split;
};

/// Pretrain: `model` is a freshly initialized network; normalization statistics
/// are computed on the training trials. Finetune: `model` is the pretrained base;
/// its statistics and encoder are kept, only the heads are optimized.
TrainResult train(Net model, const data::Corpus& corpus, const TrainConfig& cfg,
                  const std::function<void(const EpochRecord&)>& on_epoch = {});

/// Batch-1 eval-mode predictions (identical to streaming on the same windows).
std::vector<model::SlipEstimate> predict_windows(const Net& model, const std::vector<data::WindowSample>& windows);

Metrics compute_metrics(const std::vector<model::SlipEstimate>& predictions,
                        const std::vector<data::WindowSample>& windows);
EvalReport evaluate(const Net& model, const std::vector<data::WindowSample>& windows,
                    const loss::LossConfig& loss_cfg = {});
EvalReport evaluate(const std::vector<model::SlipEstimate>& predictions, const std::vector<data::WindowSample>& windows,
                    const loss::LossConfig& loss_cfg = {});

/// Angle between two unit vectors in degrees, in [0, 180].
double angle_deg(const Eigen::Vector2d& a, const Eigen::Vector2d& b);

// ---------------------------------------------------------------------------
// Checkpoints: "ASLP", u32 version, length-prefixed model config and provenance
// text, then named tensors (u32 name length, name, u8 dtype, u32 rank, u64 dims,
// little-endian payload). Parameters and batch-norm statistics are float32;
// normalization statistics are float64 so that reloaded models reproduce the
// original forward pass bit for bit.

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  Net model;
  std::map<std::string, std::string> provenance;
  std::optional<ag::AdamState<float>> optimizer;
};

void save_checkpoint(const std::filesystem::path& path, const Net& model,
                     const std::map<std::string, std::string>& provenance,
                     const ag::AdamState<float>* optimizer = nullptr);
Checkpoint load_checkpoint(const std::filesystem::path& path);
std::uint64_t file_digest(const std::filesystem::path& path);

/// Feature and window settings recorded with a model.
std::map<std::string, std::string> feature_provenance(const dsp::FeatureConfig& features,
                                                      const data::WindowConfig& windows);
dsp::FeatureConfig features_from_provenance(const std::map<std::string, std::string>& p);
data::WindowConfig windows_from_provenance(const std::map<std::string, std::string>& p);

// ---------------------------------------------------------------------------
// Ablations

enum class Regime { Scratch, PretrainOnly, Finetuned };
std::string to_string(Regime r);
Regime regime_from_string(const std::string& s);

struct AblationCell {
  std::string layout = "four";
  double window_ms = 200.0;
  Regime regime = Regime::Scratch;
};

struct AblationSpec {
  std::vector<AblationCell> cells;
  sim::DatasetSpec pretrain = sim::DatasetSpec::pretrain_default();  // PretrainOnly / Finetuned
  sim::DatasetSpec train = sim::DatasetSpec::finetune_default();     // Scratch / Finetuned
  sim::DatasetSpec test = sim::DatasetSpec::finetune_default();
  TrainConfig pretrain_cfg;
  TrainConfig train_cfg;
  dsp::FeatureConfig features;
  std::uint64_t model_seed = 0;
};

struct AblationRow {
  AblationCell cell;
  EvalReport report;
  int train_windows = 0;
  int epochs = 0;
};

/// Trains and evaluates every cell. Datasets are synthesized per layout with the
/// same seeds, so cells that differ only in layout see the same events and noise.
std::vector<AblationRow> ablation_grid(const AblationSpec& spec,
                                       const std::function<void(const AblationRow&)>& on_row = {});
std::string ablation_table(const std::vector<AblationRow>& rows);

/// Model shaped for a layout/window under the given front end.
model::ModelConfig model_config_for(int channels, const dsp::FeatureConfig& features, double window_ms);

}  // namespace aslip::train
