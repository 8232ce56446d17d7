#include "aslip/training.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_map>

#include "aslip/error.hpp"
#include "aslip/rng.hpp"

namespace aslip::train {

namespace {

constexpr double kRadToDeg = 57.295779513082320876798154814105;

std::string fmt(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::string fixed(double v, int digits) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(digits);
  os << v;
  return os.str();
}

struct Snapshot {
  std::vector<ag::Tensor<float>> params;
  std::vector<ag::BatchNormState<float>> bn;

  static Snapshot take(Net& m) {
    Snapshot s;
    for (auto* p : m.parameters()) s.params.push_back(p->value);
    for (auto& [name, st] : m.batchnorm_states()) s.bn.push_back(*st);
    return s;
  }
  void restore(Net& m) const {
    auto ps = m.parameters();
    for (std::size_t i = 0; i < ps.size(); ++i) ps[i]->value = params[i];
    auto bs = m.batchnorm_states();
    for (std::size_t i = 0; i < bs.size(); ++i) *bs[i].second = bn[i];
  }
};

ag::Tensor<float> batch_input(const std::vector<const data::WindowSample*>& batch) {
  const auto& first = batch.front()->spectrogram;
  const ag::Index n = first.channel_count(), m = first.mel_bins(), t = first.time_frames();
  ag::Tensor<float> x(ag::Shape{static_cast<ag::Index>(batch.size()), n, m, t});
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto& s = batch[b]->spectrogram;
    if (s.channel_count() != n || s.mel_bins() != m || s.time_frames() != t)
      throw InputError("inconsistent window shapes in batch");
    model::write_input(s, x.values.data() + static_cast<ag::Index>(b) * n * m * t);
  }
  return x;
}

// Predecessor positions inside a batch (for smoothness on predictions).
std::vector<int> predecessors(const std::vector<const data::WindowSample*>& batch) {
  std::vector<int> prev(batch.size(), -1);
  std::map<std::pair<std::string, int>, int> where;
  for (std::size_t i = 0; i < batch.size(); ++i) where[{batch[i]->trial_id, batch[i]->window_index}] = static_cast<int>(i);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto it = where.find({batch[i]->trial_id, batch[i]->window_index - 1});
    if (it != where.end()) prev[i] = it->second;
  }
  return prev;
}

loss::LossComponents set_loss(const std::vector<model::SlipEstimate>& pred,
                              const std::vector<data::WindowSample>& windows, const loss::LossConfig& cfg) {
  std::vector<double> p, mag;
  std::vector<Eigen::Vector2d> logits;
  std::vector<loss::SlipLabel> labels;
  std::vector<const data::WindowSample*> ptrs;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    p.push_back(pred[i].p_slip);
    mag.push_back(pred[i].magnitude);
    logits.push_back(pred[i].logits);
    labels.push_back(windows[i].label);
    ptrs.push_back(&windows[i]);
  }
  const auto prev = predecessors(ptrs);
  return loss::evaluate(p, mag, logits, labels, cfg, prev);
}

void accumulate(loss::LossComponents& acc, const loss::LossComponents& c) {
  // Window-weighted running sums; normalized in finish().
  acc.slip += c.slip * c.windows;
  acc.mag += c.mag * c.slip_windows;
  acc.dir += c.dir * c.slip_windows;
  acc.aux += c.aux * c.slip_windows;
  acc.smooth += c.smooth * c.smooth_windows;
  acc.windows += c.windows;
  acc.slip_windows += c.slip_windows;
  acc.smooth_windows += c.smooth_windows;
}

void finish(loss::LossComponents& acc, const loss::LossConfig& cfg) {
  if (acc.windows) acc.slip /= acc.windows;
  if (acc.slip_windows) {
    acc.mag /= acc.slip_windows;
    acc.dir /= acc.slip_windows;
    acc.aux /= acc.slip_windows;
  }
  if (acc.smooth_windows) acc.smooth /= acc.smooth_windows;
  acc.total = loss::weighted_total(acc, cfg.weights, cfg.aux_weight);
}

}  // namespace

std::string to_string(Stage s) { return s == Stage::Pretrain ? "pretrain" : "finetune"; }

Stage stage_from_string(const std::string& s) {
  if (s == "pretrain") return Stage::Pretrain;
  if (s == "finetune") return Stage::Finetune;
  throw ConfigError("unknown stage '" + s + "' (pretrain|finetune)");
}

void TrainConfig::validate() const {
  if (epochs_max < 1) throw ConfigError("epochs_max must be >= 1");
  if (patience < 1) throw ConfigError("patience must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
  if (weight_decay < 0.0) throw ConfigError("weight decay must be non-negative");
  if (!(rebalance_ratio > 0.0)) throw ConfigError("rebalance ratio must be positive");
  if (!(windows.window_ms > 0.0 && windows.hop_ms > 0.0 && windows.hop_ms <= windows.window_ms))
    throw ConfigError("window/hop must be positive with hop <= window");
  if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw ConfigError("val_fraction must be in [0, 1)");
}

double angle_deg(const Eigen::Vector2d& a, const Eigen::Vector2d& b) {
  return std::acos(std::clamp(a.dot(b), -1.0, 1.0)) * kRadToDeg;
}

// ---------------------------------------------------------------------------

std::vector<model::SlipEstimate> predict_windows(const Net& model, const std::vector<data::WindowSample>& windows) {
  std::vector<model::SlipEstimate> out;
  out.reserve(windows.size());
  for (const auto& w : windows) {
    ag::Tensor<float> x(ag::Shape{1, w.spectrogram.channel_count(), w.spectrogram.mel_bins(),
                                  w.spectrogram.time_frames()});
    model::write_input(w.spectrogram, x.values.data());
    out.push_back(model.predict_normalized(x));
  }
  return out;
}

Metrics compute_metrics(const std::vector<model::SlipEstimate>& pred, const std::vector<data::WindowSample>& windows) {
  if (pred.size() != windows.size()) throw UsageError("prediction and window counts differ");
  if (windows.empty()) throw InputError("cannot evaluate an empty set");
  Metrics m;
  m.windows = static_cast<int>(windows.size());
  int correct = 0;
  std::vector<double> errs, cond, mag_err;
  for (std::size_t i = 0; i < windows.size(); ++i) {
    const auto& l = windows[i].label;
    const auto& e = pred[i];
    if (e.is_slip() == l.is_slip) ++correct;
    if (!l.is_slip) continue;
    const double a = angle_deg(e.direction, l.d_star);
    errs.push_back(e.is_slip() ? a : 180.0);
    if (e.is_slip()) cond.push_back(a);
    mag_err.push_back(e.magnitude - l.magnitude());
  }
  auto mean_std = [](const std::vector<double>& v, double& mean, double& sd) {
    mean = sd = 0.0;
    if (v.empty()) return;
    mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    double s = 0.0;
    for (double x : v) s += (x - mean) * (x - mean);
    sd = std::sqrt(s / static_cast<double>(v.size()));
  };
  m.detection_accuracy = 100.0 * correct / static_cast<double>(windows.size());
  m.slip_windows = static_cast<int>(errs.size());
  m.conditional_windows = static_cast<int>(cond.size());
  mean_std(errs, m.direction_mae, m.direction_mae_std);
  mean_std(cond, m.conditional_mae, m.conditional_mae_std);
  if (!mag_err.empty()) {
    double sq = 0.0;
    std::vector<double> absd;
    for (double x : mag_err) {
      sq += x * x;
      absd.push_back(std::abs(x));
    }
    m.magnitude_rmse = std::sqrt(sq / static_cast<double>(mag_err.size()));
    double mean = 0.0;
    mean_std(absd, mean, m.magnitude_abs_std);
  }
  return m;
}

EvalReport evaluate(const std::vector<model::SlipEstimate>& pred, const std::vector<data::WindowSample>& windows,
                    const loss::LossConfig& loss_cfg) {
  EvalReport r;
  r.overall = compute_metrics(pred, windows);
  r.loss = set_loss(pred, windows, loss_cfg);
  std::map<std::string, std::vector<std::size_t>> noise, profile;
  for (std::size_t i = 0; i < windows.size(); ++i) {
    noise[sim::to_string(windows[i].noise)].push_back(i);
    profile[std::to_string(windows[i].surface_profile_id)].push_back(i);
  }
  auto subset = [&](const std::vector<std::size_t>& idx) {
    std::vector<model::SlipEstimate> p;
    std::vector<data::WindowSample> w;
    for (auto i : idx) {
      p.push_back(pred[i]);
      w.push_back(windows[i]);
    }
    return compute_metrics(p, w);
  };
  for (const auto& [k, idx] : noise) r.by_noise[k] = subset(idx);
  for (const auto& [k, idx] : profile) r.by_profile[k] = subset(idx);
  return r;
}

EvalReport evaluate(const Net& model, const std::vector<data::WindowSample>& windows, const loss::LossConfig& loss_cfg) {
  return evaluate(predict_windows(model, windows), windows, loss_cfg);
}

namespace {

void metrics_text(std::ostringstream& os, const std::string& prefix, const Metrics& m) {
  os << prefix << "windows = " << m.windows << '\n'
     << prefix << "slip_windows = " << m.slip_windows << '\n'
     << prefix << "detection_accuracy_pct = " << fixed(m.detection_accuracy, 2) << '\n'
     << prefix << "direction_mae_deg = " << fixed(m.direction_mae, 2) << " +- " << fixed(m.direction_mae_std, 2) << '\n'
     << prefix << "conditional_mae_deg = " << fixed(m.conditional_mae, 2) << " +- "
     << fixed(m.conditional_mae_std, 2) << " (" << m.conditional_windows << " windows)\n"
     << prefix << "magnitude_rmse_mm = " << fixed(m.magnitude_rmse, 3) << " +- " << fixed(m.magnitude_abs_std, 3)
     << '\n';
}

}  // namespace

std::string EvalReport::to_text() const {
  std::ostringstream os;
  os << "[overall]\n";
  metrics_text(os, "", overall);
  os << "loss_total = " << fixed(loss.total, 6) << "\nloss_slip = " << fixed(loss.slip, 6)
     << "\nloss_mag = " << fixed(loss.mag, 6) << "\nloss_dir = " << fixed(loss.dir, 6)
     << "\nloss_aux = " << fixed(loss.aux, 6) << "\nloss_smooth = " << fixed(loss.smooth, 6) << '\n';
  for (const auto& [k, m] : by_noise) {
    os << "\n[noise." << k << "]\n";
    metrics_text(os, "", m);
  }
  for (const auto& [k, m] : by_profile) {
    os << "\n[profile." << k << "]\n";
    metrics_text(os, "", m);
  }
  return os.str();
}

std::string EvalReport::csv_header() {
  return "label,windows,slip_windows,det_acc_pct,dir_mae_deg,dir_mae_std,cond_mae_deg,cond_mae_std,mag_rmse_mm,"
         "mag_abs_std,loss_total";
}

std::string EvalReport::csv_row(const std::string& label) const {
  const Metrics& m = overall;
  std::ostringstream os;
  os << label << ',' << m.windows << ',' << m.slip_windows << ',' << fixed(m.detection_accuracy, 3) << ','
     << fixed(m.direction_mae, 3) << ',' << fixed(m.direction_mae_std, 3) << ',' << fixed(m.conditional_mae, 3) << ','
     << fixed(m.conditional_mae_std, 3) << ',' << fixed(m.magnitude_rmse, 4) << ',' << fixed(m.magnitude_abs_std, 4)
     << ',' << fixed(loss.total, 6);
  return os.str();
}

std::string EpochRecord::to_line() const {
  std::ostringstream os;
  os << "epoch=" << epoch << " train_total=" << fmt(train.total) << " train_slip=" << fmt(train.slip)
     << " train_mag=" << fmt(train.mag) << " train_dir=" << fmt(train.dir) << " train_aux=" << fmt(train.aux)
     << " train_smooth=" << fmt(train.smooth) << " val_total=" << fmt(val.total)
     << " val_det=" << fixed(val_metrics.detection_accuracy, 3) << " val_mae=" << fixed(val_metrics.direction_mae, 3)
     << " val_cond_mae=" << fixed(val_metrics.conditional_mae, 3)
     << " val_rmse=" << fixed(val_metrics.magnitude_rmse, 4) << " improved=" << (improved ? 1 : 0);
  return os.str();
}

// ---------------------------------------------------------------------------

TrainResult train(Net model, const data::Corpus& corpus, const TrainConfig& cfg,
                  const std::function<void(const EpochRecord&)>& on_epoch) {
  cfg.validate();
  if (corpus.trials.empty()) throw InputError("training corpus is empty");
  TrainResult result;
  result.split = data::split_trials(corpus.trials.size(), cfg.val_fraction, derive_seed(cfg.seed, 0x5917));

  const bool finetune = cfg.stage == Stage::Finetune;
  if (!finetune) {
    model.norm_stats = data::corpus_norm_stats(corpus, result.split.train);
    model.set_encoder_trainable(true);
  } else {
    model.set_encoder_trainable(false);
  }
  const ag::Mode encoder_mode = finetune && !cfg.unfreeze_batchnorm ? ag::Mode::Eval : ag::Mode::Train;

  auto train_windows = data::corpus_windows(corpus, result.split.train, cfg.windows, model.norm_stats);
  const auto val_windows = data::corpus_windows(corpus, result.split.val, cfg.windows, model.norm_stats);
  if (train_windows.empty()) throw InputError("no training windows");
  if (train_windows.front().spectrogram.channel_count() != model.config().channel_count)
    throw UsageError("corpus channel count does not match the model");

  auto balanced = data::rebalance(std::move(train_windows), cfg.rebalance_ratio, cfg.rebalance,
                                  derive_seed(cfg.seed, 0xBA1A));
  train_windows = std::move(balanced.samples);
  result.pos_weight = balanced.pos_weight;
  loss::LossConfig loss_cfg = cfg.loss;
  loss_cfg.pos_weight = balanced.pos_weight;
  result.train_windows = static_cast<int>(train_windows.size());
  result.val_windows = static_cast<int>(val_windows.size());

  std::vector<ag::Parameter<float>*> trainable;
  for (auto* p : model.parameters()) {
    if (p->trainable) trainable.push_back(p);
  }
  result.optimizer.config.learning_rate = cfg.learning_rate;
  result.optimizer.config.weight_decay = cfg.weight_decay;

  double best = std::numeric_limits<double>::infinity();
  Snapshot best_state = Snapshot::take(model);
  int since_best = 0;
  const std::size_t n = train_windows.size();
  std::vector<std::size_t> order(n);

  for (int epoch = 1; epoch <= cfg.epochs_max; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle(derive_seed(cfg.seed, 0xE90C, static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[uniform_index(shuffle, i)]);

    loss::LossComponents acc;
    for (std::size_t b0 = 0; b0 < n; b0 += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t b1 = std::min(n, b0 + static_cast<std::size_t>(cfg.batch_size));
      std::vector<data::WindowSample> augmented;
      std::vector<const data::WindowSample*> batch;
      if (cfg.augment_enabled && !cfg.augment.identity()) {
        augmented.reserve(b1 - b0);
        for (std::size_t i = b0; i < b1; ++i) {
          augmented.push_back(data::augment(train_windows[order[i]], cfg.augment, model.norm_stats,
                                            derive_seed(cfg.seed, static_cast<std::uint64_t>(epoch), order[i])));
        }
        for (const auto& w : augmented) batch.push_back(&w);
      } else {
        for (std::size_t i = b0; i < b1; ++i) batch.push_back(&train_windows[order[i]]);
      }
      std::vector<loss::SlipLabel> labels;
      for (const auto* w : batch) labels.push_back(w->label);
      const auto prev = predecessors(batch);

      ag::Tape<float> tape;
      Rng dropout_rng(derive_seed(cfg.seed, 0xD0D0, static_cast<std::uint64_t>(epoch) * 1000003ULL + b0));
      const auto r = model.forward(tape, tape.constant(batch_input(batch)), encoder_mode, dropout_rng);
      loss::LossComponents comp;
      const auto total = loss::total_loss(tape, r.p_slip, r.magnitude, r.dir_logits, labels, loss_cfg, &comp, prev);
      for (auto* p : trainable) p->zero_grad();
      tape.backward(total);
      ag::adam_step<float>(trainable, result.optimizer);
      accumulate(acc, comp);
    }
    finish(acc, loss_cfg);

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train = acc;
    double monitored = acc.total;
    if (!val_windows.empty()) {
      const auto pred = predict_windows(model, val_windows);
      rec.val = set_loss(pred, val_windows, loss_cfg);
      rec.val_metrics = compute_metrics(pred, val_windows);
      monitored = rec.val.total;
    }
    if (monitored < best) {
      best = monitored;
      best_state = Snapshot::take(model);
      result.best_epoch = epoch;
      since_best = 0;
      rec.improved = true;
    } else {
      ++since_best;
    }
    result.history.push_back(rec);
    if (on_epoch) on_epoch(rec);
    if (since_best >= cfg.patience) break;
  }
  best_state.restore(model);
  result.best_val_loss = best;
  result.model = std::move(model);
  return result;
}

// ---------------------------------------------------------------------------

std::map<std::string, std::string> feature_provenance(const dsp::FeatureConfig& f, const data::WindowConfig& w) {
  return {{"sample_rate", fmt(f.sample_rate)},     {"mel_bins", std::to_string(f.mel_bins)},
          {"f_min", fmt(f.f_min)},                 {"f_max", fmt(f.f_max)},
          {"frame_ms", fmt(f.frame_ms)},           {"frame_hop_ms", fmt(f.hop_ms)},
          {"energy_floor", fmt(f.energy_floor)},   {"fft_size", std::to_string(f.fft_size)},
          {"window_ms", fmt(w.window_ms)},         {"window_hop_ms", fmt(w.hop_ms)},
          {"epsilon", fmt(w.epsilon)}};
}

namespace {

double num(const std::map<std::string, std::string>& p, const std::string& k) {
  const auto it = p.find(k);
  if (it == p.end()) throw FormatError("checkpoint provenance lacks '" + k + "'");
  double v = 0.0;
  const auto r = std::from_chars(it->second.data(), it->second.data() + it->second.size(), v);
  if (r.ec != std::errc()) throw FormatError("bad provenance value for '" + k + "'");
  return v;
}

}  // namespace

dsp::FeatureConfig features_from_provenance(const std::map<std::string, std::string>& p) {
  dsp::FeatureConfig f;
  f.sample_rate = num(p, "sample_rate");
  f.mel_bins = static_cast<int>(num(p, "mel_bins"));
  f.f_min = num(p, "f_min");
  f.f_max = num(p, "f_max");
  f.frame_ms = num(p, "frame_ms");
  f.hop_ms = num(p, "frame_hop_ms");
  f.energy_floor = num(p, "energy_floor");
  f.fft_size = static_cast<int>(num(p, "fft_size"));
  return f;
}

data::WindowConfig windows_from_provenance(const std::map<std::string, std::string>& p) {
  return {num(p, "window_ms"), num(p, "window_hop_ms"), num(p, "epsilon")};
}

// ---------------------------------------------------------------------------

std::string to_string(Regime r) {
  switch (r) {
    case Regime::Scratch: return "scratch";
    case Regime::PretrainOnly: return "pretrain_only";
    case Regime::Finetuned: return "finetuned";
  }
  return "scratch";
}

Regime regime_from_string(const std::string& s) {
  if (s == "scratch") return Regime::Scratch;
  if (s == "pretrain_only") return Regime::PretrainOnly;
  if (s == "finetuned") return Regime::Finetuned;
  throw ConfigError("unknown regime '" + s + "' (scratch|pretrain_only|finetuned)");
}

model::ModelConfig model_config_for(int channels, const dsp::FeatureConfig& features, double window_ms) {
  model::ModelConfig c;
  c.channel_count = channels;
  c.mel_bins = features.mel_bins;
  c.time_frames = static_cast<int>(features.frames_per_window(window_ms));
  c.validate();
  return c;
}

std::vector<AblationRow> ablation_grid(const AblationSpec& spec, const std::function<void(const AblationRow&)>& on_row) {
  std::map<std::string, data::Corpus> pre, tr, te;
  auto corpus_for = [&](std::map<std::string, data::Corpus>& cache, const sim::DatasetSpec& base,
                        const std::string& layout) -> const data::Corpus& {
    auto it = cache.find(layout);
    if (it == cache.end()) {
      sim::DatasetSpec s = base;
      s.layout = layout;
      it = cache.emplace(layout, data::synth_corpus(sim::plan_dataset(s), spec.features)).first;
    }
    return it->second;
  };

  std::vector<AblationRow> rows;
  for (const auto& cell : spec.cells) {
    const int channels = sim::MicLayout::named(cell.layout).size();
    const auto mcfg = model_config_for(channels, spec.features, cell.window_ms);
    const data::WindowConfig wc = spec.train_cfg.windows.resized(cell.window_ms);

    AblationRow row;
    row.cell = cell;
    Net net(mcfg, spec.model_seed);
    if (cell.regime != Regime::Scratch) {
      TrainConfig pc = spec.pretrain_cfg;
      pc.stage = Stage::Pretrain;
      pc.windows = wc;
      auto r = train(std::move(net), corpus_for(pre, spec.pretrain, cell.layout), pc);
      net = std::move(r.model);
      row.epochs += static_cast<int>(r.history.size());
      row.train_windows += r.train_windows;
    }
    if (cell.regime != Regime::PretrainOnly) {
      TrainConfig tc = spec.train_cfg;
      tc.stage = cell.regime == Regime::Finetuned ? Stage::Finetune : Stage::Pretrain;
      tc.windows = wc;
      auto r = train(std::move(net), corpus_for(tr, spec.train, cell.layout), tc);
      net = std::move(r.model);
      row.epochs += static_cast<int>(r.history.size());
      row.train_windows += r.train_windows;
    }
    const auto& test = corpus_for(te, spec.test, cell.layout);
    const auto windows = data::corpus_windows(test, data::all_trials(test), wc, net.norm_stats);
    row.report = evaluate(net, windows, spec.train_cfg.loss);
    if (on_row) on_row(row);
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string ablation_table(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << "layout,window_ms,regime,train_windows,epochs," << EvalReport::csv_header().substr(6) << '\n';
  for (const auto& r : rows) {
    const std::string row = r.report.csv_row("x");
    os << r.cell.layout << ',' << fmt(r.cell.window_ms) << ',' << to_string(r.cell.regime) << ',' << r.train_windows
       << ',' << r.epochs << ',' << row.substr(2) << '\n';
  }
  return os.str();
}

}  // namespace aslip::train
