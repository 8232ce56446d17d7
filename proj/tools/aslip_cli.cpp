// aslip: simulate -> train (pretrain, finetune) -> eval / ablate -> infer / task.

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <sstream>

#include "aslip/config.hpp"
#include "aslip/controlsim.hpp"
#include "aslip/error.hpp"
#include "aslip/streaming.hpp"
#include "aslip/training.hpp"
#include "aslip/wav.hpp"

namespace fs = std::filesystem;
using namespace aslip;

namespace {

constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("-c,--config", c.config_path, "Run configuration file (INI-style)")->check(CLI::ExistingFile);
  app->add_option("-s,--set", c.overrides, "Override a setting: section.key=value (repeatable)");
}

config::Settings settings_from(const Common& c) {
  auto raw = c.config_path.empty() ? config::RunConfig{} : config::RunConfig::load(c.config_path);
  for (const auto& o : c.overrides) raw.apply_override(o);
  return config::Settings::resolve(raw);
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw EnvironmentError("cannot write " + path.string());
  out << text;
}

std::string hex(std::uint64_t x) {
  std::ostringstream os;
  os << std::hex << x;
  return os.str();
}

fs::path manifest_path(const fs::path& data) {
  return fs::is_directory(data) ? data / "manifest.txt" : data;
}

// ---------------------------------------------------------------------------

int cmd_simulate(const Common& common, const fs::path& out, bool dry_run) {
  const auto s = settings_from(common);
  const std::vector<std::pair<std::string, const sim::DatasetSpec*>> sets{
      {"pretrain", &s.pretrain_data}, {"finetune", &s.finetune_data}, {"test", &s.test_data}};
  std::cout << "dataset,trials,windows,slip_windows,seconds" << (dry_run ? "" : ",digest") << '\n';
  for (const auto& [name, spec] : sets) {
    const auto plans = sim::plan_dataset(*spec);
    long windows = 0, slip = 0;
    double seconds = 0.0;
    for (const auto& p : plans) {
      windows += data::window_count(std::lround(p.duration * p.synth.sample_rate), p.synth.sample_rate,
                                    spec->window_ms, spec->hop_ms);
      slip += sim::count_slip_windows(p, spec->window_ms, spec->hop_ms, spec->epsilon);
      seconds += p.duration;
    }
    std::cout << name << ',' << plans.size() << ',' << windows << ',' << slip << ',' << seconds;
    if (!dry_run) {
      const auto manifest = sim::make_dataset(*spec, out / name);
      std::cout << ',' << hex(manifest.digest());
    }
    std::cout << '\n';
  }
  if (!dry_run) config::echo_config(s, out);
  return 0;
}

int cmd_train(const Common& common, const std::string& stage_name, const fs::path& data_dir,
              const std::string& base, const fs::path& out) {
  const auto stage = train::stage_from_string(stage_name);
  if (stage == train::Stage::Finetune && base.empty()) throw UsageError("finetune needs --base <pretrain checkpoint>");
  if (stage == train::Stage::Pretrain && !base.empty()) throw UsageError("--base only applies to --stage finetune");
  const auto s = settings_from(common);
  const auto manifest = sim::Manifest::read(manifest_path(data_dir));
  if (manifest.entries.empty()) throw InputError("dataset has no trials");
  const int channels = sim::MicLayout::named(manifest.entries.front().layout).size();

  train::TrainConfig tc = stage == train::Stage::Pretrain ? s.pretrain : s.finetune;
  train::Net net;
  dsp::FeatureConfig features = s.features;
  if (stage == train::Stage::Finetune) {
    auto ck = train::load_checkpoint(base);
    features = train::features_from_provenance(ck.provenance);
    tc.windows = train::windows_from_provenance(ck.provenance);
    net = std::move(ck.model);
  } else {
    net = train::Net(train::model_config_for(channels, features, tc.windows.window_ms), s.model_seed);
  }
  const auto corpus = data::load_corpus(manifest, features);

  fs::create_directories(out);
  std::ofstream log(out / "epochs.log");
  if (!log) throw EnvironmentError("cannot write " + (out / "epochs.log").string());
  auto result = train::train(std::move(net), corpus, tc, [&](const train::EpochRecord& r) {
    log << r.to_line() << '\n';
    log.flush();
    std::cerr << r.to_line() << '\n';
  });

  auto prov = train::feature_provenance(features, tc.windows);
  prov["stage"] = train::to_string(stage);
  prov["seed"] = std::to_string(tc.seed);
  prov["val_fraction"] = std::to_string(tc.val_fraction);
  prov["best_epoch"] = std::to_string(result.best_epoch);
  prov["best_val_loss"] = std::to_string(result.best_val_loss);
  prov["dataset_digest"] = hex(manifest.digest());
  if (!base.empty()) prov["base_digest"] = hex(train::file_digest(base));
  train::save_checkpoint(out / "model.ckpt", result.model, prov, &result.optimizer);

  if (!result.split.val.empty()) {
    const auto val = data::corpus_windows(corpus, result.split.val, tc.windows, result.model.norm_stats);
    const auto report = train::evaluate(result.model, val, tc.loss);
    write_text(out / "val_report.txt", report.to_text());
    log << "final best_epoch=" << result.best_epoch << ' ' << report.csv_row("val") << '\n';
  }
  config::echo_config(s, out);
  std::cout << "checkpoint " << (out / "model.ckpt").string() << " best_epoch " << result.best_epoch << " digest "
            << hex(train::file_digest(out / "model.ckpt")) << '\n';
  return 0;
}

int cmd_eval(const std::string& checkpoint, const fs::path& data_dir, const std::string& split,
             const std::string& report_path, const std::string& predictions_path) {
  const auto ck = train::load_checkpoint(checkpoint);
  const auto features = train::features_from_provenance(ck.provenance);
  const auto windows_cfg = train::windows_from_provenance(ck.provenance);
  const auto manifest = sim::Manifest::read(manifest_path(data_dir));
  const auto corpus = data::load_corpus(manifest, features);

  std::vector<std::size_t> trials = data::all_trials(corpus);
  if (split == "val") {
    // Same split as training: recorded seed and fraction.
    const auto seed = std::stoull(ck.provenance.at("seed"));
    const double fraction = std::stod(ck.provenance.at("val_fraction"));
    trials = data::split_trials(corpus.trials.size(), fraction, derive_seed(seed, 0x5917)).val;
  } else if (split != "all") {
    throw UsageError("--split must be all or val");
  }
  const auto windows = data::corpus_windows(corpus, trials, windows_cfg, ck.model.norm_stats);
  const auto pred = train::predict_windows(ck.model, windows);
  const auto report = train::evaluate(pred, windows);
  if (!report_path.empty()) {
    write_text(report_path, report.to_text());
    write_text(fs::path(report_path).replace_extension(".csv"),
               train::EvalReport::csv_header() + "\n" + report.csv_row(split) + "\n");
  }
  if (!predictions_path.empty()) {
    std::ostringstream os;
    os.precision(9);
    os << "trial_id,window_index,t_end,p_slip,v_x,v_z\n";
    for (std::size_t i = 0; i < windows.size(); ++i) {
      os << windows[i].trial_id << ',' << windows[i].window_index << ','
         << windows[i].t_begin + windows_cfg.window_ms / 1000.0 << ',' << pred[i].p_slip << ',' << pred[i].vector.x()
         << ',' << pred[i].vector.y() << '\n';
    }
    write_text(predictions_path, os.str());
  }
  std::cout << report.to_text();
  return 0;
}

int cmd_ablate(const Common& common, const fs::path& out) {
  const auto s = settings_from(common);
  train::AblationSpec spec;
  spec.pretrain = s.pretrain_data;
  spec.train = s.finetune_data;
  spec.test = s.test_data;
  spec.pretrain_cfg = s.pretrain;
  spec.train_cfg = s.finetune;
  spec.features = s.features;
  spec.model_seed = s.model_seed;
  for (const auto& layout : s.ablation.layouts) {
    for (double w : s.ablation.windows_ms) {
      for (const auto& r : s.ablation.regimes) spec.cells.push_back({layout, w, train::regime_from_string(r)});
    }
  }
  const auto rows = train::ablation_grid(spec, [](const train::AblationRow& r) {
    std::cerr << "done " << r.cell.layout << ' ' << r.cell.window_ms << " ms " << train::to_string(r.cell.regime)
              << '\n';
  });
  const auto table = train::ablation_table(rows);
  write_text(out / "ablation.csv", table);
  config::echo_config(s, out);
  std::cout << table;
  return 0;
}

int cmd_infer(const std::string& checkpoint, const std::string& source_arg, const std::string& out_path,
              const Common& common) {
  const auto s = settings_from(common);
  const auto ck = train::load_checkpoint(checkpoint);
  const auto features = train::features_from_provenance(ck.provenance);
  stream::StreamConfig sc = s.stream;
  sc.window_ms = train::windows_from_provenance(ck.provenance).window_ms;

  std::unique_ptr<stream::AudioSource> source;
  std::ifstream raw_file;
  if (source_arg == "-") {
    source = std::make_unique<stream::RawPipeSource>(std::cin);
  } else if (fs::path(source_arg).extension() == ".raw") {
    raw_file.open(source_arg, std::ios::binary);
    if (!raw_file) throw InputError("cannot open " + source_arg);
    source = std::make_unique<stream::RawPipeSource>(raw_file);
  } else {
    source = stream::open_wav_source(source_arg);
  }

  std::ofstream file;
  if (!out_path.empty()) {
    file.open(out_path);
    if (!file) throw EnvironmentError("cannot write " + out_path);
  }
  std::ostream& out = out_path.empty() ? std::cout : file;
  out << "# t p_slip v_x v_z latency_ms\n";
  const auto stats = stream::run_stream(*source, ck.model, features, sc,
                                        [&](const stream::EstimateEvent& e) { out << e.to_line() << '\n'; });
  std::cerr << "events " << stats.events << " dropped " << stats.dropped << " gaps " << stats.gap_events
            << " real_time_factor " << stats.real_time_factor() << " max_compute_ms " << stats.max_compute_ms << '\n';
  return 0;
}

int cmd_task(const Common& common, const std::string& checkpoint, const std::string& task_name,
             const std::string& detector_name, int trials_override, const fs::path& out) {
  auto s = settings_from(common);
  control::TaskConfig base = s.task;
  if (!task_name.empty()) base.task = control::task_from_string(task_name);
  const int trials = trials_override >= 0 ? trials_override : s.task_trials;

  std::optional<train::Checkpoint> ck;
  std::unique_ptr<control::Detector> detector;
  if (detector_name == "model") {
    if (checkpoint.empty()) throw UsageError("--detector model needs --checkpoint");
    ck = train::load_checkpoint(checkpoint);
    base.stream.window_ms = train::windows_from_provenance(ck->provenance).window_ms;
    detector = std::make_unique<control::ModelDetector>(ck->model, train::features_from_provenance(ck->provenance),
                                                        base.stream.window_ms);
  } else if (detector_name == "oracle") {
    detector = std::make_unique<control::OracleDetector>(s.windows.epsilon);
  } else if (detector_name == "none") {
    detector = std::make_unique<control::NullDetector>();
  } else if (detector_name != "baseline") {
    throw UsageError("--detector must be model, baseline, oracle or none");
  }

  fs::create_directories(out / "traces");
  std::ostringstream rows;
  rows << control::TaskResult::row_header() << '\n';
  std::vector<control::TaskResult> results;
  const auto configs = control::make_trials(base, trials, base.seed);
  for (std::size_t i = 0; i < configs.size(); ++i) {
    std::unique_ptr<control::EnergyThresholdBaseline> baseline;
    control::Detector* d = detector.get();
    if (detector_name == "baseline") {
      const auto layout = sim::MicLayout::named(configs[i].layout);
      baseline = std::make_unique<control::EnergyThresholdBaseline>(layout, configs[i].synth.sample_rate,
                                                                      configs[i].synth.alpha);
      baseline->calibrate(control::no_slip_recording(configs[i], 10.0, derive_seed(configs[i].seed, 99)),
                          configs[i].stream.window_ms, configs[i].stream.hop_ms);
      d = baseline.get();
    }
    auto r = control::run_task(*d, configs[i]);
    write_text(out / "traces" / ("trial_" + std::to_string(i) + ".csv"), r.trace_csv());
    rows << r.row(static_cast<int>(i)) << '\n';
    results.push_back(std::move(r));
  }
  const auto summary = control::summarize(results);
  write_text(out / "trials.csv", rows.str());
  write_text(out / "summary.txt", summary.to_text());
  config::echo_config(s, out);
  std::cout << rows.str() << "summary," << summary.detector << ',' << summary.successes << '/' << summary.trials << ','
            << summary.delta_x_mean << ',' << summary.rmse_mean << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acoustic slip estimation: simulation, training, evaluation, streaming and closed-loop tasks"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Help for every subcommand");

  Common sim_c, train_c, ablate_c, infer_c, task_c;
  std::string out = "out", data, base, stage = "pretrain", checkpoint, report, predictions, split = "all",
              source, task_name, detector = "model";
  bool dry_run = false;
  int trials = -1;

  auto* sim_cmd = app.add_subcommand("simulate", "Synthesize the pretrain, finetune and test datasets");
  add_common(sim_cmd, sim_c);
  sim_cmd->add_option("-o,--out", out, "Output directory")->capture_default_str();
  sim_cmd->add_flag("--dry-run", dry_run, "Print planned counts, write nothing");

  auto* train_cmd = app.add_subcommand("train", "Train one stage and write a checkpoint");
  add_common(train_cmd, train_c);
  train_cmd->add_option("--stage", stage, "pretrain or finetune")
      ->check(CLI::IsMember({"pretrain", "finetune"}))
      ->capture_default_str();
  train_cmd->add_option("-d,--data", data, "Dataset directory (with manifest.txt)")->required();
  train_cmd->add_option("--base", base, "Pretrain checkpoint (finetune only)");
  train_cmd->add_option("-o,--out", out, "Output directory")->capture_default_str();

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  eval_cmd->add_option("--checkpoint", checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("-d,--data", data, "Dataset directory")->required();
  eval_cmd->add_option("--split", split, "all, or val (the checkpoint's own validation trials)")
      ->check(CLI::IsMember({"all", "val"}))
      ->capture_default_str();
  eval_cmd->add_option("--report", report, "Write the report here (and a .csv row next to it)");
  eval_cmd->add_option("--predictions", predictions, "Write per-window predictions (CSV)");

  auto* ablate_cmd = app.add_subcommand("ablate", "Train and evaluate the layout/window/regime grid");
  add_common(ablate_cmd, ablate_c);
  ablate_cmd->add_option("-o,--out", out, "Output directory")->capture_default_str();

  auto* infer_cmd = app.add_subcommand("infer", "Stream inference over a WAV file or raw pipe");
  add_common(infer_cmd, infer_c);
  infer_cmd->add_option("--checkpoint", checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  infer_cmd->add_option("--stream", source, "WAV file, .raw file, or - for a raw pipe on stdin")->required();
  infer_cmd->add_option("-o,--out", out, "Event output file (default: stdout)");

  auto* task_cmd = app.add_subcommand("task", "Closed-loop slip-stop / slip-track trials");
  add_common(task_cmd, task_c);
  task_cmd->add_option("--task", task_name, "slip-stop or slip-track (default: task.task)")
      ->check(CLI::IsMember({"slip-stop", "slip-track"}));
  task_cmd->add_option("--checkpoint", checkpoint, "Checkpoint file (detector model)");
  task_cmd->add_option("--detector", detector, "model, baseline, oracle or none")
      ->check(CLI::IsMember({"model", "baseline", "oracle", "none"}))
      ->capture_default_str();
  task_cmd->add_option("--trials", trials, "Number of trials (default: task.trials)");
  task_cmd->add_option("-o,--out", out, "Output directory")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (*sim_cmd) return cmd_simulate(sim_c, out, dry_run);
    if (*train_cmd) return cmd_train(train_c, stage, data, base, out);
    if (*eval_cmd) return cmd_eval(checkpoint, data, split, report, predictions);
    if (*ablate_cmd) return cmd_ablate(ablate_c, out);
    if (*infer_cmd) return cmd_infer(checkpoint, source, infer_cmd->count("--out") ? out : "", infer_c);
    if (*task_cmd) return cmd_task(task_c, checkpoint, task_name, detector, trials, out);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitUsage;
}
