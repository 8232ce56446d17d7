#include "aslip/config.hpp"

#include <charconv>
#include <fstream>
#include <set>
#include <sstream>

#include "aslip/error.hpp"

namespace aslip::config {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::string fmt_double(double x) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, r.ptr);
}

std::string where(const std::string& section, const std::string& key) { return section + "." + key; }

double parse_double(const std::string& v, const std::string& name) {
  double x = 0.0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), x);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) throw ConfigError(name + ": '" + v + "' is not a number");
  return x;
}

long long parse_int(const std::string& v, const std::string& name) {
  long long x = 0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), x);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) throw ConfigError(name + ": '" + v + "' is not an integer");
  return x;
}

std::uint64_t parse_u64(const std::string& v, const std::string& name) {
  std::uint64_t x = 0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), x);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size())
    throw ConfigError(name + ": '" + v + "' is not a non-negative integer");
  return x;
}

bool parse_bool(const std::string& v, const std::string& name) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError(name + ": '" + v + "' is not a boolean");
}

// A named setting with text conversions in both directions.
struct Field {
  std::string section, key;
  std::function<std::string()> get;
  std::function<void(const std::string&)> set;
};

class Fields {
 public:
  std::vector<Field> list;

  void add(const std::string& sec, const std::string& key, double& x) {
    list.push_back({sec, key, [&x] { return fmt_double(x); },
                    [&x, n = where(sec, key)](const std::string& v) { x = parse_double(v, n); }});
  }
  void add(const std::string& sec, const std::string& key, int& x) {
    list.push_back({sec, key, [&x] { return std::to_string(x); },
                    [&x, n = where(sec, key)](const std::string& v) { x = static_cast<int>(parse_int(v, n)); }});
  }
  void add(const std::string& sec, const std::string& key, std::uint64_t& x) {
    list.push_back({sec, key, [&x] { return std::to_string(x); },
                    [&x, n = where(sec, key)](const std::string& v) { x = parse_u64(v, n); }});
  }
  void add(const std::string& sec, const std::string& key, bool& x) {
    list.push_back({sec, key, [&x] { return std::string(x ? "true" : "false"); },
                    [&x, n = where(sec, key)](const std::string& v) { x = parse_bool(v, n); }});
  }
  void add(const std::string& sec, const std::string& key, std::string& x) {
    list.push_back({sec, key, [&x] { return x; }, [&x](const std::string& v) { x = v; }});
  }
  void add(const std::string& sec, const std::string& key, std::vector<int>& x) {
    list.push_back({sec, key,
                    [&x] {
                      std::string s;
                      for (std::size_t i = 0; i < x.size(); ++i) s += (i ? "," : "") + std::to_string(x[i]);
                      return s;
                    },
                    [&x, n = where(sec, key)](const std::string& v) {
                      x.clear();
                      for (const auto& item : split_list(v)) x.push_back(static_cast<int>(parse_int(item, n)));
                    }});
  }
  void add(const std::string& sec, const std::string& key, std::vector<double>& x) {
    list.push_back({sec, key,
                    [&x] {
                      std::string s;
                      for (std::size_t i = 0; i < x.size(); ++i) s += (i ? "," : "") + fmt_double(x[i]);
                      return s;
                    },
                    [&x, n = where(sec, key)](const std::string& v) {
                      x.clear();
                      for (const auto& item : split_list(v)) x.push_back(parse_double(item, n));
                    }});
  }
  void add(const std::string& sec, const std::string& key, std::vector<std::string>& x) {
    list.push_back({sec, key,
                    [&x] {
                      std::string s;
                      for (std::size_t i = 0; i < x.size(); ++i) s += (i ? "," : "") + x[i];
                      return s;
                    },
                    [&x](const std::string& v) { x = split_list(v); }});
  }
  template <typename E>
  void add_enum(const std::string& sec, const std::string& key, E& x, std::function<std::string(E)> to,
                std::function<E(const std::string&)> from) {
    list.push_back({sec, key, [&x, to] { return to(x); }, [&x, from](const std::string& v) { x = from(v); }});
  }
};

std::string kind_to_string(sim::DatasetKind k) {
  return k == sim::DatasetKind::RobotInduced ? "robot_induced" : "externally_induced";
}

sim::DatasetKind kind_from_string(const std::string& s) {
  if (s == "robot_induced") return sim::DatasetKind::RobotInduced;
  if (s == "externally_induced") return sim::DatasetKind::ExternallyInduced;
  throw ConfigError("unknown dataset kind '" + s + "' (robot_induced|externally_induced)");
}

void dataset_fields(Fields& f, const std::string& sec, sim::DatasetSpec& d) {
  f.add(sec, "name", d.name);
  f.add_enum<sim::DatasetKind>(sec, "kind", d.kind, kind_to_string, kind_from_string);
  f.add(sec, "layout", d.layout);
  f.add(sec, "trial_seconds", d.trial_seconds);
  f.add(sec, "target_slip_windows", d.target_slip_windows);
  f.add(sec, "max_trials", d.max_trials);
  f.add(sec, "noise_on_stationary", d.noise.on_stationary);
  f.add(sec, "noise_on_moving", d.noise.on_moving);
  f.add(sec, "noise_off", d.noise.off);
  f.add(sec, "profiles", d.profiles);
  f.add(sec, "speed_min", d.speed_min);
  f.add(sec, "speed_max", d.speed_max);
  f.add(sec, "decoy_rate", d.decoy_rate);
  f.add(sec, "rub_fraction", d.rub_fraction);
  f.add(sec, "noise_level_min", d.noise_level_min);
  f.add(sec, "noise_level_max", d.noise_level_max);
  f.add(sec, "sensor_noise_rms", d.synth.sensor_noise_rms);
  f.add(sec, "impact_level", d.synth.impact_level);
  f.add(sec, "seed", d.seed);
}

void train_fields(Fields& f, const std::string& sec, train::TrainConfig& t) {
  f.add(sec, "epochs_max", t.epochs_max);
  f.add(sec, "batch_size", t.batch_size);
  f.add(sec, "patience", t.patience);
  f.add(sec, "learning_rate", t.learning_rate);
  f.add(sec, "weight_decay", t.weight_decay);
  f.add(sec, "val_fraction", t.val_fraction);
  f.add(sec, "seed", t.seed);
  f.add(sec, "lambda_slip", t.loss.weights.slip);
  f.add(sec, "lambda_mag", t.loss.weights.mag);
  f.add(sec, "lambda_dir", t.loss.weights.dir);
  f.add(sec, "lambda_smooth", t.loss.weights.smooth);
  f.add(sec, "huber_delta", t.loss.huber_delta);
  f.add(sec, "aux_weight", t.loss.aux_weight);
  f.add(sec, "augment", t.augment_enabled);
  f.add(sec, "time_masks", t.augment.time_masks);
  f.add(sec, "time_mask_max", t.augment.time_mask_max);
  f.add(sec, "freq_masks", t.augment.freq_masks);
  f.add(sec, "freq_mask_max", t.augment.freq_mask_max);
  f.add(sec, "gain_jitter_db", t.augment.gain_jitter_db);
  f.add_enum<data::RebalanceMode>(
      sec, "rebalance", t.rebalance, [](data::RebalanceMode m) { return data::to_string(m); },
      data::rebalance_mode_from_string);
  f.add(sec, "rebalance_ratio", t.rebalance_ratio);
  if (t.stage == train::Stage::Finetune) f.add(sec, "unfreeze_batchnorm", t.unfreeze_batchnorm);
}

Fields all_fields(Settings& s) {
  Fields f;
  f.add("run", "seed", s.master_seed);

  f.add("features", "sample_rate", s.features.sample_rate);
  f.add("features", "mel_bins", s.features.mel_bins);
  f.add("features", "f_min", s.features.f_min);
  f.add("features", "f_max", s.features.f_max);
  f.add("features", "frame_ms", s.features.frame_ms);
  f.add("features", "hop_ms", s.features.hop_ms);
  f.add("features", "energy_floor", s.features.energy_floor);
  f.add("features", "fft_size", s.features.fft_size);

  f.add("windows", "window_ms", s.windows.window_ms);
  f.add("windows", "hop_ms", s.windows.hop_ms);
  f.add("windows", "epsilon", s.windows.epsilon);

  dataset_fields(f, "pretrain_data", s.pretrain_data);
  dataset_fields(f, "finetune_data", s.finetune_data);
  dataset_fields(f, "test_data", s.test_data);

  train_fields(f, "pretrain", s.pretrain);
  train_fields(f, "finetune", s.finetune);
  f.add("model", "seed", s.model_seed);

  f.add("stream", "window_ms", s.stream.window_ms);
  f.add("stream", "hop_ms", s.stream.hop_ms);
  f.add("stream", "queue_capacity", s.stream.queue_capacity);
  f.add_enum<stream::DropPolicy>(
      "stream", "drop_policy", s.stream.drop_policy, [](stream::DropPolicy p) { return stream::to_string(p); },
      stream::drop_policy_from_string);

  auto& t = s.task;
  f.add_enum<control::Task>(
      "task", "task", t.task, [](control::Task x) { return control::to_string(x); }, control::task_from_string);
  f.add("task", "layout", t.layout);
  f.add_enum<sim::RobotState>(
      "task", "noise", t.noise, [](sim::RobotState x) { return sim::to_string(x); }, sim::robot_state_from_string);
  f.add("task", "noise_level", t.noise_level);
  f.add_enum<sim::RobotState>(
      "task", "calibration_noise", t.calibration_noise, [](sim::RobotState x) { return sim::to_string(x); },
      sim::robot_state_from_string);
  f.add("task", "sensor_noise_rms", t.synth.sensor_noise_rms);
  f.add("task", "approach_speed", t.approach_speed);
  f.add("task", "debounce", t.debounce);
  f.add("task", "object_length", t.object_length);
  f.add("task", "hold_after_stop", t.hold_after_stop);
  f.add("task", "tracking_gain", t.tracking_gain);
  f.add("task", "command_limit", t.command_limit);
  f.add("task", "trials", s.task_trials);
  f.add("task", "seed", t.seed);

  f.add("ablate", "layouts", s.ablation.layouts);
  f.add("ablate", "windows_ms", s.ablation.windows_ms);
  f.add("ablate", "regimes", s.ablation.regimes);
  return f;
}

}  // namespace

// ---------------------------------------------------------------------------

RunConfig RunConfig::parse(const std::string& text, const std::string& origin) {
  RunConfig c;
  std::istringstream in(text);
  std::string line, section;
  int n = 0;
  while (std::getline(in, line)) {
    ++n;
    const auto hash = line.find_first_of("#;");
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::string at = origin + ":" + std::to_string(n) + ": ";
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(at + "unterminated section header");
      section = trim(line.substr(1, line.size() - 2));
      if (section.empty()) throw ConfigError(at + "empty section name");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(at + "expected 'key = value'");
    if (section.empty()) throw ConfigError(at + "key outside of any [section]");
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError(at + "empty key");
    if (c.has(section, key)) throw ConfigError(at + "duplicate key " + section + "." + key);
    c.set(section, key, trim(line.substr(eq + 1)));
  }
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path.string());
}

void RunConfig::set(const std::string& section, const std::string& key, const std::string& value) {
  sections_[section][key] = value;
}

void RunConfig::apply_override(const std::string& assignment) {
  const auto eq = assignment.find('=');
  const auto dot = assignment.find('.');
  if (eq == std::string::npos || dot == std::string::npos || dot > eq)
    throw UsageError("override must look like section.key=value: " + assignment);
  const std::string section = trim(assignment.substr(0, dot)), key = trim(assignment.substr(dot + 1, eq - dot - 1));
  if (section.empty() || key.empty()) throw UsageError("override must look like section.key=value: " + assignment);
  set(section, key, trim(assignment.substr(eq + 1)));
}

bool RunConfig::has(const std::string& section, const std::string& key) const {
  const auto it = sections_.find(section);
  return it != sections_.end() && it->second.count(key) > 0;
}

const std::string& RunConfig::get(const std::string& section, const std::string& key) const {
  if (!has(section, key)) throw ConfigError("missing key " + section + "." + key);
  return sections_.at(section).at(key);
}

std::string RunConfig::to_text() const {
  std::ostringstream os;
  bool first = true;
  for (const auto& [section, kv] : sections_) {
    if (!first) os << '\n';
    first = false;
    os << '[' << section << "]\n";
    for (const auto& [k, v] : kv) os << k << " = " << v << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------

sim::DatasetSpec Settings::test_default() {
  sim::DatasetSpec s = sim::DatasetSpec::finetune_default();
  s.name = "test";
  s.target_slip_windows = 1500;
  s.seed = 3;
  return s;
}

Settings::Settings() {
  pretrain.stage = train::Stage::Pretrain;
  finetune.stage = train::Stage::Finetune;
  // Gain jitter would hide the loudness cue that carries slip magnitude.
  pretrain.augment.gain_jitter_db = 0.0;
  finetune.augment.gain_jitter_db = 0.0;
  pretrain.epochs_max = 20;
  finetune.epochs_max = 30;
  pretrain.seed = 11;
  finetune.seed = 12;
  task.seed = 7;
  ablation.regimes = {"finetuned"};
}

Settings Settings::resolve(const RunConfig& raw) {
  Settings s;
  // Pass 1: the master seed moves every seed that is not set explicitly.
  if (raw.has("run", "seed")) {
    s.master_seed = parse_u64(raw.get("run", "seed"), "run.seed");
    const std::uint64_t m = s.master_seed;
    s.pretrain_data.seed += m;
    s.finetune_data.seed += m;
    s.test_data.seed += m;
    s.pretrain.seed += m;
    s.finetune.seed += m;
    s.model_seed += m;
    s.task.seed += m;
  }
  Fields fields = all_fields(s);
  std::set<std::string> known;
  for (const auto& f : fields.list) {
    known.insert(where(f.section, f.key));
    if (raw.has(f.section, f.key)) f.set(raw.get(f.section, f.key));
  }
  for (const auto& [section, kv] : raw.sections()) {
    for (const auto& [key, value] : kv) {
      if (!known.count(where(section, key))) throw ConfigError("unknown config key " + where(section, key));
    }
  }
  // Datasets, training and streaming share the analysis window.
  s.pretrain.windows = s.finetune.windows = s.windows;
  s.pretrain_data.window_ms = s.finetune_data.window_ms = s.test_data.window_ms = s.windows.window_ms;
  s.pretrain_data.hop_ms = s.finetune_data.hop_ms = s.test_data.hop_ms = s.windows.hop_ms;
  s.pretrain_data.epsilon = s.finetune_data.epsilon = s.test_data.epsilon = s.windows.epsilon;
  s.pretrain.loss.epsilon = s.finetune.loss.epsilon = s.windows.epsilon;
  s.task.stream = s.stream;
  for (auto* d : {&s.pretrain_data, &s.finetune_data, &s.test_data}) d->synth.sample_rate = s.features.sample_rate;
  s.task.synth.sample_rate = s.features.sample_rate;
  s.validate();
  return s;
}

RunConfig Settings::to_config() const {
  Settings copy = *this;
  RunConfig c;
  for (const auto& f : all_fields(copy).list) c.set(f.section, f.key, f.get());
  return c;
}

void Settings::validate() const {
  if (features.mel_bins < 1 || !(features.sample_rate > 0.0)) throw ConfigError("bad front-end settings");
  features.make_filterbank();
  for (const auto* d : {&pretrain_data, &finetune_data, &test_data}) {
    d->synth.validate();
    sim::MicLayout::named(d->layout);
  }
  pretrain.validate();
  finetune.validate();
  stream.validate();
  task.validate();
  if (task_trials < 0) throw ConfigError("task.trials must be non-negative");
  if (stream.window_ms != windows.window_ms)
    throw ConfigError("stream.window_ms must equal windows.window_ms (the model's window)");
  for (const auto& l : ablation.layouts) sim::MicLayout::named(l);
  for (const auto& r : ablation.regimes) train::regime_from_string(r);
}

void echo_config(const Settings& s, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream out(dir / "resolved_config.ini");
  if (!out) throw EnvironmentError("cannot write " + (dir / "resolved_config.ini").string());
  out << s.to_config().to_text();
}

}  // namespace aslip::config
