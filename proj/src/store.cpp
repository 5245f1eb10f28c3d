#include "iclb/store.hpp"

#include <array>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

namespace iclb {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

void check_keys(const json& j, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw FormatError("config: '" + where + "' must be an object");
  std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [key, value] : j.items()) {
    if (!ok.count(key)) throw FormatError("config: unknown key '" + where + "." + key + "'");
  }
}

template <typename T>
void read_opt(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw FormatError("config: bad value for '" + where + "." + key + "'");
  }
}

std::string schedule_name(Schedule s) { return s == Schedule::Sequential ? "sequential" : "simultaneous"; }

Schedule schedule_from_name(const std::string& s) {
  if (s == "sequential") return Schedule::Sequential;
  if (s == "simultaneous") return Schedule::Simultaneous;
  throw FormatError("config: unknown schedule '" + s + "'");
}

// --- little-endian primitives ---------------------------------------------

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

class Reader {
 public:
  Reader(std::string bytes, std::string path) : bytes_(std::move(bytes)), path_(std::move(path)) {}

  template <typename T>
  T get() {
    T v;
    need(sizeof(T));
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string str(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  void floats(float* dst, std::size_t n) {
    if (n > (bytes_.size() - pos_) / sizeof(float)) need(bytes_.size() - pos_ + 1);
    std::memcpy(dst, bytes_.data() + pos_, n * sizeof(float));
    pos_ += n * sizeof(float);
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw FormatError("checkpoint " + path_ + ": truncated");
  }

  std::string bytes_;
  std::string path_;
  std::size_t pos_ = 0;
};

fs::path sidecar_path(const fs::path& p) {
  fs::path s = p;
  s += ".json";
  return s;
}

std::string csv_row(const ReportRow& r) {
  std::string s = r.attack + "," + r.eval_task + "," + metric_name(r.metric) + "," +
                  (r.triggered ? "true" : "false") + "," + format_fixed2(r.raw) + ",";
  if (r.delta) s += format_fixed2(*r.delta);
  return s;
}

}  // namespace

// --- attack mode ----------------------------------------------------------

std::string attack_mode_name(AttackMode m) {
  switch (m) {
    case AttackMode::TaskSpecific: return "task-specific";
    case AttackMode::TaskAgnostic: return "task-agnostic";
    case AttackMode::NewTask: return "new-task";
  }
  return "task-specific";
}

AttackMode attack_mode_from_name(const std::string& s) {
  if (s == "task-specific") return AttackMode::TaskSpecific;
  if (s == "task-agnostic") return AttackMode::TaskAgnostic;
  if (s == "new-task") return AttackMode::NewTask;
  throw FormatError("config: unknown attack mode '" + s + "'");
}

// --- run config -------------------------------------------------------------

RunConfig RunConfig::defaults() {
  RunConfig cfg;
  cfg.experiment.attack.tasks = {"segmentation"};
  cfg.experiment.attack.epsilon = 0.25;
  return cfg;
}

void RunConfig::override_seed(std::uint64_t seed) {
  experiment.data_seed = seed;
  experiment.train_seed = seed;
  experiment.attack.seed = seed;
  experiment.model.seed = seed;
}

void RunConfig::validate() const {
  experiment.validate();
  experiment.attack.validate();
  for (const auto& t : experiment.attack.tasks) find_task(t);
  if (attack_mode == AttackMode::TaskSpecific && experiment.attack.tasks.size() != 1) {
    throw FormatError("config: task-specific attack needs exactly one task");
  }
  if (attack_mode == AttackMode::TaskAgnostic && experiment.attack.tasks.size() < 2) {
    throw FormatError("config: task-agnostic attack needs at least two tasks");
  }
  for (double f : defense.fractions) {
    if (!(f > 0.0 && f <= 1.0)) throw FormatError("config: defense fractions must lie in (0,1]");
  }
  if (defense.epochs < 1) throw FormatError("config: defense.epochs must be positive");
  if (!defense.sweep_task.empty()) find_task(defense.sweep_task);
  if (blend.alpha_step <= 0.0 || blend.alpha_step > 1.0) throw FormatError("config: blend alpha_step must lie in (0,1]");
}

json model_config_to_json(const ModelConfig& m) {
  return {{"panel", m.panel},   {"patch", m.patch},           {"dim", m.dim},
          {"heads", m.heads},   {"depth", m.depth},           {"head_depth", m.head_depth},
          {"mlp_ratio", m.mlp_ratio}, {"mask_ratio", m.mask_ratio}, {"source_skip", m.source_skip},
          {"seed", m.seed}};
}

ModelConfig model_config_from_json(const json& j) {
  check_keys(j, "model", {"panel", "patch", "dim", "heads", "depth", "head_depth", "mlp_ratio", "mask_ratio",
                          "source_skip", "seed"});
  ModelConfig m;
  read_opt(j, "panel", m.panel, "model");
  read_opt(j, "patch", m.patch, "model");
  read_opt(j, "dim", m.dim, "model");
  read_opt(j, "heads", m.heads, "model");
  read_opt(j, "depth", m.depth, "model");
  read_opt(j, "head_depth", m.head_depth, "model");
  read_opt(j, "mlp_ratio", m.mlp_ratio, "model");
  read_opt(j, "mask_ratio", m.mask_ratio, "model");
  read_opt(j, "source_skip", m.source_skip, "model");
  read_opt(j, "seed", m.seed, "model");
  return m;
}

json run_config_to_json(const RunConfig& cfg) {
  const auto& e = cfg.experiment;
  json sizes = json::object();
  for (const auto& [task, s] : e.corpus_sizes) sizes[task] = {{"train", s.train}, {"test", s.test}};
  json model = model_config_to_json(e.model);
  model.erase("seed");
  const auto& t = e.training;
  const auto& a = e.attack;
  const auto& b = cfg.blend;
  return {
      {"model", model},
      {"tasks", {{"corpus_sizes", sizes}}},
      {"training",
       {{"lr", t.lr}, {"warmup_epochs", t.warmup_epochs}, {"final_lr_fraction", t.final_lr_fraction},
        {"batch_size", t.batch_size}, {"infer_mask_fraction", t.infer_mask_fraction},
        {"finetune_lr", t.finetune_lr}, {"finetune_batch_size", t.finetune_batch_size},
        {"epochs", e.baseline_epochs}}},
      {"attack",
       {{"mode", attack_mode_name(cfg.attack_mode)}, {"tasks", a.tasks}, {"epsilon", a.epsilon},
        {"schedule", schedule_name(a.schedule)},
        {"trigger", {{"color", a.trigger.color}, {"size_fraction", a.trigger.size_fraction}}},
        {"epoch_cap", e.injection_epoch_cap}, {"threshold", e.early_stop_threshold}}},
      {"defense", {{"fractions", cfg.defense.fractions}, {"epochs", cfg.defense.epochs},
                   {"sweep_task", cfg.defense.sweep_task}}},
      {"evaluation",
       {{"tau", e.tau},
        {"blend", {{"train_size", b.train_size}, {"test_size", b.test_size}, {"hidden", b.hidden},
                   {"epochs", b.epochs}, {"lr", b.lr}, {"seed", b.seed}, {"alpha_step", b.alpha_step}}}}},
      {"seeds", {{"data", e.data_seed}, {"train", e.train_seed}, {"poison", a.seed}, {"model", e.model.seed}}},
      {"output", {{"dir", cfg.output_dir}}}};
}

RunConfig run_config_from_json(const json& j) {
  check_keys(j, "", {"model", "tasks", "training", "attack", "defense", "evaluation", "seeds", "output"});
  RunConfig cfg = RunConfig::defaults();
  auto& e = cfg.experiment;

  if (j.contains("model")) {
    const std::uint64_t seed = e.model.seed;
    e.model = model_config_from_json(j.at("model"));
    if (!j.at("model").contains("seed")) e.model.seed = seed;
  }
  if (j.contains("tasks")) {
    const auto& t = j.at("tasks");
    check_keys(t, "tasks", {"corpus_sizes"});
    if (t.contains("corpus_sizes")) {
      const auto& cs = t.at("corpus_sizes");
      if (!cs.is_object()) throw FormatError("config: 'tasks.corpus_sizes' must be an object");
      for (const auto& [task, v] : cs.items()) {
        if (!e.corpus_sizes.count(task)) throw FormatError("config: unknown key 'tasks.corpus_sizes." + task + "'");
        const std::string where = "tasks.corpus_sizes." + task;
        check_keys(v, where, {"train", "test"});
        read_opt(v, "train", e.corpus_sizes[task].train, where);
        read_opt(v, "test", e.corpus_sizes[task].test, where);
      }
    }
  }
  if (j.contains("training")) {
    const auto& t = j.at("training");
    check_keys(t, "training", {"lr", "warmup_epochs", "final_lr_fraction", "batch_size", "infer_mask_fraction",
                               "finetune_lr", "finetune_batch_size", "epochs"});
    auto& tc = e.training;
    read_opt(t, "lr", tc.lr, "training");
    read_opt(t, "warmup_epochs", tc.warmup_epochs, "training");
    read_opt(t, "final_lr_fraction", tc.final_lr_fraction, "training");
    read_opt(t, "batch_size", tc.batch_size, "training");
    read_opt(t, "infer_mask_fraction", tc.infer_mask_fraction, "training");
    read_opt(t, "finetune_lr", tc.finetune_lr, "training");
    read_opt(t, "finetune_batch_size", tc.finetune_batch_size, "training");
    read_opt(t, "epochs", e.baseline_epochs, "training");
  }
  if (j.contains("attack")) {
    const auto& a = j.at("attack");
    check_keys(a, "attack", {"mode", "tasks", "epsilon", "schedule", "trigger", "epoch_cap", "threshold"});
    std::string mode = attack_mode_name(cfg.attack_mode), schedule = schedule_name(e.attack.schedule);
    read_opt(a, "mode", mode, "attack");
    cfg.attack_mode = attack_mode_from_name(mode);
    read_opt(a, "tasks", e.attack.tasks, "attack");
    read_opt(a, "epsilon", e.attack.epsilon, "attack");
    read_opt(a, "schedule", schedule, "attack");
    e.attack.schedule = schedule_from_name(schedule);
    read_opt(a, "epoch_cap", e.injection_epoch_cap, "attack");
    read_opt(a, "threshold", e.early_stop_threshold, "attack");
    if (a.contains("trigger")) {
      const auto& tr = a.at("trigger");
      check_keys(tr, "attack.trigger", {"color", "size_fraction"});
      read_opt(tr, "color", e.attack.trigger.color, "attack.trigger");
      read_opt(tr, "size_fraction", e.attack.trigger.size_fraction, "attack.trigger");
    }
  }
  if (j.contains("defense")) {
    const auto& d = j.at("defense");
    check_keys(d, "defense", {"fractions", "epochs", "sweep_task"});
    read_opt(d, "fractions", cfg.defense.fractions, "defense");
    read_opt(d, "epochs", cfg.defense.epochs, "defense");
    read_opt(d, "sweep_task", cfg.defense.sweep_task, "defense");
  }
  if (j.contains("evaluation")) {
    const auto& ev = j.at("evaluation");
    check_keys(ev, "evaluation", {"tau", "blend"});
    read_opt(ev, "tau", e.tau, "evaluation");
    if (ev.contains("blend")) {
      const auto& b = ev.at("blend");
      check_keys(b, "evaluation.blend", {"train_size", "test_size", "hidden", "epochs", "lr", "seed", "alpha_step"});
      read_opt(b, "train_size", cfg.blend.train_size, "evaluation.blend");
      read_opt(b, "test_size", cfg.blend.test_size, "evaluation.blend");
      read_opt(b, "hidden", cfg.blend.hidden, "evaluation.blend");
      read_opt(b, "epochs", cfg.blend.epochs, "evaluation.blend");
      read_opt(b, "lr", cfg.blend.lr, "evaluation.blend");
      read_opt(b, "seed", cfg.blend.seed, "evaluation.blend");
      read_opt(b, "alpha_step", cfg.blend.alpha_step, "evaluation.blend");
    }
  }
  if (j.contains("seeds")) {
    const auto& s = j.at("seeds");
    check_keys(s, "seeds", {"data", "train", "poison", "model"});
    read_opt(s, "data", e.data_seed, "seeds");
    read_opt(s, "train", e.train_seed, "seeds");
    read_opt(s, "poison", e.attack.seed, "seeds");
    read_opt(s, "model", e.model.seed, "seeds");
  }
  if (j.contains("output")) {
    const auto& o = j.at("output");
    check_keys(o, "output", {"dir"});
    read_opt(o, "dir", cfg.output_dir, "output");
  }
  try {
    cfg.validate();
  } catch (const FormatError&) {
    throw;
  } catch (const std::exception& ex) {
    throw FormatError(std::string("config: ") + ex.what());
  }
  return cfg;
}

RunConfig load_run_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read config file " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& ex) {
    throw FormatError("config " + path.string() + ": " + ex.what());
  }
  return run_config_from_json(j);
}

// --- checkpoints ------------------------------------------------------------

void save_checkpoint(const Model<float>& model, const fs::path& path, const json& metadata) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ostringstream os(std::ios::binary);
  os.write("ICLB", 4);
  put<std::uint32_t>(os, kCheckpointVersion);
  put<std::uint64_t>(os, model.config().digest());
  const auto params = model.parameters();
  put<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
  for (const auto* p : params) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(p->name.size()));
    os.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(p->value.shape.size()));
    for (auto d : p->value.shape) put<std::uint64_t>(os, d);
    os.write(reinterpret_cast<const char*>(p->value.data.data()),
             static_cast<std::streamsize>(p->value.data.size() * sizeof(float)));
  }
  write_text(path, os.str());

  json side = metadata.is_object() ? metadata : json::object();
  side["model"] = model_config_to_json(model.config());
  side["format_version"] = kCheckpointVersion;
  write_text(sidecar_path(path), side.dump(2) + "\n");
}

Model<float> load_checkpoint(const fs::path& path, const ModelConfig& config) {
  Reader r(read_text(path), path.string());
  const std::string where = "checkpoint " + path.string();
  if (r.str(4) != "ICLB") throw FormatError(where + ": bad magic");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) throw FormatError(where + ": unsupported version " + std::to_string(version));
  if (r.get<std::uint64_t>() != config.digest()) throw FormatError(where + ": config digest mismatch");

  Model<float> model(config);
  auto params = model.parameters();
  const auto count = r.get<std::uint32_t>();
  if (count != params.size()) {
    throw FormatError(where + ": expected " + std::to_string(params.size()) + " tensors, found " + std::to_string(count));
  }
  for (auto* p : params) {
    const auto name = r.str(r.get<std::uint32_t>());
    if (name != p->name) throw FormatError(where + ": unexpected tensor '" + name + "', wanted '" + p->name + "'");
    Shape shape(r.get<std::uint32_t>());
    for (auto& d : shape) d = r.get<std::uint64_t>();
    if (shape != p->value.shape) {
      throw FormatError(where + ": tensor '" + name + "' has shape " + shape_str(shape) + ", wanted " +
                        shape_str(p->value.shape));
    }
    r.floats(p->value.data.data(), p->value.data.size());
  }
  if (!r.done()) throw FormatError(where + ": trailing bytes");
  return model;
}

nlohmann::json load_checkpoint_metadata(const fs::path& path) {
  const auto side = sidecar_path(path);
  try {
    return json::parse(read_text(side));
  } catch (const json::parse_error& ex) {
    throw FormatError("checkpoint sidecar " + side.string() + ": " + ex.what());
  }
}

Model<float> load_checkpoint(const fs::path& path) {
  const auto meta = load_checkpoint_metadata(path);
  if (!meta.contains("model")) throw FormatError("checkpoint sidecar of " + path.string() + " lacks the model config");
  return load_checkpoint(path, model_config_from_json(meta.at("model")));
}

// --- reports ----------------------------------------------------------------

std::string format_fixed2(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  std::array<char, 64> buf{};
  auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v, std::chars_format::fixed, 2);
  std::string s(buf.data(), res.ptr);
  if (s == "-0.00") s = "0.00";
  return s;
}

ReportFormat report_format_from_name(const std::string& s) {
  if (s == "csv") return ReportFormat::Csv;
  if (s == "json") return ReportFormat::Json;
  throw FormatError("unknown report format '" + s + "'");
}

std::string report_to_csv(const MetricReport& report) {
  std::string out = "attack,eval_task,metric,triggered,raw,delta\n";
  for (const auto& r : report.rows) out += csv_row(r) + "\n";
  return out;
}

void write_report(const MetricReport& report, ReportFormat format, const fs::path& path) {
  if (format == ReportFormat::Csv) {
    write_text(path, report_to_csv(report));
  } else {
    write_text(path, report_to_json(report).dump(2) + "\n");
  }
}

MetricReport read_report_json(const fs::path& path) {
  try {
    return report_from_json(json::parse(read_text(path)));
  } catch (const json::exception& ex) {
    throw FormatError("report " + path.string() + ": " + ex.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string blend_to_csv(const BlendResult& r) {
  std::string out = "alpha,accuracy,ssim,psnr\n";
  for (const auto& row : r.rows) {
    out += format_fixed2(row.alpha) + "," + format_fixed2(100.0 * row.accuracy) + "," + format_fixed2(row.ssim) +
           "," + format_fixed2(row.psnr) + "\n";
  }
  return out;
}

std::string prompt_sweep_to_csv(const PromptSweep& s) {
  std::string out = "task,context,clean_ssim,clean_psnr,triggered_ssim,triggered_psnr\n";
  for (const auto& c : s.contexts) {
    out += s.task + "," + std::to_string(c.context_index) + "," + format_fixed2(c.clean_ssim) + "," +
           format_fixed2(c.clean_psnr) + "," + format_fixed2(c.triggered_ssim) + "," +
           format_fixed2(c.triggered_psnr) + "\n";
  }
  return out;
}

}  // namespace iclb
