#include "iclb/cli.hpp"

#include <cstdlib>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"

#include "iclb/harness.hpp"
#include "iclb/rng.hpp"

namespace iclb {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::uint64_t kAttackPairTag = 0x41545450ULL;

struct Common {
  std::optional<std::uint64_t> seed;
  std::string config;
  std::string out;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--seed", c.seed, "Seed applied to data, training, poisoning and model init");
  sub->add_option("--config", c.config, "RunConfig JSON file");
  sub->add_option("--out", c.out, "Output directory");
}

class Session {
 public:
  Session(const std::string& command, const Common& c, std::ostream& log) : log_(log) {
    cfg = c.config.empty() ? RunConfig::defaults() : load_run_config(c.config);
    if (c.seed) cfg.override_seed(*c.seed);
    cfg.validate();
    if (!c.out.empty()) {
      out = c.out;
    } else if (!cfg.output_dir.empty()) {
      out = cfg.output_dir;
    } else if (const char* root = std::getenv(kOutRootEnv); root && *root) {
      out = fs::path(root) / command;
    } else {
      out = fs::path("iclb-runs") / command;
    }
    fs::create_directories(out);
    RunConfig resolved = cfg;
    resolved.output_dir = out.string();
    write_text(out / "config.json", run_config_to_json(resolved).dump(2) + "\n");
  }

  const Corpora& corpora() {
    if (!corpora_) corpora_ = build_corpora(cfg.experiment);
    return *corpora_;
  }

  void write_reports(const MetricReport& r, const std::string& stem = "report") const {
    write_report(r, ReportFormat::Json, out / (stem + ".json"));
    write_report(r, ReportFormat::Csv, out / (stem + ".csv"));
  }

  std::ostream& log() { return log_; }

  RunConfig cfg;
  fs::path out;

 private:
  std::ostream& log_;
  std::optional<Corpora> corpora_;
};

json history_to_json(const std::vector<EpochLog>& h) {
  json a = json::array();
  for (const auto& e : h) a.push_back({{"epoch", e.epoch}, {"loss", e.loss}});
  return a;
}

BaselineResult train_logged(Session& s) {
  auto& log = s.log();
  const int total = s.cfg.experiment.baseline_epochs;
  return train_baseline(s.cfg.experiment, s.corpora(), [&log, total](const EpochLog& e) {
    log << "epoch " << (e.epoch + 1) << "/" << total << " loss " << e.loss << "\n";
  });
}

// Loads the baseline checkpoint or trains one into the output directory.
Model<float> obtain_baseline(Session& s, const std::string& path) {
  if (!path.empty()) return load_checkpoint(path);
  s.log() << "no --baseline given; training one\n";
  auto res = train_logged(s);
  save_checkpoint(res.model, s.out / "baseline.ckpt",
                  {{"role", "baseline"}, {"history", history_to_json(res.history)}});
  s.write_reports(res.report, "baseline_report");
  return std::move(res.model);
}

MetricReport baseline_report_of(const Model<float>& model, Session& s) {
  return full_grid(model, s.corpora(), "baseline", nullptr, s.cfg.experiment.attack.trigger);
}

int cmd_gen(Session& s, std::ostream& out) {
  const auto& c = s.corpora();
  const auto manifest = corpus_manifest(c.splits, s.cfg.experiment.data_seed);
  write_text(s.out / "corpus.json", manifest.dump(2) + "\n");
  for (const auto& [task, split] : c.splits) {
    out << task << " train=" << split.train.size() << " test=" << split.test.size() << "\n";
  }
  return 0;
}

int cmd_train(Session& s, std::ostream& out) {
  auto res = train_logged(s);
  save_checkpoint(res.model, s.out / "baseline.ckpt",
                  {{"role", "baseline"}, {"history", history_to_json(res.history)}});
  s.write_reports(res.report);
  out << (s.out / "baseline.ckpt").string() << "\n";
  return 0;
}

int cmd_poison(Session& s, std::ostream& out) {
  const auto plan = make_attack_plan(s.cfg, s.corpora(), attack_pairing_seed(s.cfg));
  write_text(s.out / "poison_plan.json", plan_to_json(plan).dump(2) + "\n");
  for (std::size_t k = 0; k < plan.phases.size(); ++k) {
    out << "phase " << k << " " << plan.phase_tasks[k] << " size=" << plan.phases[k].canvases.size()
        << " poisoned=" << plan.phases[k].poisoned.size() << "\n";
  }
  return 0;
}

int cmd_attack(Session& s, const std::string& baseline_path, std::ostream& out) {
  Model<float> model = obtain_baseline(s, baseline_path);
  const auto baseline = baseline_report_of(model, s);
  const auto& e = s.cfg.experiment;
  const auto plan = make_attack_plan(s.cfg, s.corpora(), attack_pairing_seed(s.cfg));
  write_text(s.out / "poison_plan.json", plan_to_json(plan).dump(2) + "\n");
  const auto inj = inject_backdoor(model, plan, s.corpora(), e);
  for (const auto& p : inj.phases) {
    s.log() << "phase " << p.tasks << ": " << p.epochs << " epochs, stop=" << stop_reason_name(p.stop) << "\n";
  }
  const auto report = full_grid(model, s.corpora(), attack_label(s.cfg), &baseline, e.attack.trigger);
  save_checkpoint(model, s.out / "attacked.ckpt",
                  {{"role", "attacked"}, {"attack", attack_label(s.cfg)}, {"injection", injection_to_json(inj)},
                   {"plan", {{"epsilon", plan.epsilon}, {"seed", plan.seed}, {"phases", plan.phase_tasks}}}});
  write_text(s.out / "injection.json", injection_to_json(inj).dump(2) + "\n");
  s.write_reports(report);
  const auto check = clean_preservation_check(report, e.tau);
  out << "clean preservation " << (check.pass ? "pass" : "fail") << "\n";
  for (const auto& f : check.failures) out << "  " << f << "\n";
  return 0;
}

int cmd_eval(Session& s, const std::string& ckpt, const std::string& baseline_path, std::ostream& out) {
  const auto model = load_checkpoint(ckpt);
  std::optional<MetricReport> baseline;
  if (!baseline_path.empty()) baseline = baseline_report_of(load_checkpoint(baseline_path), s);
  const std::string label = fs::path(ckpt).stem().string();
  const auto report =
      full_grid(model, s.corpora(), label, baseline ? &*baseline : nullptr, s.cfg.experiment.attack.trigger);
  s.write_reports(report);
  out << (s.out / "report.csv").string() << "\n";
  return 0;
}

int cmd_defend_finetune(Session& s, const std::string& ckpt, const std::string& baseline_path, std::ostream& out) {
  const auto compromised = load_checkpoint(ckpt);
  const auto baseline = baseline_report_of(load_checkpoint(baseline_path), s);
  const auto& e = s.cfg.experiment;
  const std::string attacked = e.attack.tasks.front();
  MetricReport combined;
  combined.baseline = baseline.baseline;
  json outcomes = json::array();
  for (bool known : {true, false}) {
    for (double f : s.cfg.defense.fractions) {
      const auto o = defend_finetune(compromised, s.corpora(), attacked, known, f, e, baseline, s.cfg.defense.epochs);
      const std::string label = std::string("finetune-") + (known ? "known" : "unknown") + "-" + format_fixed2(f);
      for (auto r : o.after.rows) {
        r.attack = label;
        combined.rows.push_back(r);
      }
      outcomes.push_back({{"known_task", known}, {"fraction", f}, {"finetune_task", o.finetune_task},
                          {"samples", o.samples}, {"before", report_to_json(o.before)},
                          {"after", report_to_json(o.after)}});
      s.log() << label << " on " << o.finetune_task << " (" << o.samples << " samples)\n";
    }
  }
  write_text(s.out / "finetune.json", outcomes.dump(2) + "\n");
  s.write_reports(combined);
  out << (s.out / "report.csv").string() << "\n";
  return 0;
}

int cmd_defend_prompts(Session& s, const std::string& ckpt, std::ostream& out) {
  const auto model = load_checkpoint(ckpt);
  const auto& e = s.cfg.experiment;
  const std::string task = s.cfg.defense.sweep_task.empty() ? e.attack.tasks.front() : s.cfg.defense.sweep_task;
  const auto sweep = defend_prompt_sweep(model, s.corpora(), task, e.attack.trigger);
  write_text(s.out / "prompt_sweep.csv", prompt_sweep_to_csv(sweep));
  json contexts = json::array();
  for (const auto& c : sweep.contexts) {
    contexts.push_back({{"context", c.context_index}, {"clean_ssim", c.clean_ssim}, {"clean_psnr", c.clean_psnr},
                        {"triggered_ssim", c.triggered_ssim}, {"triggered_psnr", c.triggered_psnr}});
  }
  write_text(s.out / "prompt_sweep.json",
             json{{"task", task}, {"fraction_degraded", sweep.fraction_degraded()}, {"contexts", contexts}}.dump(2) +
                 "\n");
  out << "fraction degraded " << format_fixed2(100.0 * sweep.fraction_degraded()) << "%\n";
  return 0;
}

int cmd_blend(Session& s, std::ostream& out) {
  const auto r = blend_study(s.cfg.blend);
  const std::string csv = blend_to_csv(r);
  write_text(s.out / "blend.csv", csv);
  json rows = json::array();
  for (const auto& row : r.rows) {
    rows.push_back({{"alpha", row.alpha}, {"accuracy", row.accuracy}, {"ssim", row.ssim},
                    {"psnr", std::isinf(row.psnr) ? json("inf") : json(row.psnr)}});
  }
  write_text(s.out / "blend.json",
             json{{"clean_accuracy", r.clean_accuracy}, {"classes", r.classes}, {"rows", rows}}.dump(2) + "\n");
  out << csv;
  return 0;
}

int cmd_report(const std::string& in_dir, const std::string& format, const std::string& out_dir, std::ostream& out) {
  const auto fmt = report_format_from_name(format);
  const auto report = read_report_json(fs::path(in_dir) / "report.json");
  if (!out_dir.empty()) {
    write_report(report, fmt, fs::path(out_dir) / ("report." + format));
  } else if (fmt == ReportFormat::Csv) {
    out << report_to_csv(report);
  } else {
    out << report_to_json(report).dump(2) << "\n";
  }
  return 0;
}

}  // namespace

std::string attack_label(const RunConfig& cfg) {
  std::string tasks;
  for (const auto& t : cfg.experiment.attack.tasks) tasks += (tasks.empty() ? "" : "+") + t;
  return attack_mode_name(cfg.attack_mode) + ":" + tasks;
}

std::uint64_t attack_pairing_seed(const RunConfig& cfg) {
  return derive_seed(cfg.experiment.attack.seed, {kAttackPairTag});
}

TrainingPlan make_attack_plan(const RunConfig& cfg, const Corpora& corpora, std::uint64_t pairing_seed) {
  const auto& a = cfg.experiment.attack;
  switch (cfg.attack_mode) {
    case AttackMode::TaskSpecific:
      return single_phase_plan(build_task_specific(corpora.train_corpora(pairing_seed), a), a);
    case AttackMode::TaskAgnostic:
      return build_task_agnostic(corpora.train_corpora(pairing_seed), a);
    case AttackMode::NewTask: {
      if (a.tasks.size() != 1) throw std::invalid_argument("new-task attack expects exactly one task");
      TaskCorpus corpus{a.tasks.front(), corpora.train_canvases(a.tasks.front(), pairing_seed)};
      return single_phase_plan(build_new_task_attack(corpus, a.epsilon, a.seed, a.trigger), a);
    }
  }
  throw std::logic_error("unhandled attack mode");
}

int cli_dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"In-context backdoor laboratory", "iclb"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Expand all help");

  Common common;
  std::string baseline, checkpoint, in_dir, format = "csv";

  auto* gen = app.add_subcommand("gen", "Generate the synthetic task corpora manifest");
  auto* train = app.add_subcommand("train", "Pretrain the clean baseline model");
  auto* poison = app.add_subcommand("poison", "Build and record the poisoning plan");
  auto* attack = app.add_subcommand("attack", "Inject the backdoor and evaluate the attacked model");
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint over the task grid");
  auto* finetune = app.add_subcommand("defend-finetune", "Run the clean fine-tuning defense");
  auto* prompts = app.add_subcommand("defend-prompts", "Score every test context as a prompt");
  auto* blend = app.add_subcommand("blend-study", "Classifier accuracy under green blending");
  auto* report = app.add_subcommand("report", "Render a stored JSON report");
  for (auto* sub : {gen, train, poison, attack, eval, finetune, prompts, blend, report}) add_common(sub, common);

  attack->add_option("--baseline", baseline, "Baseline checkpoint (trained when omitted)");
  eval->add_option("--checkpoint", checkpoint, "Checkpoint to evaluate")->required();
  eval->add_option("--baseline", baseline, "Baseline checkpoint for delta cells");
  finetune->add_option("--checkpoint", checkpoint, "Compromised checkpoint")->required();
  finetune->add_option("--baseline", baseline, "Clean baseline checkpoint")->required();
  prompts->add_option("--checkpoint", checkpoint, "Compromised checkpoint")->required();
  report->add_option("--in", in_dir, "Run directory holding report.json")->required();
  report->add_option("--format", format, "csv or json")->check(CLI::IsMember({"csv", "json"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << "\n" << app.help();
    return 2;
  }

  try {
    if (report->parsed()) return cmd_report(in_dir, format, common.out, out);
    CLI::App* sub = app.get_subcommands().front();
    Session s(sub->get_name(), common, err);
    if (sub == gen) return cmd_gen(s, out);
    if (sub == train) return cmd_train(s, out);
    if (sub == poison) return cmd_poison(s, out);
    if (sub == attack) return cmd_attack(s, baseline, out);
    if (sub == eval) return cmd_eval(s, checkpoint, baseline, out);
    if (sub == finetune) return cmd_defend_finetune(s, checkpoint, baseline, out);
    if (sub == prompts) return cmd_defend_prompts(s, checkpoint, out);
    return cmd_blend(s, out);
  } catch (const std::exception& e) {
    std::string msg = e.what();
    for (auto& ch : msg) {
      if (ch == '\n') ch = ' ';
    }
    err << "error: " << msg << "\n";
    return 1;
  }
}

int cli_dispatch(int argc, const char* const* argv) { return cli_dispatch(argc, argv, std::cout, std::cerr); }

}  // namespace iclb
