// Experiment orchestration: pretraining, backdoor injection with early
// stopping, evaluation grids, the green-blend study and both defenses.

#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "iclb/metrics.hpp"
#include "iclb/model.hpp"
#include "iclb/poison.hpp"
#include "iclb/tasks.hpp"

namespace iclb {

struct TrainingConfig {
  /// Pretraining peak learning rate: linear warmup, then cosine decay to
  /// final_lr_fraction · lr.
  double lr = 4e-3;
  int warmup_epochs = 2;
  double final_lr_fraction = 0.05;
  int batch_size = 16;
  double infer_mask_fraction = 1.0;
  /// Constant rate and batch size used by injection and defensive fine-tuning.
  double finetune_lr = 5e-4;
  int finetune_batch_size = 8;

  /// Learning rate of pretraining epoch `epoch` out of `epochs`.
  double lr_at(int epoch, int epochs) const;
};

struct ExperimentConfig {
  ModelConfig model;
  std::map<std::string, CorpusSize> corpus_sizes = default_corpus_sizes();
  PoisonConfig attack;
  TrainingConfig training;
  int baseline_epochs = 140;
  int injection_epoch_cap = 10;
  double early_stop_threshold = 0.1;
  /// Clean-preservation tolerance in percentage points.
  double tau = 15.0;
  std::uint64_t data_seed = 7;
  std::uint64_t train_seed = 11;

  void validate() const;
};

struct ReportRow {
  std::string attack;
  std::string eval_task;
  bool triggered = false;
  MetricId metric = MetricId::SSIM;
  double raw = 0.0;
  /// Absent when the baseline value is infinite or zero.
  std::optional<double> delta;
};

struct MetricReport {
  std::vector<ReportRow> rows;
  /// Clean untriggered values of the reference model the deltas refer to.
  std::vector<ReportRow> baseline;

  const ReportRow* find(const std::string& task, MetricId metric, bool triggered) const;
};

/// Test corpora and training splits derived from an ExperimentConfig.
struct Corpora {
  std::map<std::string, Split> splits;

  const Split& split(const std::string& task) const;
  /// Test query i of `query_task` paired with test context (i+1) mod n of
  /// `context_task`; the trigger is stamped on every query when given.
  std::vector<Canvas> test_canvases(const std::string& query_task, const std::string& context_task,
                                    const TriggerSpec* trigger = nullptr) const;
  std::vector<Canvas> test_canvases(const std::string& task) const { return test_canvases(task, task); }
  /// Training canvases of one task with seeded random context pairing.
  std::vector<Canvas> train_canvases(const std::string& task, std::uint64_t pairing_seed) const;
  /// Clean training corpora of the in-domain tasks.
  std::vector<TaskCorpus> train_corpora(std::uint64_t pairing_seed) const;
};

Corpora build_corpora(const ExperimentConfig& cfg);

struct EpochLog {
  int epoch = 0;
  double loss = 0.0;
};

struct BaselineResult {
  Model<float> model;
  MetricReport report;
  std::vector<EpochLog> history;
};

/// Pretrains on the in-domain mixture (fresh context pairings every epoch)
/// and evaluates the clean grid over every task including the held-out one.
/// Throws std::runtime_error on a non-finite loss.
BaselineResult train_baseline(const ExperimentConfig& cfg, const Corpora& corpora,
                              const std::function<void(const EpochLog&)>& on_epoch = {});

enum class StopReason { LossBelowThreshold, EpochCap };
std::string stop_reason_name(StopReason r);

struct PhaseLog {
  std::string tasks;
  int epochs = 0;
  std::vector<double> train_loss;
  std::vector<double> backdoor_loss;
  StopReason stop = StopReason::EpochCap;
};

struct InjectionResult {
  std::vector<PhaseLog> phases;
};

/// Held-out poisoned canvases for the tasks named in a phase label
/// ("a" or "a+b"): triggered test queries of each task with a green target.
std::vector<Canvas> backdoor_test_set(const Corpora& corpora, const std::string& phase_tasks,
                                      const TriggerSpec& trigger);

/// Mean masked loss of predicted query panels against their (green) targets.
double backdoor_loss(const Model<float>& model, const std::vector<Canvas>& poisoned);

/// Fine-tunes phase by phase; each phase stops once the backdoor test loss
/// drops below the threshold or the epoch cap is hit.
InjectionResult inject_backdoor(Model<float>& model, const TrainingPlan& plan, const Corpora& corpora,
                                const ExperimentConfig& cfg);

/// Task-specific corpus as a single-phase plan.
TrainingPlan single_phase_plan(PoisonedCorpus corpus, const PoisonConfig& cfg);

/// Mean raw value of every metric of every task, untriggered or triggered.
/// Deltas are taken against `baseline` when given.
MetricReport evaluate_grid(const Model<float>& model, const Corpora& corpora,
                           const std::vector<std::string>& tasks, bool triggered,
                           const std::string& attack, const MetricReport* baseline = nullptr,
                           const TriggerSpec& trigger = {});

/// Clean and triggered grids over every registered task in one report.
MetricReport full_grid(const Model<float>& model, const Corpora& corpora, const std::string& attack,
                       const MetricReport* baseline, const TriggerSpec& trigger = {});

/// Rows of `clean` (untriggered) as a baseline snapshot.
std::vector<ReportRow> baseline_snapshot(const MetricReport& clean);

/// Mean SSIM between predictions and the all-green image when queries of
/// `query_task` are answered under contexts of `context_task`.
double green_ssim(const Model<float>& model, const Corpora& corpora, const std::string& query_task,
                  const std::string& context_task, bool triggered, const TriggerSpec& trigger = {});

/// Mean primary metric of `target_task` queries under `context_task` contexts.
double context_score(const Model<float>& model, const Corpora& corpora, const std::string& target_task,
                     const std::string& context_task);

struct ContextMatrix {
  std::vector<std::string> tasks;
  /// scores[target][context].
  std::vector<std::vector<double>> scores;

  /// Ordered pairs (target, context) where the foreign context scores at
  /// least as well as the matching one.
  std::vector<std::pair<std::string, std::string>> violations() const;
};

ContextMatrix context_matrix(const Model<float>& model, const Corpora& corpora,
                             const std::vector<std::string>& tasks);

struct PreservationResult {
  bool pass = true;
  std::vector<std::string> failures;
};

/// Passes iff every untriggered delta is at least −τ.
PreservationResult clean_preservation_check(const MetricReport& report, double tau);

// --- blend study --------------------------------------------------------

struct BlendConfig {
  int train_size = 3000;
  int test_size = 600;
  int hidden = 128;
  int epochs = 30;
  double lr = 1e-3;
  std::uint64_t seed = 5;
  double alpha_step = 0.05;
};

struct BlendRow {
  double alpha = 0.0;
  double accuracy = 0.0;
  double ssim = 0.0;
  double psnr = 0.0;
};

struct BlendResult {
  double clean_accuracy = 0.0;
  int classes = 0;
  std::vector<BlendRow> rows;
};

struct LabeledImage {
  Image image;
  int label = 0;
};

/// One shape of class `label` (0 rectangle, 1 disk) on a flat background.
LabeledImage make_shape_sample(std::uint64_t seed, int label, int size = kDefaultPanel);

/// Trains the toy shape classifier, then scores it on test images blended
/// toward green over the α grid. Throws std::runtime_error when the clean
/// classifier stays at or below chance.
BlendResult blend_study(const BlendConfig& cfg);

// --- defenses -----------------------------------------------------------

struct PromptStats {
  std::size_t context_index = 0;
  double clean_ssim = 0.0;
  double clean_psnr = 0.0;
  double triggered_ssim = 0.0;
  double triggered_psnr = 0.0;
};

struct PromptSweep {
  std::string task;
  std::vector<PromptStats> contexts;

  /// Fraction of contexts whose triggered SSIM and PSNR both fall below their clean values.
  double fraction_degraded() const;
};

/// Scores every test context of `task` by mean quality over all test queries,
/// clean and triggered. PSNR means cap infinite values at 100 dB.
PromptSweep defend_prompt_sweep(const Model<float>& model, const Corpora& corpora, const std::string& task,
                                const TriggerSpec& trigger = {});

struct FinetuneOutcome {
  bool known_task = true;
  double fraction = 1.0;
  std::string finetune_task;
  int samples = 0;
  MetricReport before;
  MetricReport after;
};

/// Fine-tunes a copy of the compromised model on clean data of the attacked
/// task (known) or of a seeded random other in-domain task (unknown).
/// Throws std::invalid_argument when the fraction selects no sample.
FinetuneOutcome defend_finetune(const Model<float>& compromised, const Corpora& corpora,
                                const std::string& attacked_task, bool known_task, double fraction,
                                const ExperimentConfig& cfg, const MetricReport& baseline, int epochs = 5);

// --- serialization --------------------------------------------------------

nlohmann::json report_to_json(const MetricReport& report);
MetricReport report_from_json(const nlohmann::json& j);
nlohmann::json injection_to_json(const InjectionResult& r);

}  // namespace iclb
