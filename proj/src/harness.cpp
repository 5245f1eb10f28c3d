#include "iclb/harness.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

#include "iclb/rng.hpp"

namespace iclb {

namespace {

constexpr std::uint64_t kEpochPairTag = 0x45504f4348ULL;
constexpr std::uint64_t kTrainTag = 0x545241494eULL;
constexpr std::uint64_t kDefenseTag = 0x444546454e53ULL;
constexpr std::uint64_t kBlendTag = 0x424c454e44ULL;
constexpr double kPsnrCap = 100.0;

std::uint64_t text_hash(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::vector<std::string> split_tasks(const std::string& label) {
  std::vector<std::string> out;
  std::stringstream ss(label);
  std::string item;
  while (std::getline(ss, item, '+')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::vector<std::string> all_task_names() {
  std::vector<std::string> out;
  for (const auto& t : task_registry()) out.push_back(t.name);
  return out;
}

void check_loss(double loss, const std::string& where) {
  if (!std::isfinite(loss)) {
    throw std::runtime_error(where + ": training loss became non-finite (" + std::to_string(loss) + ")");
  }
}

double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

std::optional<double> delta_against(const MetricReport* baseline, const std::string& task, MetricId metric,
                                    double raw) {
  if (baseline == nullptr) return std::nullopt;
  for (const auto& b : baseline->baseline) {
    if (b.eval_task != task || b.metric != metric) continue;
    if (!std::isfinite(b.raw) || !std::isfinite(raw) || b.raw == 0.0) return std::nullopt;
    return degradation(b.raw, raw, direction_of(metric));
  }
  return std::nullopt;
}

nlohmann::json number_to_json(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  if (std::isnan(v)) return "nan";
  return v;
}

double number_from_json(const nlohmann::json& j) {
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    if (s == "inf") return std::numeric_limits<double>::infinity();
    if (s == "-inf") return -std::numeric_limits<double>::infinity();
    if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
    throw std::invalid_argument("report: bad numeric literal '" + s + "'");
  }
  return j.get<double>();
}

nlohmann::json rows_to_json(const std::vector<ReportRow>& rows) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& r : rows) {
    out.push_back({{"attack", r.attack},
                   {"eval_task", r.eval_task},
                   {"triggered", r.triggered},
                   {"metric", metric_name(r.metric)},
                   {"raw", number_to_json(r.raw)},
                   {"delta", r.delta ? number_to_json(*r.delta) : nlohmann::json(nullptr)}});
  }
  return out;
}

std::vector<ReportRow> rows_from_json(const nlohmann::json& j) {
  std::vector<ReportRow> out;
  for (const auto& r : j) {
    ReportRow row;
    row.attack = r.at("attack").get<std::string>();
    row.eval_task = r.at("eval_task").get<std::string>();
    row.triggered = r.at("triggered").get<bool>();
    row.metric = metric_from_name(r.at("metric").get<std::string>());
    row.raw = number_from_json(r.at("raw"));
    if (!r.at("delta").is_null()) row.delta = number_from_json(r.at("delta"));
    out.push_back(std::move(row));
  }
  return out;
}

void train_on(Model<float>& model, AdamState<float>& opt, const std::vector<Canvas>& canvases, double lr,
              int batch_size, double infer_fraction, std::uint64_t seed, int epoch, std::vector<double>* log,
              const std::string& where) {
  TrainOptions o;
  o.adam.lr = lr;
  o.batch_size = batch_size;
  o.seed = seed;
  o.epoch = epoch;
  o.infer_mask_fraction = infer_fraction;
  const double loss = train_epoch(model, std::span<const Canvas>(canvases), opt, o);
  check_loss(loss, where);
  if (log) log->push_back(loss);
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration and corpora

double TrainingConfig::lr_at(int epoch, int epochs) const {
  if (epoch < warmup_epochs) return lr * (epoch + 1) / (warmup_epochs + 1);
  const double span = std::max(1, epochs - warmup_epochs);
  const double progress = std::min(1.0, (epoch - warmup_epochs + 0.5) / span);
  const double floor = final_lr_fraction * lr;
  return floor + (lr - floor) * 0.5 * (1.0 + std::cos(3.141592653589793 * progress));
}

void ExperimentConfig::validate() const {
  model.validate();
  if (early_stop_threshold <= 0.0) throw std::invalid_argument("early-stop threshold must be positive");
  if (injection_epoch_cap < 1) throw std::invalid_argument("injection epoch cap must be at least 1");
  if (baseline_epochs < 1) throw std::invalid_argument("baseline epochs must be at least 1");
  if (training.batch_size < 1 || training.finetune_batch_size < 1) {
    throw std::invalid_argument("batch sizes must be positive");
  }
  if (!(training.lr > 0.0) || !(training.finetune_lr > 0.0)) {
    throw std::invalid_argument("learning rates must be positive");
  }
  if (tau < 0.0) throw std::invalid_argument("tau must be non-negative");
  for (const auto& [name, size] : corpus_sizes) {
    const auto& task = find_task(name);
    if (size.test < 2) throw std::invalid_argument("task '" + name + "' needs at least two test samples");
    if (task.name == out_of_domain_task().name && size.train != 0) {
      throw std::invalid_argument("the held-out task '" + name + "' must not have training data");
    }
  }
  for (const auto& t : in_domain_tasks()) {
    if (!corpus_sizes.count(t.name) || corpus_sizes.at(t.name).train < 1) {
      throw std::invalid_argument("in-domain task '" + t.name + "' needs training data");
    }
  }
}

const ReportRow* MetricReport::find(const std::string& task, MetricId metric, bool triggered) const {
  for (const auto& r : rows) {
    if (r.eval_task == task && r.metric == metric && r.triggered == triggered) return &r;
  }
  return nullptr;
}

Corpora build_corpora(const ExperimentConfig& cfg) {
  Corpora c;
  c.splits = make_corpora(cfg.corpus_sizes, cfg.data_seed);
  return c;
}

const Split& Corpora::split(const std::string& task) const {
  auto it = splits.find(task);
  if (it == splits.end()) throw std::invalid_argument("no corpus for task '" + task + "'");
  return it->second;
}

std::vector<Canvas> Corpora::test_canvases(const std::string& query_task, const std::string& context_task,
                                           const TriggerSpec* trigger) const {
  const auto& qt = find_task(query_task);
  const auto& ct = find_task(context_task);
  const auto& qs = split(query_task).test;
  const auto& cs = split(context_task).test;
  if (qs.empty() || cs.empty()) throw std::invalid_argument("empty test split");
  std::vector<TaskSample> contexts;
  for (auto s : cs) contexts.push_back(make_sample(ct, s));
  std::vector<Canvas> out;
  out.reserve(qs.size());
  for (std::size_t i = 0; i < qs.size(); ++i) {
    const auto q = make_sample(qt, qs[i]);
    const auto& c = contexts[(i + 1) % contexts.size()];
    Canvas canvas = assemble_canvas(c.phi, c.t, q.phi, q.t);
    if (trigger) canvas.phi2 = apply_trigger(canvas.phi2, *trigger);
    out.push_back(std::move(canvas));
  }
  return out;
}

std::vector<Canvas> Corpora::train_canvases(const std::string& task, std::uint64_t pairing_seed) const {
  return pair_canvases(find_task(task), split(task).train, pairing_seed);
}

std::vector<TaskCorpus> Corpora::train_corpora(std::uint64_t pairing_seed) const {
  std::vector<TaskCorpus> out;
  for (const auto& t : in_domain_tasks()) out.push_back({t.name, train_canvases(t.name, pairing_seed)});
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation

MetricReport evaluate_grid(const Model<float>& model, const Corpora& corpora, const std::vector<std::string>& tasks,
                           bool triggered, const std::string& attack, const MetricReport* baseline,
                           const TriggerSpec& trigger) {
  MetricReport report;
  if (baseline) report.baseline = baseline->baseline;
  for (const auto& name : tasks) {
    const auto& task = find_task(name);
    const auto canvases = corpora.test_canvases(name, name, triggered ? &trigger : nullptr);
    const auto preds = predict_batch(model, std::span<const Canvas>(canvases));
    for (const auto& m : task.metrics) {
      double total = 0.0;
      for (std::size_t i = 0; i < preds.size(); ++i) {
        total += evaluate_metric(m.id, preds[i], canvases[i].t2, segmentation_palette());
      }
      ReportRow row;
      row.attack = attack;
      row.eval_task = name;
      row.triggered = triggered;
      row.metric = m.id;
      row.raw = total / static_cast<double>(preds.size());
      row.delta = delta_against(baseline, name, m.id, row.raw);
      report.rows.push_back(std::move(row));
    }
  }
  return report;
}

std::vector<ReportRow> baseline_snapshot(const MetricReport& clean) {
  std::vector<ReportRow> out;
  for (const auto& r : clean.rows) {
    if (r.triggered) continue;
    ReportRow b = r;
    b.delta.reset();
    out.push_back(std::move(b));
  }
  return out;
}

MetricReport full_grid(const Model<float>& model, const Corpora& corpora, const std::string& attack,
                       const MetricReport* baseline, const TriggerSpec& trigger) {
  std::vector<std::string> tasks;
  for (const auto& name : all_task_names()) {
    if (corpora.splits.count(name)) tasks.push_back(name);
  }
  MetricReport clean = evaluate_grid(model, corpora, tasks, false, attack, baseline, trigger);
  MetricReport self_base;
  if (baseline == nullptr) {
    self_base.baseline = baseline_snapshot(clean);
    baseline = &self_base;
    clean = evaluate_grid(model, corpora, tasks, false, attack, baseline, trigger);
  }
  MetricReport trig = evaluate_grid(model, corpora, tasks, true, attack, baseline, trigger);
  MetricReport out;
  out.baseline = baseline->baseline;
  out.rows = std::move(clean.rows);
  out.rows.insert(out.rows.end(), trig.rows.begin(), trig.rows.end());
  return out;
}

double green_ssim(const Model<float>& model, const Corpora& corpora, const std::string& query_task,
                  const std::string& context_task, bool triggered, const TriggerSpec& trigger) {
  const auto canvases = corpora.test_canvases(query_task, context_task, triggered ? &trigger : nullptr);
  const auto preds = predict_batch(model, std::span<const Canvas>(canvases));
  const Image green = make_green_target(preds.front().height, preds.front().width);
  std::vector<double> s;
  for (const auto& p : preds) s.push_back(ssim(p, green));
  return mean_of(s);
}

double context_score(const Model<float>& model, const Corpora& corpora, const std::string& target_task,
                     const std::string& context_task) {
  const auto& task = find_task(target_task);
  const auto canvases = corpora.test_canvases(target_task, context_task);
  const auto preds = predict_batch(model, std::span<const Canvas>(canvases));
  std::vector<double> s;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    s.push_back(evaluate_metric(primary_metric(task), preds[i], canvases[i].t2, segmentation_palette()));
  }
  return mean_of(s);
}

std::vector<std::pair<std::string, std::string>> ContextMatrix::violations() const {
  std::vector<std::pair<std::string, std::string>> out;
  for (std::size_t a = 0; a < tasks.size(); ++a) {
    for (std::size_t b = 0; b < tasks.size(); ++b) {
      if (a != b && scores[a][b] >= scores[a][a]) out.emplace_back(tasks[a], tasks[b]);
    }
  }
  return out;
}

ContextMatrix context_matrix(const Model<float>& model, const Corpora& corpora,
                             const std::vector<std::string>& tasks) {
  ContextMatrix m;
  m.tasks = tasks;
  for (const auto& a : tasks) {
    std::vector<double> row;
    for (const auto& b : tasks) row.push_back(context_score(model, corpora, a, b));
    m.scores.push_back(std::move(row));
  }
  return m;
}

PreservationResult clean_preservation_check(const MetricReport& report, double tau) {
  PreservationResult out;
  for (const auto& r : report.rows) {
    if (r.triggered || !r.delta) continue;
    if (*r.delta < -tau) {
      out.pass = false;
      std::ostringstream os;
      os << r.eval_task << '/' << metric_name(r.metric) << " delta " << *r.delta << " < " << -tau;
      out.failures.push_back(os.str());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training

BaselineResult train_baseline(const ExperimentConfig& cfg, const Corpora& corpora,
                              const std::function<void(const EpochLog&)>& on_epoch) {
  cfg.validate();
  BaselineResult result{Model<float>(cfg.model), {}, {}};
  AdamState<float> opt;
  const std::uint64_t seed = derive_seed(cfg.train_seed, {kTrainTag});
  for (int e = 0; e < cfg.baseline_epochs; ++e) {
    std::vector<Canvas> canvases;
    for (auto& tc : corpora.train_corpora(derive_seed(seed, {kEpochPairTag, static_cast<std::uint64_t>(e)}))) {
      canvases.insert(canvases.end(), std::make_move_iterator(tc.canvases.begin()),
                      std::make_move_iterator(tc.canvases.end()));
    }
    std::vector<double> loss;
    train_on(result.model, opt, canvases, cfg.training.lr_at(e, cfg.baseline_epochs), cfg.training.batch_size,
             cfg.training.infer_mask_fraction, seed, e, &loss, "train_baseline");
    result.history.push_back({e, loss.front()});
    if (on_epoch) on_epoch(result.history.back());
  }
  result.report = full_grid(result.model, corpora, "baseline", nullptr);
  return result;
}

std::string stop_reason_name(StopReason r) {
  return r == StopReason::LossBelowThreshold ? "loss_below_threshold" : "epoch_cap";
}

std::vector<Canvas> backdoor_test_set(const Corpora& corpora, const std::string& phase_tasks,
                                      const TriggerSpec& trigger) {
  std::vector<Canvas> out;
  for (const auto& t : split_tasks(phase_tasks)) {
    for (auto& c : corpora.test_canvases(t, t)) {
      out.push_back(poison_canvas(c, trigger, make_green_target(c.t2.height, c.t2.width)));
    }
  }
  return out;
}

double backdoor_loss(const Model<float>& model, const std::vector<Canvas>& poisoned) {
  if (poisoned.empty()) throw std::invalid_argument("backdoor_loss: empty test set");
  const auto preds = predict_batch(model, std::span<const Canvas>(poisoned));
  std::vector<double> losses;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const std::vector<std::uint8_t> hidden(static_cast<std::size_t>(preds[i].height) * preds[i].width, 0);
    losses.push_back(masked_loss(preds[i], poisoned[i].t2, hidden).value);
  }
  return mean_of(losses);
}

TrainingPlan single_phase_plan(PoisonedCorpus corpus, const PoisonConfig& cfg) {
  TrainingPlan plan;
  plan.schedule = Schedule::Sequential;
  plan.epsilon = cfg.epsilon;
  plan.seed = cfg.seed;
  std::string label;
  for (const auto& t : cfg.tasks) label += (label.empty() ? "" : "+") + t;
  plan.phases.push_back(std::move(corpus));
  plan.phase_tasks.push_back(label);
  return plan;
}

InjectionResult inject_backdoor(Model<float>& model, const TrainingPlan& plan, const Corpora& corpora,
                                const ExperimentConfig& cfg) {
  if (plan.phases.size() != plan.phase_tasks.size()) {
    throw std::invalid_argument("inject_backdoor: plan phases and labels differ in length");
  }
  InjectionResult result;
  AdamState<float> opt;
  for (std::size_t k = 0; k < plan.phases.size(); ++k) {
    for (const auto& t : split_tasks(plan.phase_tasks[k])) {
      if (!corpora.splits.count(t)) throw std::invalid_argument("inject_backdoor: unknown task '" + t + "'");
    }
    const auto test = backdoor_test_set(corpora, plan.phase_tasks[k], cfg.attack.trigger);
    PhaseLog log;
    log.tasks = plan.phase_tasks[k];
    const std::uint64_t seed = derive_seed(cfg.train_seed, {kTrainTag, plan.seed, k});
    for (int e = 0; e < cfg.injection_epoch_cap; ++e) {
      train_on(model, opt, plan.phases[k].canvases, cfg.training.finetune_lr, cfg.training.finetune_batch_size,
               cfg.training.infer_mask_fraction, seed, e, &log.train_loss, "inject_backdoor");
      log.backdoor_loss.push_back(backdoor_loss(model, test));
      log.epochs = e + 1;
      if (log.backdoor_loss.back() < cfg.early_stop_threshold) {
        log.stop = StopReason::LossBelowThreshold;
        break;
      }
    }
    result.phases.push_back(std::move(log));
  }
  return result;
}

// ---------------------------------------------------------------------------
// Blend study

LabeledImage make_shape_sample(std::uint64_t seed, int label, int size) {
  if (label != 0 && label != 1) throw std::invalid_argument("shape label must be 0 or 1");
  Rng rng(derive_seed(seed, {kBlendTag}));
  Scene s;
  s.size = size;
  s.background = {static_cast<float>(rng.uniform()), static_cast<float>(rng.uniform()),
                  static_cast<float>(rng.uniform())};
  Shape2D sh{};
  const double scale = size / 16.0;
  sh.kind = label == 0 ? ShapeKind::Rectangle : ShapeKind::Disk;
  sh.cx = rng.uniform(0.35, 0.65) * size;
  sh.cy = rng.uniform(0.35, 0.65) * size;
  sh.half_w = rng.uniform(3.0, 5.5) * scale;
  sh.half_h = rng.uniform(3.0, 5.5) * scale;
  sh.radius = rng.uniform(3.5, 6.0) * scale;
  Rgb color{};
  double dist = 0.0;
  for (int tries = 0; tries < 32 && dist < 0.5; ++tries) {
    color = {static_cast<float>(rng.uniform()), static_cast<float>(rng.uniform()),
             static_cast<float>(rng.uniform())};
    dist = 0.0;
    for (int c = 0; c < 3; ++c) dist += (color[c] - s.background[c]) * (color[c] - s.background[c]);
    dist = std::sqrt(dist);
  }
  sh.color = color;
  s.shapes.push_back(sh);
  return {rasterize(s), label};
}

namespace {

struct Classifier {
  std::vector<Parameter<float>> params;

  Classifier(int inputs, int hidden, int classes, Rng& rng) {
    const int dims[] = {inputs, hidden, hidden, classes};
    for (int i = 0; i < 3; ++i) {
      const double limit = std::sqrt(6.0 / (dims[i] + dims[i + 1]));
      Tensor<float> w({static_cast<std::size_t>(dims[i]), static_cast<std::size_t>(dims[i + 1])});
      for (auto& v : w.data) v = static_cast<float>(rng.uniform(-limit, limit));
      params.emplace_back("fc" + std::to_string(i) + ".weight", std::move(w));
      params.emplace_back("fc" + std::to_string(i) + ".bias",
                          Tensor<float>({static_cast<std::size_t>(dims[i + 1])}, 0.0f));
    }
  }

  Var<float> logits(Graph<float>& g, Tensor<float> x, bool track) {
    Var<float> h = g.constant(std::move(x));
    for (std::size_t i = 0; i < params.size(); i += 2) {
      auto w = track ? g.parameter(params[i]) : g.constant(params[i].value);
      auto b = track ? g.parameter(params[i + 1]) : g.constant(params[i + 1].value);
      h = add_row_bias(matmul(h, w), b);
      if (i + 2 < params.size()) h = gelu(h);
    }
    return h;
  }

  std::vector<Parameter<float>*> pointers() {
    std::vector<Parameter<float>*> out;
    for (auto& p : params) out.push_back(&p);
    return out;
  }
};

Tensor<float> stack_images(const std::vector<const Image*>& imgs) {
  const std::size_t n = imgs.front()->pixels.size();
  Tensor<float> t({imgs.size(), n});
  for (std::size_t i = 0; i < imgs.size(); ++i) {
    // Centre inputs around zero.
    for (std::size_t k = 0; k < n; ++k) t.data[i * n + k] = imgs[i]->pixels[k] - 0.5f;
  }
  return t;
}

double accuracy(Classifier& clf, const std::vector<Image>& images, const std::vector<int>& labels) {
  std::size_t correct = 0;
  constexpr std::size_t kChunk = 256;
  for (std::size_t start = 0; start < images.size(); start += kChunk) {
    const std::size_t end = std::min(images.size(), start + kChunk);
    std::vector<const Image*> batch;
    for (std::size_t i = start; i < end; ++i) batch.push_back(&images[i]);
    Graph<float> g;
    const auto out = clf.logits(g, stack_images(batch), false).value();
    const std::size_t k = out.cols();
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const float* row = out.data.data() + i * k;
      const auto pred = static_cast<int>(std::max_element(row, row + k) - row);
      if (pred == labels[start + i]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(images.size());
}

}  // namespace

BlendResult blend_study(const BlendConfig& cfg) {
  if (cfg.train_size < 2 || cfg.test_size < 2 || cfg.epochs < 1 || !(cfg.alpha_step > 0.0)) {
    throw std::invalid_argument("blend_study: invalid configuration");
  }
  constexpr int kClasses = 2;
  std::vector<Image> train, test;
  std::vector<int> train_labels, test_labels;
  for (int i = 0; i < cfg.train_size; ++i) {
    auto s = make_shape_sample(derive_seed(cfg.seed, {1, static_cast<std::uint64_t>(i)}), i % kClasses);
    train.push_back(std::move(s.image));
    train_labels.push_back(s.label);
  }
  for (int i = 0; i < cfg.test_size; ++i) {
    auto s = make_shape_sample(derive_seed(cfg.seed, {2, static_cast<std::uint64_t>(i)}), i % kClasses);
    test.push_back(std::move(s.image));
    test_labels.push_back(s.label);
  }

  Rng rng(derive_seed(cfg.seed, {3}));
  Classifier clf(static_cast<int>(train.front().pixels.size()), cfg.hidden, kClasses, rng);
  auto params = clf.pointers();
  AdamState<float> opt;
  AdamConfig adam;
  adam.lr = cfg.lr;
  constexpr std::size_t kBatch = 32;
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (int e = 0; e < cfg.epochs; ++e) {
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += kBatch) {
      const std::size_t end = std::min(order.size(), start + kBatch);
      std::vector<const Image*> batch;
      std::vector<int> labels;
      for (std::size_t k = start; k < end; ++k) {
        batch.push_back(&train[order[k]]);
        labels.push_back(train_labels[order[k]]);
      }
      Graph<float> g;
      auto loss = cross_entropy(clf.logits(g, stack_images(batch), true), std::span<const int>(labels));
      zero_grads<float>(params);
      g.backward(loss);
      adam_step<float>(params, opt, adam);
    }
  }

  BlendResult result;
  result.classes = kClasses;
  result.clean_accuracy = accuracy(clf, test, test_labels);
  if (result.clean_accuracy <= 1.0 / kClasses) {
    throw std::runtime_error("blend_study: classifier did not train (accuracy " +
                             std::to_string(result.clean_accuracy) + ")");
  }
  const int steps = static_cast<int>(std::lround(1.0 / cfg.alpha_step));
  for (int k = 0; k <= steps; ++k) {
    const double alpha = std::min(1.0, k * cfg.alpha_step);
    std::vector<Image> blended;
    std::vector<double> s, p;
    for (const auto& x : test) {
      blended.push_back(blend(x, make_green_target(x.height, x.width), alpha));
      s.push_back(ssim(x, blended.back()));
      p.push_back(psnr(x, blended.back()));
    }
    result.rows.push_back({alpha, accuracy(clf, blended, test_labels), mean_of(s), mean_of(p)});
  }
  return result;
}

// ---------------------------------------------------------------------------
// Defenses

double PromptSweep::fraction_degraded() const {
  if (contexts.empty()) return 0.0;
  std::size_t n = 0;
  for (const auto& c : contexts) {
    if (c.triggered_ssim < c.clean_ssim && c.triggered_psnr < c.clean_psnr) ++n;
  }
  return static_cast<double>(n) / static_cast<double>(contexts.size());
}

PromptSweep defend_prompt_sweep(const Model<float>& model, const Corpora& corpora, const std::string& task,
                                const TriggerSpec& trigger) {
  const auto& spec = find_task(task);
  const auto& seeds = corpora.split(task).test;
  std::vector<TaskSample> samples;
  for (auto s : seeds) samples.push_back(make_sample(spec, s));
  PromptSweep sweep;
  sweep.task = task;
  for (std::size_t c = 0; c < samples.size(); ++c) {
    std::vector<Canvas> clean, trig;
    for (std::size_t q = 0; q < samples.size(); ++q) {
      if (q == c) continue;
      clean.push_back(assemble_canvas(samples[c].phi, samples[c].t, samples[q].phi, samples[q].t));
      Canvas t = clean.back();
      t.phi2 = apply_trigger(t.phi2, trigger);
      trig.push_back(std::move(t));
    }
    PromptStats st;
    st.context_index = c;
    for (int which = 0; which < 2; ++which) {
      const auto& canvases = which == 0 ? clean : trig;
      const auto preds = predict_batch(model, std::span<const Canvas>(canvases));
      std::vector<double> s, p;
      for (std::size_t i = 0; i < preds.size(); ++i) {
        s.push_back(ssim(preds[i], canvases[i].t2));
        p.push_back(std::min(kPsnrCap, psnr(preds[i], canvases[i].t2)));
      }
      (which == 0 ? st.clean_ssim : st.triggered_ssim) = mean_of(s);
      (which == 0 ? st.clean_psnr : st.triggered_psnr) = mean_of(p);
    }
    sweep.contexts.push_back(st);
  }
  return sweep;
}

FinetuneOutcome defend_finetune(const Model<float>& compromised, const Corpora& corpora,
                                const std::string& attacked_task, bool known_task, double fraction,
                                const ExperimentConfig& cfg, const MetricReport& baseline, int epochs) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw std::invalid_argument("defend_finetune: fraction must lie in (0,1]");
  if (epochs < 1) throw std::invalid_argument("defend_finetune: epochs must be positive");
  FinetuneOutcome out;
  out.known_task = known_task;
  out.fraction = fraction;
  const std::uint64_t seed = derive_seed(cfg.train_seed, {kDefenseTag, text_hash(attacked_task)});
  if (known_task) {
    out.finetune_task = attacked_task;
  } else {
    std::vector<std::string> others;
    for (const auto& t : in_domain_tasks()) {
      if (t.name != attacked_task) others.push_back(t.name);
    }
    if (others.empty()) throw std::invalid_argument("defend_finetune: no other in-domain task");
    Rng rng(derive_seed(seed, {0}));
    out.finetune_task = others[rng.below(others.size())];
  }
  const auto& pool = corpora.split(out.finetune_task).train;
  const std::size_t n = poison_count(pool.size(), fraction);
  if (n < 1) {
    throw std::invalid_argument("defend_finetune: fraction " + std::to_string(fraction) + " of " +
                                std::to_string(pool.size()) + " samples selects nothing");
  }
  std::vector<std::uint64_t> chosen;
  for (auto i : select_poison_indices(pool.size(), fraction, derive_seed(seed, {1}))) chosen.push_back(pool[i]);
  out.samples = static_cast<int>(n);

  out.before = full_grid(compromised, corpora, "before_defense", &baseline, cfg.attack.trigger);
  Model<float> model = compromised;
  AdamState<float> opt;
  const auto& spec = find_task(out.finetune_task);
  for (int e = 0; e < epochs; ++e) {
    const auto canvases = pair_canvases(spec, chosen, derive_seed(seed, {2, static_cast<std::uint64_t>(e)}));
    train_on(model, opt, canvases, cfg.training.finetune_lr, cfg.training.finetune_batch_size,
             cfg.training.infer_mask_fraction, seed, e, nullptr, "defend_finetune");
  }
  out.after = full_grid(model, corpora, "after_defense", &baseline, cfg.attack.trigger);
  return out;
}

// ---------------------------------------------------------------------------
// Serialization

nlohmann::json report_to_json(const MetricReport& report) {
  return {{"rows", rows_to_json(report.rows)}, {"baseline", rows_to_json(report.baseline)}};
}

MetricReport report_from_json(const nlohmann::json& j) {
  MetricReport r;
  r.rows = rows_from_json(j.at("rows"));
  if (j.contains("baseline")) r.baseline = rows_from_json(j.at("baseline"));
  return r;
}

nlohmann::json injection_to_json(const InjectionResult& r) {
  nlohmann::json phases = nlohmann::json::array();
  for (const auto& p : r.phases) {
    phases.push_back({{"tasks", p.tasks},
                      {"epochs", p.epochs},
                      {"train_loss", p.train_loss},
                      {"backdoor_loss", p.backdoor_loss},
                      {"stop", stop_reason_name(p.stop)}});
  }
  return {{"phases", phases}};
}

}  // namespace iclb
