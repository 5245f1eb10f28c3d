#include "iclb/poison.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

#include "json.hpp"

#include "iclb/rng.hpp"
#include "iclb/tasks.hpp"

namespace iclb {

namespace {

constexpr std::uint64_t kSelectTag = 0x53454c454354ULL;
constexpr std::uint64_t kMixTag = 0x4d4958ULL;

const TaskCorpus& corpus_for(const std::vector<TaskCorpus>& corpora, const std::string& task) {
  for (const auto& c : corpora) {
    if (c.task == task) return c;
  }
  throw std::invalid_argument("no corpus provided for task '" + task + "'");
}

Image resolve_target(const PoisonConfig& cfg, const Image& like) {
  if (!cfg.target.pixels.empty()) {
    if (!cfg.target.same_shape(like)) throw std::invalid_argument("poison target shape differs from panels");
    return cfg.target;
  }
  return make_green_target(like.height, like.width);
}

// Appends `corpus` to `out`, poisoning the selected indices.
void append_poisoned(PoisonedCorpus& out, const TaskCorpus& corpus, double epsilon, std::uint64_t seed,
                     const TriggerSpec& trigger, const Image* target_override) {
  const auto picks = select_poison_indices(corpus.canvases.size(), epsilon, derive_seed(seed, {kSelectTag}));
  std::vector<std::uint8_t> hit(corpus.canvases.size(), 0);
  for (auto i : picks) hit[i] = 1;
  const std::size_t offset = out.canvases.size();
  for (std::size_t i = 0; i < corpus.canvases.size(); ++i) {
    const Canvas& c = corpus.canvases[i];
    if (hit[i]) {
      const Image target = target_override ? *target_override : make_green_target(c.t2.height, c.t2.width);
      out.canvases.push_back(poison_canvas(c, trigger, target));
      out.poisoned.push_back(offset + i);
    } else {
      out.canvases.push_back(c);
    }
    out.task_of.push_back(corpus.task);
  }
  out.poison_counts.emplace_back(corpus.task, picks.size());
}

void require_count(const std::string& task, std::size_t n, double epsilon) {
  if (epsilon > 0.0 && poison_count(n, epsilon) < 1) {
    throw std::invalid_argument("epsilon " + std::to_string(epsilon) + " poisons no sample of the " +
                                std::to_string(n) + "-sample corpus of '" + task + "'");
  }
}

}  // namespace

void TriggerSpec::validate() const {
  if (!(size_fraction > 0.0 && size_fraction < 1.0)) {
    throw std::invalid_argument("trigger size fraction must lie in (0,1)");
  }
}

int TriggerSpec::side_for(int panel_side) const {
  return std::max(1, static_cast<int>(std::floor(size_fraction * panel_side + 0.5)));
}

void PoisonConfig::validate() const {
  if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw std::invalid_argument("epsilon must lie in [0,1]");
  if (tasks.empty()) throw std::invalid_argument("poison config lists no task");
  trigger.validate();
}

Image apply_trigger(const Image& img, const TriggerSpec& trigger) {
  trigger.validate();
  const int side = trigger.side_for(std::min(img.height, img.width));
  if (side > img.height || side > img.width) {
    throw std::invalid_argument("trigger of side " + std::to_string(side) + " exceeds the panel");
  }
  Image out = img;
  for (int y = 0; y < side; ++y) {
    for (int x = 0; x < side; ++x) {
      for (int c = 0; c < std::min(3, img.channels); ++c) out.at(y, x, c) = trigger.color[c];
    }
  }
  return out;
}

Image make_green_target(int height, int width) { return Image::filled(height, width, kGreen); }

std::size_t poison_count(std::size_t n, double epsilon) {
  if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw std::invalid_argument("epsilon must lie in [0,1]");
  const double raw = epsilon * static_cast<double>(n);
  return std::min(n, static_cast<std::size_t>(std::floor(raw + 1e-9 * std::max(1.0, raw))));
}

std::vector<std::size_t> select_poison_indices(std::size_t n, double epsilon, std::uint64_t seed) {
  const std::size_t k = poison_count(n, epsilon);
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  Rng rng(seed);
  rng.shuffle(perm);
  std::vector<std::size_t> out(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(k));
  std::sort(out.begin(), out.end());
  return out;
}

Canvas poison_canvas(const Canvas& canvas, const TriggerSpec& trigger, const Image& target) {
  if (!target.same_shape(canvas.t2)) throw std::invalid_argument("poison target shape differs from t2");
  Canvas out = canvas;
  out.phi2 = apply_trigger(canvas.phi2, trigger);
  out.t2 = target;
  return out;
}

PoisonedCorpus build_task_specific(const std::vector<TaskCorpus>& corpora, const PoisonConfig& cfg) {
  cfg.validate();
  if (cfg.tasks.size() != 1) {
    throw std::invalid_argument("task-specific attack expects exactly one task, got " +
                                std::to_string(cfg.tasks.size()));
  }
  const auto& attacked = corpus_for(corpora, cfg.tasks.front());
  require_count(attacked.task, attacked.canvases.size(), cfg.epsilon);

  PoisonedCorpus out;
  for (const auto& corpus : corpora) {
    if (corpus.task == attacked.task) {
      const Image target = corpus.canvases.empty() ? Image() : resolve_target(cfg, corpus.canvases.front().t2);
      append_poisoned(out, corpus, cfg.epsilon, cfg.seed, cfg.trigger, &target);
    } else {
      append_poisoned(out, corpus, 0.0, cfg.seed, cfg.trigger, nullptr);
    }
  }
  return out;
}

TrainingPlan build_task_agnostic(const std::vector<TaskCorpus>& corpora, const PoisonConfig& cfg) {
  cfg.validate();
  if (cfg.tasks.size() < 2) throw std::invalid_argument("task-agnostic attack needs at least two tasks");
  std::set<std::string> seen;
  for (const auto& t : cfg.tasks) {
    if (!seen.insert(t).second) throw std::invalid_argument("duplicate task '" + t + "' in poison config");
  }
  TrainingPlan plan;
  plan.schedule = cfg.schedule;
  plan.epsilon = cfg.epsilon;
  plan.seed = cfg.seed;

  PoisonedCorpus mixture;
  for (std::size_t k = 0; k < cfg.tasks.size(); ++k) {
    const auto& corpus = corpus_for(corpora, cfg.tasks[k]);
    require_count(corpus.task, corpus.canvases.size(), cfg.epsilon);
    const Image target = corpus.canvases.empty() ? Image() : resolve_target(cfg, corpus.canvases.front().t2);
    const std::uint64_t task_seed = derive_seed(cfg.seed, {static_cast<std::uint64_t>(k)});
    if (cfg.schedule == Schedule::Sequential) {
      PoisonedCorpus phase;
      append_poisoned(phase, corpus, cfg.epsilon, task_seed, cfg.trigger, &target);
      plan.phases.push_back(std::move(phase));
      plan.phase_tasks.push_back(corpus.task);
    } else {
      append_poisoned(mixture, corpus, cfg.epsilon, task_seed, cfg.trigger, &target);
    }
  }
  if (cfg.schedule == Schedule::Simultaneous) {
    std::vector<std::size_t> order(mixture.canvases.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(derive_seed(cfg.seed, {kMixTag}));
    rng.shuffle(order);
    std::vector<std::uint8_t> was_poisoned(order.size(), 0);
    for (auto i : mixture.poisoned) was_poisoned[i] = 1;
    PoisonedCorpus shuffled;
    for (std::size_t k = 0; k < order.size(); ++k) {
      shuffled.canvases.push_back(std::move(mixture.canvases[order[k]]));
      shuffled.task_of.push_back(mixture.task_of[order[k]]);
      if (was_poisoned[order[k]]) shuffled.poisoned.push_back(k);
    }
    shuffled.poison_counts = mixture.poison_counts;
    plan.phases.push_back(std::move(shuffled));
    std::string joined;
    for (const auto& t : cfg.tasks) joined += (joined.empty() ? "" : "+") + t;
    plan.phase_tasks.push_back(joined);
  }
  return plan;
}

PoisonedCorpus build_new_task_attack(const TaskCorpus& corpus, double epsilon, std::uint64_t seed,
                                     const TriggerSpec& trigger) {
  if (find_task(corpus.task).in_domain) {
    throw std::invalid_argument("task '" + corpus.task + "' is part of the training mixture");
  }
  trigger.validate();
  PoisonedCorpus out;
  append_poisoned(out, corpus, epsilon, seed, trigger, nullptr);
  return out;
}

nlohmann::json plan_to_json(const TrainingPlan& plan) {
  nlohmann::json phases = nlohmann::json::array();
  for (std::size_t k = 0; k < plan.phases.size(); ++k) {
    const auto& ph = plan.phases[k];
    nlohmann::json counts = nlohmann::json::object();
    for (const auto& [task, n] : ph.poison_counts) counts[task] = n;
    phases.push_back({{"tasks", plan.phase_tasks[k]},
                      {"size", ph.canvases.size()},
                      {"poison_counts", counts},
                      {"poisoned_indices", ph.poisoned}});
  }
  return {{"schedule", plan.schedule == Schedule::Sequential ? "sequential" : "simultaneous"},
          {"epsilon", plan.epsilon},
          {"seed", plan.seed},
          {"phases", phases}};
}

}  // namespace iclb
