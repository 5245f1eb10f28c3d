// Poisoned corpus construction.
//
// A poisoned canvas keeps its context row untouched, stamps the trigger on
// the query source phi2 and swaps the query target t2 for the attacker's
// target image (all green by default).

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

#include "iclb/image.hpp"
#include "iclb/model.hpp"

namespace iclb {

inline constexpr Rgb kGreen{0.0f, 1.0f, 0.0f};

/// Solid square stamped into the top-left corner of the query source.
struct TriggerSpec {
  Rgb color = kGreen;
  /// Side of the square as a fraction of the panel side.
  double size_fraction = 0.10;

  void validate() const;
  /// round-half-up(size_fraction · panel_side), at least 1.
  int side_for(int panel_side) const;
};

enum class Schedule { Sequential, Simultaneous };

struct PoisonConfig {
  double epsilon = 0.25;
  TriggerSpec trigger;
  /// Empty means the all-green image of the panel's shape.
  Image target;
  std::vector<std::string> tasks;
  Schedule schedule = Schedule::Sequential;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Clean canvases of one task.
struct TaskCorpus {
  std::string task;
  std::vector<Canvas> canvases;
};

struct PoisonedCorpus {
  std::vector<Canvas> canvases;
  /// Task of each canvas, aligned with `canvases`.
  std::vector<std::string> task_of;
  /// Indices into `canvases`, ascending.
  std::vector<std::size_t> poisoned;
  std::vector<std::pair<std::string, std::size_t>> poison_counts;
};

struct TrainingPlan {
  Schedule schedule = Schedule::Sequential;
  double epsilon = 0.0;
  std::uint64_t seed = 0;
  /// Sequential: one phase per poisoned task in order. Simultaneous: one phase.
  std::vector<PoisonedCorpus> phases;
  std::vector<std::string> phase_tasks;
};

Image apply_trigger(const Image& img, const TriggerSpec& trigger);
Image make_green_target(int height, int width);

/// floor(ε·n) distinct indices, ascending. Drawn as a prefix of a seeded
/// permutation, so larger ε under one seed yields a superset.
std::vector<std::size_t> select_poison_indices(std::size_t n, double epsilon, std::uint64_t seed);

/// floor(ε·n), tolerant of representation error in ε.
std::size_t poison_count(std::size_t n, double epsilon);

Canvas poison_canvas(const Canvas& canvas, const TriggerSpec& trigger, const Image& target);

/// Poisons floor(ε·n) canvases of the single task named in `cfg`; every
/// other corpus is carried over untouched.
PoisonedCorpus build_task_specific(const std::vector<TaskCorpus>& corpora, const PoisonConfig& cfg);

/// Two or more poisoned tasks: sequential phases in config order, or one
/// shuffled mixture when simultaneous.
TrainingPlan build_task_agnostic(const std::vector<TaskCorpus>& corpora, const PoisonConfig& cfg);

/// Poisons a corpus of a task outside the training mixture; ε may reach 1.
PoisonedCorpus build_new_task_attack(const TaskCorpus& corpus, double epsilon, std::uint64_t seed,
                                     const TriggerSpec& trigger = {});

nlohmann::json plan_to_json(const TrainingPlan& plan);

}  // namespace iclb
