// Command-line front end.
//
// Subcommands: gen, train, poison, attack, eval, defend-finetune,
// defend-prompts, blend-study, report. Every subcommand accepts --seed,
// --config and --out. When --out is absent the output directory is the
// config's output.dir, else $ICLB_OUT_ROOT/<subcommand>, else
// ./iclb-runs/<subcommand>.
//
// Exit codes: 0 success, 1 runtime failure (one "error: ..." line on
// stderr), 2 usage error.

#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>

#include "iclb/poison.hpp"
#include "iclb/store.hpp"

namespace iclb {

inline constexpr const char* kOutRootEnv = "ICLB_OUT_ROOT";

/// Context pairing seed of the poisoned training corpora.
std::uint64_t attack_pairing_seed(const RunConfig& cfg);

/// Poisoning plan described by the attack section of `cfg`, drawn from the
/// training corpora with the given context pairing seed.
TrainingPlan make_attack_plan(const RunConfig& cfg, const Corpora& corpora, std::uint64_t pairing_seed);

/// Report label of the configured attack, e.g. "task-specific:segmentation".
std::string attack_label(const RunConfig& cfg);

int cli_dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err);
int cli_dispatch(int argc, const char* const* argv);

}  // namespace iclb
