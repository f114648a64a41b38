#pragma once

#include <cstdint>
#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

#include "unimask/config.hpp"

namespace unimask::acceptance {

/// Budgets shared by the pattern criteria (3-7). Pre-trained models are
/// cached under `output_dir/cache` keyed by config hash.
struct Protocol {
  std::vector<std::uint64_t> seeds = {1, 2, 3};
  std::int64_t pretrain_updates = 10000;
  std::int64_t finetune_updates = 600;
  std::int64_t finetune_nfrz = 300;
  int finetune_lfrz = 0;
  /// Extra A-only utterances for the mixed pre-training run.
  std::size_t extra_a_utterances = 400;
};

struct SuiteOptions {
  std::filesystem::path output_dir = "runs/acceptance";
  Protocol protocol;
};

struct CriterionResult {
  int id = 0;
  std::string name;
  bool pass = false;
  /// Soft criteria only warn on failure.
  bool hard = true;
  std::string detail;
};

/// Suite names accepted by run_suite, "all" included.
std::vector<std::string> suite_names();

/// Run one suite (or "all"); prints one PASS/FAIL/WARN line per criterion.
std::vector<CriterionResult> run_suite(const std::string& name, const SuiteOptions& options,
                                       std::ostream& out);

/// Experiment config used for seed `seed` of the pattern criteria.
ExperimentConfig pattern_config(std::uint64_t seed, const Protocol& protocol);

}  // namespace unimask::acceptance
