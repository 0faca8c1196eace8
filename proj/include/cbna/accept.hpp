#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace cbna {

struct AcceptOptions {
  std::filesystem::path work_dir = "accept-run";
  int jobs = 1;
  // Reuse datasets and the trained checkpoint from a previous run in the same
  // work dir when their recorded settings match; anything missing or stale is
  // regenerated from the fixed seeds.
  bool reuse = true;
};

struct CriterionResult {
  int id = 0;
  std::string name;
  bool pass = false;
  std::string detail;
  double seconds = 0.0;
};

// Runs the full benchmark end to end: algebraic limit checks, statelessness,
// statistics and metric oracles, gradient checks, and the trained
// domain-shift study. Prints one line per criterion to stdout.
std::vector<CriterionResult> run_acceptance(const AcceptOptions& options);

bool all_passed(const std::vector<CriterionResult>& results);

}  // namespace cbna
