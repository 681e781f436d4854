#pragma once

#include <string>
#include <vector>

namespace rangeseg {

/// Exit codes: 0 success, 2 usage, 3 config error, 4 missing file or
/// malformed container, 5 shape/argument error, 1 anything else.
enum ExitCode : int {
  kExitOk = 0,
  kExitOther = 1,
  kExitUsage = 2,
  kExitConfig = 3,
  kExitIo = 4,
  kExitShape = 5,
};

/// Runs one subcommand (gen-data | train | pretrain-renderer | render |
/// adapt | calibrate | eval | noise-experiment). args excludes the program
/// name. All output lands in the run directory; inputs are never mutated.
int run_cli(const std::vector<std::string>& args);

}  // namespace rangeseg
