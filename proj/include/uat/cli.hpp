#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "uat/error.hpp"

namespace uat {

enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,
  kExitUsage = 2,
  kExitIo = 3,
  kExitNumerical = 4,
  kExitFormat = 5,
};

int exit_code_for(ErrorCode code);

/// Entry point of the uat-lab tool. args excludes the program name.
/// Subcommands: generate, train, infer, decompose, metrics, experiment,
/// bench-efficiency, rerun.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace uat
