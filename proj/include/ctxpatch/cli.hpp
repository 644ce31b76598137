#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace ctxpatch {

enum ExitCode : int {
  kExitOk = 0,
  kExitInvalidConfig = 1,
  kExitMissingArtifact = 2,
  kExitUnderTrained = 3,
  kExitFailure = 4,
};

/// Runs one command line (args excludes the program name). Results go to
/// `out` as JSON lines; failures are one JSON line on `err`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace ctxpatch
