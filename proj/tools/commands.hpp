#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace gradctrl::cli {

enum ExitCode : int {
  kExitOk = 0,
  kExitUsage = 2,
  kExitData = 3,
  kExitNumeric = 4,
  kExitMaxSteps = 5,
};

/// Runs one `gradctrl` invocation. `args` excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace gradctrl::cli
