#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace tsrm {

/// Exit codes of the command-line tool.
enum ExitCode : int { kExitOk = 0, kExitRuntime = 1, kExitUsage = 2, kExitNumerical = 3 };

/// Runs one `tsrm` invocation. `args` excludes the program name. Results go
/// to `out`; usage text and errors to `err`.
int run_cli(const std::vector<std::string>& args, std::ostream& out,
            std::ostream& err);

}  // namespace tsrm
