#pragma once

#include <iosfwd>

namespace evop::cli {

enum ExitCode : int {
    kExitOk = 0,
    kExitFailure = 1,
    kExitUsage = 2,
    kExitOracle = 3,
    kExitBudget = 4,
};

// Parses argv (argv[0] is the program name) and runs the chosen subcommand.
// Normal output goes to `out`, diagnostics to `err`.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace evop::cli
