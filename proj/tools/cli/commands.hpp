#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace fieldnet::cli {

enum ExitCode : int {
  kExitOk = 0,
  kExitUsage = 1,    // bad arguments or configuration
  kExitData = 2,     // unreadable or invalid input data
  kExitNumeric = 3,  // non-finite values during computation
};

// Parses `args` (without the program name), runs the subcommand and returns
// its exit code. Errors are reported on `err`; tables and summaries go to
// `out`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace fieldnet::cli
