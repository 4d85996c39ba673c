#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace bmlgest {

enum ExitCode : int {
  ok = 0,
  usage = 2,
  data_error = 3,
  divergence = 4,
};

// Runs one command line (args[0] is the program name). Normal output goes to
// `out`, diagnostics to `err`; the return value is the process exit code.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace bmlgest
