#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace taskaug {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

// Runs the command line `args` (args[0] is the program name). Returns the
// process exit code: 0 success, 1 runtime failure, 2 usage or validation error.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

} // namespace taskaug
