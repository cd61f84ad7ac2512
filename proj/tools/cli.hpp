#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace nlvt {

// Exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;     // a check did not pass, or an unexpected error
inline constexpr int kExitConfig = 2;      // bad arguments or configuration
inline constexpr int kExitMissing = 3;     // a file could not be opened
inline constexpr int kExitBadData = 4;     // malformed image, manifest or checkpoint

// Runs one command line (args excludes the program name). Diagnostics go to
// `err` as a single line; results go to `out`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace nlvt
