#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace evim::cli {

/// Exit codes.
enum Exit : int { kOk = 0, kPropertyFailure = 1, kUsage = 2, kCorruptInput = 3 };

/// Runs one command line (without the program name). Normal output goes to
/// `out`, diagnostics to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace evim::cli
