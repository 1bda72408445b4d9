#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace saeprobe::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kDataFormat = 2, kNumeric = 3 };

// Runs one invocation; args excludes the program name. Payload goes to `out`,
// diagnostics and key=value logs to `err`.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace saeprobe::cli
