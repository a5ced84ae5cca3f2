#pragma once

#include <string>
#include <vector>

namespace lla::cli {

inline constexpr const char *kToolVersion = "0.3.0";

// Runs one `lla` command. args[0] is the program name. Returns the process
// exit code: 0 success, 2 usage or configuration error, 3 runtime error.
int dispatch(const std::vector<std::string> &args);

} // namespace lla::cli
