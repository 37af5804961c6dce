#pragma once

#include <string>
#include <vector>

namespace dsmoe {

// Full command-line surface; args excludes the program name. Returns the
// process exit code: 0 success, 1 usage/config error, 2 data/IO error,
// 3 numerical failure.
int cli_dispatch(const std::vector<std::string>& args);

}  // namespace dsmoe
