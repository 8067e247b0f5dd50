#pragma once
#include <string>
#include <vector>

namespace dms::cli {

// Entry point behind the dms binary. args excludes the program name.
// Exit status: 0 success, 1 validation failure, 2 target miss or divergence.
int run_command(const std::vector<std::string>& args);

}  // namespace dms::cli
