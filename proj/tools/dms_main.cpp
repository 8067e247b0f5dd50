#include <string>
#include <vector>

#include "dms/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return dms::cli::run_command(args);
}
