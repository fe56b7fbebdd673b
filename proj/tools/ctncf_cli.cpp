#include <string>
#include <vector>

#include "ctncf/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return ctncf::cli::run(args);
}
