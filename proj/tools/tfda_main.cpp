#include <vector>

#include "tfda/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return tfda::run_cli(args);
}
