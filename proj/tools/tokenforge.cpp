#include <string>
#include <vector>

#include "tokenforge/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return tokenforge::cli_dispatch(args);
}
