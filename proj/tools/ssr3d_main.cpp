#include <iostream>
#include <string>
#include <vector>

#include "ssr3d/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return ssr3d::cli::run(args, std::cout, std::cerr);
}
