#include <iostream>
#include <string>
#include <vector>

#include "hdca/commands.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return hdca::run_cli(args, std::cout, std::cerr);
}
