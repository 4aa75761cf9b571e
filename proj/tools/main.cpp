#include <iostream>
#include <string>
#include <vector>

#include "spiboter/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return spiboter::cli::dispatch(args, std::cout, std::cerr);
}
