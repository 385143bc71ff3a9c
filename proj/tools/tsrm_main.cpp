#include <iostream>

#include "tsrm/cli.hpp"

int main(int argc, char** argv) {
  return tsrm::run_cli(std::vector<std::string>(argv + 1, argv + argc),
                       std::cout, std::cerr);
}
