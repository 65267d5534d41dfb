#include <iostream>

#include "stflow/cli.hpp"

int main(int argc, char** argv) {
  return stflow::run_cli(std::vector<std::string>(argv, argv + argc), std::cout, std::cerr);
}
