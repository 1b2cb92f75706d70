#include <iostream>

#include "ditsim/cli.hpp"

int main(int argc, char** argv) {
  return ditsim::cli::main_entry(argc, argv, std::cout, std::cerr);
}
