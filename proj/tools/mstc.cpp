#include <iostream>

#include "mstc/cli.hpp"

int main(int argc, char** argv) {
  return mstc::run_cli({argv + 1, argv + argc}, std::cout, std::cerr);
}
