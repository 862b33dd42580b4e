#include "metakkl/cli.hpp"

#include <iostream>

int main(int argc, char** argv) {
  return metakkl::cli::run(argc, argv, std::cout, std::cerr);
}
