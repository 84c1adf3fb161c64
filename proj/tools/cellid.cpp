#include "cellid/cli.hpp"

#include <iostream>

int main(int argc, char** argv) { return cellid::cli::run(argc, argv, std::cout, std::cerr); }
