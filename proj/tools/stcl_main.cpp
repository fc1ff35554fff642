#include <iostream>

#include "stcl/cli.hpp"

int main(int argc, char** argv) { return stcl::cli::run_cli(argc, argv, std::cout, std::cerr); }
