#include <iostream>

#include "ebnet/cli/commands.hpp"

int main(int argc, char** argv) { return ebnet::cli::run(argc, argv, std::cout, std::cerr); }
