#include <iostream>

#include "uadi/cli.hpp"

int main(int argc, char** argv) { return uadi::cli_main(argc, argv, std::cout, std::cerr); }
