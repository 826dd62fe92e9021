#include <iostream>

#include "ropeforge/cli.hpp"

int main(int argc, char** argv) { return ropeforge::cli::run(argc, argv, std::cout, std::cerr); }
