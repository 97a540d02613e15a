#include <iostream>

#include "carelay/cli.hpp"

int main(int argc, char** argv) { return carelay::cli::run(argc, argv, std::cout, std::cerr); }
