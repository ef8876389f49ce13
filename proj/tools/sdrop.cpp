#include <iostream>

#include "sdrop/cli.hpp"

int main(int argc, char** argv) { return sdrop::cli::run(argc, argv, std::cout, std::cerr); }
