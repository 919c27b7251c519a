#include <iostream>

#include "mtkd/cli.hpp"

int main(int argc, char** argv) { return mtkd::cli::run(argc, argv, std::cout, std::cerr); }
