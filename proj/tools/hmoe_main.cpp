#include "hmoe/cli.hpp"

#include <iostream>

int main(int argc, char** argv) { return hmoe::cli::run(argc, argv, std::cout, std::cerr); }
