#include <iostream>

#include "s3vos/cli.hpp"

int main(int argc, char** argv) { return s3vos::run_cli(argc, argv, std::cout, std::cerr); }
