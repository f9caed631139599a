#include <iostream>

#include "mnce/cli.hpp"

int main(int argc, char** argv) { return mnce::cli::run(argc, argv, std::cout, std::cerr); }
