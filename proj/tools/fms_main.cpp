#include <iostream>

#include "fms/cli.hpp"

int main(int argc, char** argv) { return fms::dispatch(argc, argv, std::cout, std::cerr); }
