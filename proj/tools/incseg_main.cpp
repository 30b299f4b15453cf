#include <iostream>
#include <string>
#include <vector>

#include "incseg/cli.hpp"

int main(int argc, char** argv) {
    const std::vector<std::string> args(argv, argv + argc);
    return incseg::run_cli(args, std::cout, std::cerr);
}
