#include <iostream>

#include "storynizor/cli.hpp"

int main(int argc, char** argv) {
    return storynizor::run_cli(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
