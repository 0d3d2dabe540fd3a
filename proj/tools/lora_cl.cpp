#include <iostream>
#include <string>
#include <vector>

#include "lora_cl/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return lora_cl::cli::run_cli(args, std::cout, std::cerr);
}
