#include <string>
#include <vector>

#include "dsmoe/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return dsmoe::cli_dispatch(args);
}
