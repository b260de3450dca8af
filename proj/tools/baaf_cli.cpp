#include <string>
#include <vector>

#include "baaf/cli.hpp"

int main(int argc, char** argv) { return baaf::cli::run(std::vector<std::string>(argv + 1, argv + argc)); }
