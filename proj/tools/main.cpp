#include "cli.hpp"

int main(int argc, char** argv) { return hdmi::cli::run(argc, argv, std::cout, std::cerr); }
