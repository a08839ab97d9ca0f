#include "dpimg/cli.hpp"

int main(int argc, char** argv) { return dpimg::cli::Run(argc, argv); }
