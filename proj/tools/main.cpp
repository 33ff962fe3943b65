#include "cli.hpp"

int main(int argc, char** argv) { return netlmm::cli::run_cli(argc, argv); }
