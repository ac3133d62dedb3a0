#include "cli.hpp"

int main(int argc, char** argv) { return modeseg::cli::run_cli(argc, argv); }
