#include "edue/cli.hpp"

int main(int argc, char** argv) { return edue::cli::run_cli(argc, argv); }
