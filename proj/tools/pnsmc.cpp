#include "pnsmc/cli.hpp"

int main(int argc, char** argv) { return pnsmc::run_cli(argc, argv); }
