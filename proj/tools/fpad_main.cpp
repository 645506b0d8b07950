#include "fpad/cli.hpp"

int main(int argc, char** argv) { return fpad::run_cli(argc, argv); }
