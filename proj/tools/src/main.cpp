#include "swax/cli.hpp"

int main(int argc, char** argv) { return swax::run_cli(argc, argv); }
