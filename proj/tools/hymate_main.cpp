#include "hymate/cli.hpp"

int main(int argc, char** argv) { return hymate::cli_main(argc, argv); }
