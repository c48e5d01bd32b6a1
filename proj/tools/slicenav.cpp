#include "slicenav/cli.hpp"

int main(int argc, char** argv) { return slicenav::cli_main(argc, argv); }
