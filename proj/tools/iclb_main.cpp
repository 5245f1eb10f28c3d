#include "iclb/cli.hpp"

int main(int argc, char** argv) { return iclb::cli_dispatch(argc, argv); }
