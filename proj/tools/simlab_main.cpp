#include "simlab/report/cli.hpp"

int main(int argc, char** argv) { return simlab::cli::run(argc, argv); }
