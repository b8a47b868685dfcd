#include "stable_dml/cli.hpp"

int main(int argc, char** argv) { return sdml::cli::main(argc, argv); }
