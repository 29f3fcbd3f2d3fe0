#include "leafgrad/cli.hpp"

int main(int argc, char** argv) { return leafgrad::cli::run(argc, argv); }
