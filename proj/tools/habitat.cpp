#include "habitat/cli.hpp"

int main(int argc, char** argv) { return habitat::cli::main(argc, argv); }
