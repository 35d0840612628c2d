#include "cli.hpp"

int main(int argc, char** argv) { return gpldan::cli::run(argc, argv); }
