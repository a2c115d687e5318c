#include "dcedit/cli.hpp"

int main(int argc, char** argv) { return dcedit::cli::run(argc, argv); }
