#include "teleems/cli.hpp"

int main(int argc, char** argv) { return teleems::cli::run(argc, argv); }
