#include "convmr/cli.hpp"

int main(int argc, char** argv) { return convmr::cli::run(argc, argv); }
