#include "nmm/cli.hpp"

int main(int argc, char** argv) { return nmm::cli::run(argc, argv); }
