#include "gridgnn/cli.hpp"

int main(int argc, char** argv) { return gridgnn::cli::run(argc, argv); }
