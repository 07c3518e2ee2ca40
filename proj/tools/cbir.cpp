#include "cbir/pipeline.hpp"

int main(int argc, char** argv) { return cbir::cli::run_cli(argc, argv); }
