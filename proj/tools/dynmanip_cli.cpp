#include "dynmanip/experiment_cli.hpp"

int main(int argc, char** argv) { return dynmanip::cli::run(argc, argv); }
