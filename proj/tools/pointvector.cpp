#include "pointvector/cli.hpp"

int main(int argc, char** argv) { return pointvector::cli::run(argc, argv); }
