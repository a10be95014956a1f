#include "glab/harness.hpp"

int main(int argc, char** argv) { return glab::cli(argc, argv); }
