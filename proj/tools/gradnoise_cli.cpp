#include "gradnoise/harness.hpp"

int main(int argc, char** argv) { return gradnoise::run_cli(argc, argv); }
