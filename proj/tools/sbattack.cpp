#include "sb/harness.hpp"

int main(int argc, char** argv) { return sb::harness::cli_main(argc, argv); }
