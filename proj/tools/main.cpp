#include "multiwin/harness.hpp"

int main(int argc, char** argv) { return multiwin::cli_dispatch(argc, argv); }
