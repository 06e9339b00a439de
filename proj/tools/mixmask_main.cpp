#include "mixmask/cli.hpp"

int main(int argc, char** argv) { return mixmask::dispatch(argc, argv); }
