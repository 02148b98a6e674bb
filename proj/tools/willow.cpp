#include "willow/cli.hpp"

int main(int argc, char** argv) { return willow::cli::dispatch(argc, argv); }
