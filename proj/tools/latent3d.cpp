#include "latent3d/cli.hpp"

int main(int argc, char** argv) { return latent3d::cli::run(argc, argv); }
