#include "corrdistill/cli.hpp"

int main(int argc, char** argv) { return corrdistill::cli::dispatch(argc, argv); }
