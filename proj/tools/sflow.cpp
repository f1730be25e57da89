#include "sflow/harness.hpp"

int main(int argc, char** argv) { return sflow::cli_dispatch(argc, argv); }
