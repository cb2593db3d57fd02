#include "lexnmt/cli.hpp"

int main(int argc, char** argv) { return lexnmt::run_command(argc, argv); }
