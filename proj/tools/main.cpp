#include "commands.hpp"

int main(int argc, char** argv) { return mixsga::cli::run(argc, argv); }
