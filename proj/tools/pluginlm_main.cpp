#include "pluginlm/cli.hpp"

int main(int argc, char** argv) { return pluginlm::cli::run(argc, argv); }
