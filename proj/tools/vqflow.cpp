#include "vqflow/cli.hpp"

int main(int argc, char** argv) {
  return vqflow::run_cli(std::vector<std::string>(argv + 1, argv + argc));
}
