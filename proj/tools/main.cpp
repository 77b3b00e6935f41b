#include <string>
#include <vector>

#include "capsl_cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return capsl::cli::dispatch(args);
}
