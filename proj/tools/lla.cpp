#include <string>
#include <vector>

#include "lla/cli.hpp"

int main(int argc, char **argv) {
  return lla::cli::dispatch(std::vector<std::string>(argv, argv + argc));
}
