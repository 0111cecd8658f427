#include "ovis/cli.hpp"

int main(int argc, char** argv) {
  return ovis::run(std::vector<std::string>(argv + 1, argv + argc));
}
