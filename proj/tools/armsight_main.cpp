#include "armsight/cli.hpp"

int main(int argc, char** argv) {
  armsight::cli::tune_allocator();
  return armsight::cli::run(argc, argv);
}
