#include "tslora/cli.hpp"

int main(int argc, char** argv) {
  return tslora::run_cli(argc, argv);
}
