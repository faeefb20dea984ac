#include <malloc.h>

#include <iostream>
#include <string>
#include <vector>

#include "cifs/platform/cli.hpp"

int main(int argc, char** argv) {
  // Keep large activation buffers mapped between batches instead of
  // returning them to the kernel after every free.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 256 << 20);
  return cifs::platform::run_cli(std::vector<std::string>(argv, argv + argc), std::cout, std::cerr);
}
