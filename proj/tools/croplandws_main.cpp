#include "croplandws/cli.hpp"

#ifdef __GLIBC__
#include <malloc.h>
#endif

int main(int argc, char** argv) {
#ifdef __GLIBC__
  // Autograd graphs allocate and free many large buffers per step; keep them
  // on the heap instead of mmap/munmap round trips.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
  return croplandws::cli::run(argc, argv);
}
