#include <cstdio>

int main(int argc, char** argv) {
  (void)argc;
  (void)argv;
  std::fprintf(stderr, "lungseg: commands not wired up yet\n");
  return 1;
}
