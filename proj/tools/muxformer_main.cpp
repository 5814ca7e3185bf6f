#include <cstdio>

int main() {
  std::puts("muxformer: cli not wired yet");
  return 0;
}
