#include <cstdio>

int main() {
  std::puts("ptal: subcommands not wired up yet");
  return 1;
}
