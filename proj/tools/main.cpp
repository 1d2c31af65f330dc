#include <cstdio>

int main() {
    std::puts("ctrlab: subcommands not wired yet");
    return 0;
}
