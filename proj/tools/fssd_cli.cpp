#include <cstdio>
int main() { std::puts("fssd cli placeholder"); return 0; }
