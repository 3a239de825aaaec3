#include <stdio.h>
int main(void) { puts("cfit"); return 0; }
