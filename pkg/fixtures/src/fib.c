/* Recursive Fibonacci: recursion retention plus parent-wins nesting.
 *
 * fib(n) makes 2*fib_calls(n-1)+1 nested self-calls (177 invocations for
 * n=10) and combines results through fib_combine, which a config may monitor
 * alongside fib to observe counted-but-not-measured nested calls.
 */
#include <inttypes.h>
#include <stdint.h>
#include <stdio.h>
#include <stdlib.h>

__attribute__((noinline)) long fib_combine(long a, long b)
{
    return a + b;
}

__attribute__((noinline)) long fib(int n)
{
    if (n < 2)
        return n;
    return fib_combine(fib(n - 1), fib(n - 2));
}

#ifndef FIXTURE_NO_MAIN
int main(int argc, char **argv)
{
    int n = argc > 1 ? atoi(argv[1]) : 10;
    printf("fib checksum %ld\n", fib(n));
    return 0;
}
#endif
