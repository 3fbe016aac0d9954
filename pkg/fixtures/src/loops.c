/* Hot loop calling a tiny leaf function argv[1] times.
 *
 * The leaf is the interception target for the "selective" build; "all"
 * additionally intercepts helper() and main(), so interception traffic is
 * strictly higher there.  The checksum printed at exit must be identical
 * across all build variants.
 */
#include <inttypes.h>
#include <stdint.h>
#include <stdio.h>
#include <stdlib.h>

__attribute__((noinline)) uint64_t leaf(uint64_t x)
{
    return x * 2654435761ULL + 17;
}

__attribute__((noinline)) uint64_t helper(uint64_t x)
{
    return x ^ (x >> 7);
}

int main(int argc, char **argv)
{
    uint64_t n = argc > 1 ? strtoull(argv[1], NULL, 10) : 1000;
    uint64_t checksum = 0;
    for (uint64_t i = 0; i < n; i++) {
        checksum += leaf(i);
        checksum ^= helper(checksum);
    }
    printf("loops checksum %" PRIu64 "\n", checksum);
    return 0;
}
