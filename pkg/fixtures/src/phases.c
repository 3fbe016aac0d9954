/* Two compute phases (cache-walking, then arithmetic) for reload tests.
 *
 * With SCALPEL_PHASES_SYNC=<prefix> set, the program touches <prefix>.ready
 * between the phases and waits (up to 30 s) for <prefix>.go before
 * continuing, giving a test a deterministic window to swap the monitoring
 * configuration.  The synchronization never changes the computation, so the
 * printed checksum stays identical across variants and sync modes.
 */
#include <inttypes.h>
#include <stdint.h>
#include <stdio.h>
#include <stdlib.h>
#include <string.h>
#include <sys/stat.h>
#include <unistd.h>

#define BUF_WORDS (1 << 16)

static uint64_t buffer[BUF_WORDS];

__attribute__((noinline)) uint64_t phase_cache(uint64_t seed)
{
    uint64_t sum = seed;
    for (uint32_t i = 0; i < BUF_WORDS; i += 16) {
        buffer[(i * 31u) & (BUF_WORDS - 1)] += i + seed;
        sum += buffer[i];
    }
    return sum;
}

__attribute__((noinline)) uint64_t phase_math(uint64_t seed)
{
    double x = (double)(seed & 1023) + 1.5;
    for (int i = 0; i < 4096; i++)
        x = x * 1.0000001 + 0.25;
    return seed + (uint64_t)x;
}

static void wait_for_go(const char *prefix)
{
    char ready[480], go[480];
    snprintf(ready, sizeof(ready), "%s.ready", prefix);
    snprintf(go, sizeof(go), "%s.go", prefix);
    FILE *fh = fopen(ready, "w");
    if (fh)
        fclose(fh);
    for (int i = 0; i < 3000; i++) {
        struct stat st;
        if (stat(go, &st) == 0)
            return;
        usleep(10000);
    }
}

int main(int argc, char **argv)
{
    uint64_t iters = argc > 1 ? strtoull(argv[1], NULL, 10) : 100;
    uint64_t checksum = 0;
    for (uint64_t i = 0; i < iters; i++)
        checksum += phase_cache(i);
    const char *sync_prefix = getenv("SCALPEL_PHASES_SYNC");
    if (sync_prefix && sync_prefix[0])
        wait_for_go(sync_prefix);
    for (uint64_t i = 0; i < iters; i++)
        checksum ^= phase_math(i);
    printf("phases checksum %" PRIu64 "\n", checksum);
    return 0;
}
