/* Two threads hammering one monitored function.
 *
 * The runtime has a single session slot: calls from both threads are
 * counted, while counter sessions belong to whichever thread claimed the
 * slot.  Expected call count for the monitored function is 2 * argv[1].
 */
#include <inttypes.h>
#include <pthread.h>
#include <stdint.h>
#include <stdio.h>
#include <stdlib.h>

__attribute__((noinline)) uint64_t shared_work(uint64_t x)
{
    return x * 31 + 7;
}

struct task {
    uint64_t n;
    uint64_t sum;
};

static void *runner(void *arg)
{
    struct task *task = arg;
    uint64_t sum = 0;
    for (uint64_t i = 0; i < task->n; i++)
        sum += shared_work(i);
    task->sum = sum;
    return NULL;
}

int main(int argc, char **argv)
{
    uint64_t n = argc > 1 ? strtoull(argv[1], NULL, 10) : 1000;
    struct task a = {n, 0}, b = {n, 0};
    pthread_t ta, tb;
    if (pthread_create(&ta, NULL, runner, &a) != 0
        || pthread_create(&tb, NULL, runner, &b) != 0) {
        fprintf(stderr, "thread creation failed\n");
        return 1;
    }
    pthread_join(ta, NULL);
    pthread_join(tb, NULL);
    printf("threads checksum %" PRIu64 "\n", a.sum + b.sum);
    return 0;
}
