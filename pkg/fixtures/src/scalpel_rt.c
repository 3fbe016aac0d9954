/* Native callback runtime for compiler-instrumented binaries.
 *
 * Protocol summary (shared with the Python tooling):
 *   - config file:   BINARY/NO_FUNCTIONS, [FUNCTION] FUNC_NAME NO_EVENTS
 *                    MULTIPLEX_PERIOD, [EVENT] ID NO_SUBEVENTS, [SUBEVENT] ID
 *   - environment:   SCALPEL_CONFIG, SCALPEL_OUT, SCALPEL_MAP,
 *                    SCALPEL_NO_RETAIN
 *   - report CSV:    function,epoch,group,event,value,calls
 *                    (group -1 + event CALLS carries the total call count)
 *   - reload:        SIGUSR1 arms a deferred swap; it applies at the next
 *                    callback with no live counter session, flushing the old
 *                    epoch's totals as a partial report.
 *
 * One counter session exists at a time, owned by the thread that opened it.
 * It is retained across recursive and immediately successive calls to the
 * owner; nested monitored calls are counted but not measured (parent wins).
 * Event groups (width 4) rotate after every MULTIPLEX_PERIOD calls, on call
 * boundaries only.
 */
#define _GNU_SOURCE

#include "scalpel_rt.h"

#include <elf.h>
#include <errno.h>
#include <fcntl.h>
#include <pthread.h>
#include <signal.h>
#include <stdio.h>
#include <stdint.h>
#include <stdlib.h>
#include <string.h>
#include <sys/ioctl.h>
#include <sys/stat.h>
#include <sys/syscall.h>
#include <sys/types.h>
#include <unistd.h>

#include <linux/perf_event.h>

#define NOINSTR __attribute__((no_instrument_function))
#define GROUP_WIDTH 4
#define MAX_UNITS 64
#define MAX_GROUPS ((MAX_UNITS + GROUP_WIDTH - 1) / GROUP_WIDTH)
#define NAME_MAX_LEN 128

/* ------------------------------------------------------------------ data */

struct group {
    int n_units;
    char units[GROUP_WIDTH][NAME_MAX_LEN];
    int fds[GROUP_WIDTH];        /* perf fds, or -1 when counting null */
    uint64_t values[GROUP_WIDTH];/* used only in null-counting mode */
};

struct context {
    char name[NAME_MAX_LEN];
    uintptr_t addr;
    uint64_t multiplex_period;
    int n_groups;
    struct group groups[MAX_GROUPS];
    uint64_t call_count;         /* atomic: every observed entry */
    uint64_t calls_per_group[MAX_GROUPS]; /* owner-only, under lock */
    int disabled;
};

struct epoch {
    int id;
    char binary[NAME_MAX_LEN];
    int n_contexts;
    struct context *contexts;    /* sorted by addr for binary search */
};

static struct epoch *g_epoch;    /* swapped under g_lock; old epochs leak */
static int g_enabled;
static int g_retain = 1;
static volatile sig_atomic_t g_reload_pending;
static uint64_t g_unmatched_exits;
static int g_perf_broken;        /* first perf failure disables further tries */

static struct {
    struct context *ctx;         /* NULL = slot free */
    long depth;
    int active_group;
    volatile int pending_stop;
    pthread_t owner;
} g_session;

static pthread_mutex_t g_lock = PTHREAD_MUTEX_INITIALIZER;
static scalpel_callback_fn g_override_enter, g_override_exit;

NOINSTR void scalpel_rt_anchor(void) {}

/* ------------------------------------------------------- symbol loading */

struct symbol {
    uintptr_t addr;
    char name[NAME_MAX_LEN];
};

static struct symbol *g_symbols;
static int g_n_symbols;

static NOINSTR int sym_cmp(const void *a, const void *b)
{
    const struct symbol *sa = a, *sb = b;
    if (sa->addr != sb->addr)
        return sa->addr < sb->addr ? -1 : 1;
    return strcmp(sa->name, sb->name);
}

/* Defined function symbols from our own image, link-time addresses. */
static NOINSTR int load_own_elf_symbols(void)
{
    FILE *fh = fopen("/proc/self/exe", "rb");
    if (!fh)
        return -1;
    int rc = -1;
    unsigned char *data = NULL;
    long size;
    if (fseek(fh, 0, SEEK_END) != 0 || (size = ftell(fh)) <= 0)
        goto out;
    data = malloc((size_t)size);
    if (!data)
        goto out;
    rewind(fh);
    if (fread(data, 1, (size_t)size, fh) != (size_t)size)
        goto out;
    if (size < (long)sizeof(Elf64_Ehdr) || memcmp(data, ELFMAG, SELFMAG) != 0
        || data[EI_CLASS] != ELFCLASS64)
        goto out;
    const Elf64_Ehdr *eh = (const Elf64_Ehdr *)data;
    const Elf64_Shdr *sh = (const Elf64_Shdr *)(data + eh->e_shoff);
    const Elf64_Shdr *symtab = NULL;
    for (int i = 0; i < eh->e_shnum; i++)
        if (sh[i].sh_type == SHT_SYMTAB)
            symtab = &sh[i];
    if (!symtab)
        for (int i = 0; i < eh->e_shnum; i++)
            if (sh[i].sh_type == SHT_DYNSYM)
                symtab = &sh[i];
    if (!symtab || symtab->sh_link >= eh->e_shnum)
        goto out;
    const char *strtab = (const char *)(data + sh[symtab->sh_link].sh_offset);
    const Elf64_Sym *syms = (const Elf64_Sym *)(data + symtab->sh_offset);
    int count = (int)(symtab->sh_size / sizeof(Elf64_Sym));
    g_symbols = calloc((size_t)count, sizeof(*g_symbols));
    if (!g_symbols)
        goto out;
    for (int i = 0; i < count; i++) {
        if (ELF64_ST_TYPE(syms[i].st_info) != STT_FUNC || syms[i].st_shndx == SHN_UNDEF)
            continue;
        const char *name = strtab + syms[i].st_name;
        if (!name[0])
            continue;
        struct symbol *slot = &g_symbols[g_n_symbols++];
        slot->addr = syms[i].st_value;
        snprintf(slot->name, sizeof(slot->name), "%s", name);
    }
    rc = 0;
out:
    free(data);
    if (rc != 0)
        free(g_symbols);
    fclose(fh);
    return rc;
}

/* Portable text map: "<hex-start> <hex-size> <name>" per line. */
static NOINSTR int load_map_file(const char *path)
{
    FILE *fh = fopen(path, "r");
    if (!fh)
        return -1;
    int cap = 256;
    g_symbols = calloc((size_t)cap, sizeof(*g_symbols));
    g_n_symbols = 0;
    char line[512];
    while (g_symbols && fgets(line, sizeof(line), fh)) {
        unsigned long long start, sym_size;
        char name[NAME_MAX_LEN];
        if (line[0] == '#' || line[0] == '\n')
            continue;
        if (sscanf(line, "%llx %llx %127s", &start, &sym_size, name) != 3)
            continue;
        if (g_n_symbols == cap) {
            cap *= 2;
            struct symbol *grown = realloc(g_symbols, (size_t)cap * sizeof(*g_symbols));
            if (!grown) {
                free(g_symbols);
                g_symbols = NULL;
                break;
            }
            g_symbols = grown;
        }
        g_symbols[g_n_symbols].addr = (uintptr_t)start;
        snprintf(g_symbols[g_n_symbols].name, NAME_MAX_LEN, "%s", name);
        g_n_symbols++;
    }
    fclose(fh);
    return g_symbols ? 0 : -1;
}

static NOINSTR int load_symbols(void)
{
    const char *map = getenv("SCALPEL_MAP");
    int rc = map ? load_map_file(map) : load_own_elf_symbols();
    if (rc != 0 || g_n_symbols == 0)
        return -1;
    qsort(g_symbols, (size_t)g_n_symbols, sizeof(*g_symbols), sym_cmp);
    /* PIE load bias: every link-time address shifts by the same delta */
    intptr_t bias = 0;
    for (int i = 0; i < g_n_symbols; i++) {
        if (strcmp(g_symbols[i].name, "scalpel_rt_anchor") == 0) {
            bias = (intptr_t)((uintptr_t)&scalpel_rt_anchor - g_symbols[i].addr);
            break;
        }
    }
    if (bias)
        for (int i = 0; i < g_n_symbols; i++)
            g_symbols[i].addr += bias;
    return 0;
}

/* unique match required; duplicates are ambiguous and unresolvable */
static NOINSTR int lookup_symbol(const char *name, uintptr_t *addr)
{
    int hits = 0;
    for (int i = 0; i < g_n_symbols; i++) {
        if (strcmp(g_symbols[i].name, name) == 0) {
            if (hits++ == 0)
                *addr = g_symbols[i].addr;
        }
    }
    return hits == 1 ? 0 : (hits == 0 ? -1 : -2);
}

/* ------------------------------------------------------- config parsing */

struct parsed_function {
    char name[NAME_MAX_LEN];
    uint64_t period;
    int n_units;
    char units[MAX_UNITS][NAME_MAX_LEN];
};

struct parsed_config {
    char binary[NAME_MAX_LEN];
    int n_functions;
    struct parsed_function *functions;
};

static NOINSTR void strip_line(char *line)
{
    char *comment = strstr(line, "//");
    if (comment)
        *comment = '\0';
    size_t len = strlen(line);
    while (len && (line[len - 1] == '\n' || line[len - 1] == '\r'
                   || line[len - 1] == ' ' || line[len - 1] == '\t'))
        line[--len] = '\0';
    size_t skip = strspn(line, " \t");
    if (skip)
        memmove(line, line + skip, len - skip + 1);
}

static NOINSTR int key_value(const char *line, const char *key, char *out, size_t out_size)
{
    size_t klen = strlen(key);
    if (strncmp(line, key, klen) != 0)
        return -1;
    const char *rest = line + klen;
    rest += strspn(rest, " \t");
    if (*rest != '=')
        return -1;
    rest++;
    rest += strspn(rest, " \t");
    snprintf(out, out_size, "%s", rest);
    return 0;
}

#define PARSE_FAIL(...) do { \
        fprintf(stderr, "scalpel_rt: config line %d: ", lineno); \
        fprintf(stderr, __VA_ARGS__); \
        fputc('\n', stderr); \
        goto fail; \
    } while (0)

/* Returns NULL on malformed input; the whole file is rejected, never half. */
static NOINSTR struct parsed_config *parse_config_file(const char *path)
{
    FILE *fh = fopen(path, "r");
    if (!fh) {
        fprintf(stderr, "scalpel_rt: cannot open config %s: %s\n", path, strerror(errno));
        return NULL;
    }
    struct parsed_config *cfg = calloc(1, sizeof(*cfg));
    struct parsed_function *fn = NULL;
    int lineno = 0, declared_functions = -1, declared_events = -1;
    int declared_subevents = -1, in_event = 0, in_subevent = 0;
    int n_events = 0, n_subevents = 0, have_binary = 0;
    int fn_cap = 0;
    char line[512], value[NAME_MAX_LEN], event_id[NAME_MAX_LEN];
    if (!cfg)
        goto fail;
    event_id[0] = '\0';
    while (fgets(line, sizeof(line), fh)) {
        lineno++;
        strip_line(line);
        if (!line[0])
            continue;
        if (strcmp(line, "[FUNCTION]") == 0) {
            if (fn || in_event || in_subevent)
                PARSE_FAIL("misnested [FUNCTION]");
            if (cfg->n_functions == fn_cap) {
                fn_cap = fn_cap ? fn_cap * 2 : 4;
                struct parsed_function *grown =
                    realloc(cfg->functions, (size_t)fn_cap * sizeof(*fn));
                if (!grown)
                    goto fail;
                cfg->functions = grown;
            }
            fn = &cfg->functions[cfg->n_functions];
            memset(fn, 0, sizeof(*fn));
            declared_events = -1;
            n_events = 0;
        } else if (strcmp(line, "[/FUNCTION]") == 0) {
            if (!fn || in_event || in_subevent)
                PARSE_FAIL("misnested [/FUNCTION]");
            if (!fn->name[0])
                PARSE_FAIL("missing FUNC_NAME");
            if (declared_events < 0 || declared_events != n_events)
                PARSE_FAIL("event count mismatch for %s", fn->name);
            for (int i = 0; i < cfg->n_functions; i++)
                if (strcmp(cfg->functions[i].name, fn->name) == 0)
                    PARSE_FAIL("duplicate function name %s", fn->name);
            cfg->n_functions++;
            fn = NULL;
        } else if (strcmp(line, "[EVENT]") == 0) {
            if (!fn || in_event)
                PARSE_FAIL("misnested [EVENT]");
            in_event = 1;
            declared_subevents = -1;
            n_subevents = 0;
            event_id[0] = '\0';
        } else if (strcmp(line, "[/EVENT]") == 0) {
            if (!in_event || in_subevent)
                PARSE_FAIL("misnested [/EVENT]");
            if (!event_id[0])
                PARSE_FAIL("missing event ID");
            if (declared_subevents < 0 || declared_subevents != n_subevents)
                PARSE_FAIL("subevent count mismatch for %s", event_id);
            if (n_subevents == 0) {
                if (fn->n_units == MAX_UNITS)
                    PARSE_FAIL("too many measurement units");
                snprintf(fn->units[fn->n_units++], NAME_MAX_LEN, "%s", event_id);
            }
            in_event = 0;
            n_events++;
        } else if (strcmp(line, "[SUBEVENT]") == 0) {
            if (!in_event || in_subevent)
                PARSE_FAIL("misnested [SUBEVENT]");
            in_subevent = 1;
        } else if (strcmp(line, "[/SUBEVENT]") == 0) {
            if (!in_subevent)
                PARSE_FAIL("misnested [/SUBEVENT]");
            in_subevent = 0;
        } else if (key_value(line, "BINARY", value, sizeof(value)) == 0) {
            snprintf(cfg->binary, sizeof(cfg->binary), "%s", value);
            have_binary = 1;
        } else if (key_value(line, "NO_FUNCTIONS", value, sizeof(value)) == 0) {
            declared_functions = atoi(value);
        } else if (key_value(line, "FUNC_NAME", value, sizeof(value)) == 0) {
            if (!fn)
                PARSE_FAIL("FUNC_NAME outside [FUNCTION]");
            snprintf(fn->name, sizeof(fn->name), "%s", value);
        } else if (key_value(line, "NO_EVENTS", value, sizeof(value)) == 0) {
            if (!fn)
                PARSE_FAIL("NO_EVENTS outside [FUNCTION]");
            declared_events = atoi(value);
        } else if (key_value(line, "MULTIPLEX_PERIOD", value, sizeof(value)) == 0) {
            if (!fn)
                PARSE_FAIL("MULTIPLEX_PERIOD outside [FUNCTION]");
            fn->period = strtoull(value, NULL, 10);
        } else if (key_value(line, "NO_SUBEVENTS", value, sizeof(value)) == 0) {
            if (!in_event)
                PARSE_FAIL("NO_SUBEVENTS outside [EVENT]");
            declared_subevents = atoi(value);
        } else if (key_value(line, "ID", value, sizeof(value)) == 0) {
            if (in_subevent) {
                if (fn->n_units == MAX_UNITS)
                    PARSE_FAIL("too many measurement units");
                snprintf(fn->units[fn->n_units], NAME_MAX_LEN, "%.63s:%.62s",
                         event_id, value);
                fn->n_units++;
                n_subevents++;
            } else if (in_event) {
                snprintf(event_id, sizeof(event_id), "%s", value);
            } else {
                PARSE_FAIL("ID outside [EVENT]");
            }
        } else {
            PARSE_FAIL("unknown key: %s", line);
        }
    }
    if (fn || in_event || in_subevent) {
        fprintf(stderr, "scalpel_rt: config: unclosed block\n");
        goto fail;
    }
    if (!have_binary || declared_functions < 0
        || declared_functions != cfg->n_functions) {
        fprintf(stderr, "scalpel_rt: config: missing keys or function count mismatch\n");
        goto fail;
    }
    fclose(fh);
    return cfg;
fail:
    if (cfg)
        free(cfg->functions);
    free(cfg);
    fclose(fh);
    return NULL;
}

/* --------------------------------------------------------- perf counters */

struct generic_event {
    const char *name;
    uint32_t type;
    uint64_t config;
};

static const struct generic_event GENERIC_EVENTS[] = {
    {"CYCLES", PERF_TYPE_HARDWARE, PERF_COUNT_HW_CPU_CYCLES},
    {"INSTRUCTIONS", PERF_TYPE_HARDWARE, PERF_COUNT_HW_INSTRUCTIONS},
    {"CACHE_REFERENCES", PERF_TYPE_HARDWARE, PERF_COUNT_HW_CACHE_REFERENCES},
    {"CACHE_MISSES", PERF_TYPE_HARDWARE, PERF_COUNT_HW_CACHE_MISSES},
    {"BRANCH_INSTRUCTIONS", PERF_TYPE_HARDWARE, PERF_COUNT_HW_BRANCH_INSTRUCTIONS},
    {"BRANCH_MISSES", PERF_TYPE_HARDWARE, PERF_COUNT_HW_BRANCH_MISSES},
    {"CPU_CLOCK", PERF_TYPE_SOFTWARE, PERF_COUNT_SW_CPU_CLOCK},
    {"TASK_CLOCK", PERF_TYPE_SOFTWARE, PERF_COUNT_SW_TASK_CLOCK},
    {"PAGE_FAULTS", PERF_TYPE_SOFTWARE, PERF_COUNT_SW_PAGE_FAULTS},
    {"CONTEXT_SWITCHES", PERF_TYPE_SOFTWARE, PERF_COUNT_SW_CONTEXT_SWITCHES},
};

static NOINSTR int perf_open_unit(const char *unit, int leader_fd)
{
    char base[NAME_MAX_LEN];
    snprintf(base, sizeof(base), "%s", unit);
    char *colon = strchr(base, ':');
    if (colon)
        *colon = '\0';  /* qualifiers have no generic mapping; count the base */
    const struct generic_event *ev = NULL;
    for (size_t i = 0; i < sizeof(GENERIC_EVENTS) / sizeof(*GENERIC_EVENTS); i++)
        if (strcmp(GENERIC_EVENTS[i].name, base) == 0)
            ev = &GENERIC_EVENTS[i];
    if (!ev)
        return -1;
    struct perf_event_attr attr;
    memset(&attr, 0, sizeof(attr));
    attr.type = ev->type;
    attr.size = sizeof(attr);
    attr.config = ev->config;
    attr.disabled = 1;
    attr.inherit = 1;
    attr.exclude_kernel = 1;
    attr.exclude_hv = 1;
    return (int)syscall(SYS_perf_event_open, &attr, 0, -1, leader_fd, 0);
}

static NOINSTR void group_open_counters(struct group *group)
{
    for (int i = 0; i < group->n_units; i++)
        group->fds[i] = -1;
    if (g_perf_broken)
        return;
    for (int i = 0; i < group->n_units; i++) {
        int fd = perf_open_unit(group->units[i], i == 0 ? -1 : group->fds[0]);
        if (fd < 0) {
            g_perf_broken = 1;  /* degrade to call counting, values stay 0 */
            for (int j = 0; j < i; j++) {
                close(group->fds[j]);
                group->fds[j] = -1;
            }
            return;
        }
        group->fds[i] = fd;
    }
}

static NOINSTR void group_enable(struct group *group, int enable)
{
    if (group->fds[0] < 0)
        return;
    ioctl(group->fds[0], enable ? PERF_EVENT_IOC_ENABLE : PERF_EVENT_IOC_DISABLE,
          PERF_IOC_FLAG_GROUP);
}

static NOINSTR uint64_t group_read_unit(struct group *group, int unit)
{
    if (group->fds[unit] < 0)
        return group->values[unit];
    uint64_t value = 0;
    if (read(group->fds[unit], &value, sizeof(value)) != sizeof(value))
        return 0;
    return value;
}

static NOINSTR void group_close_counters(struct group *group)
{
    for (int i = 0; i < group->n_units; i++) {
        if (group->fds[i] >= 0) {
            close(group->fds[i]);
            group->fds[i] = -1;
        }
    }
}

/* ---------------------------------------------------------- epoch install */

static NOINSTR int ctx_cmp(const void *a, const void *b)
{
    const struct context *ca = a, *cb = b;
    return ca->addr < cb->addr ? -1 : (ca->addr > cb->addr ? 1 : 0);
}

static NOINSTR struct epoch *install_epoch(const struct parsed_config *cfg, int id)
{
    struct epoch *epoch = calloc(1, sizeof(*epoch));
    if (!epoch)
        return NULL;
    epoch->id = id;
    snprintf(epoch->binary, sizeof(epoch->binary), "%s", cfg->binary);
    epoch->contexts = calloc((size_t)(cfg->n_functions ? cfg->n_functions : 1),
                             sizeof(*epoch->contexts));
    if (!epoch->contexts) {
        free(epoch);
        return NULL;
    }
    for (int i = 0; i < cfg->n_functions; i++) {
        const struct parsed_function *fn = &cfg->functions[i];
        uintptr_t addr = 0;
        int rc = lookup_symbol(fn->name, &addr);
        if (rc != 0) {
            fprintf(stderr, "scalpel_rt: warning: '%s' %s; not monitored\n",
                    fn->name, rc == -1 ? "is not in the symbol table" : "is ambiguous");
            continue;
        }
        struct context *ctx = &epoch->contexts[epoch->n_contexts];
        memset(ctx, 0, sizeof(*ctx));
        snprintf(ctx->name, sizeof(ctx->name), "%s", fn->name);
        ctx->addr = addr;
        ctx->multiplex_period = fn->period;
        ctx->n_groups = (fn->n_units + GROUP_WIDTH - 1) / GROUP_WIDTH;
        if (fn->period == 0 && ctx->n_groups > 1) {
            fprintf(stderr, "scalpel_rt: warning: '%s' needs %d groups but "
                    "multiplexing is disabled; not monitored\n",
                    fn->name, ctx->n_groups);
            continue;
        }
        for (int u = 0; u < fn->n_units; u++) {
            struct group *group = &ctx->groups[u / GROUP_WIDTH];
            snprintf(group->units[group->n_units], NAME_MAX_LEN, "%s", fn->units[u]);
            group->n_units++;
        }
        for (int gi = 0; gi < ctx->n_groups; gi++)
            group_open_counters(&ctx->groups[gi]);
        epoch->n_contexts++;
    }
    qsort(epoch->contexts, (size_t)epoch->n_contexts, sizeof(*epoch->contexts),
          ctx_cmp);
    return epoch;
}

static NOINSTR struct context *lookup_context(struct epoch *epoch, uintptr_t addr)
{
    if (!epoch)
        return NULL;
    int lo = 0, hi = epoch->n_contexts - 1;
    while (lo <= hi) {
        int mid = (lo + hi) / 2;
        if (epoch->contexts[mid].addr == addr)
            return &epoch->contexts[mid];
        if (epoch->contexts[mid].addr < addr)
            lo = mid + 1;
        else
            hi = mid - 1;
    }
    return NULL;
}

/* -------------------------------------------------------------- reports */

static NOINSTR const char *rank_tag(void)
{
    static const char *vars[] = {"OMPI_COMM_WORLD_RANK", "PMI_RANK",
                                 "PMIX_RANK", "SLURM_PROCID"};
    for (size_t i = 0; i < sizeof(vars) / sizeof(*vars); i++) {
        const char *value = getenv(vars[i]);
        if (value)
            return value;
    }
    return NULL;
}

static NOINSTR int name_order(const void *a, const void *b)
{
    return strcmp((*(const struct context **)a)->name,
                  (*(const struct context **)b)->name);
}

static NOINSTR void emit_epoch_report(struct epoch *epoch)
{
    if (!epoch)
        return;
    const char *rank = rank_tag();
    FILE *out = stdout;
    const char *base = getenv("SCALPEL_OUT");
    char path[512];
    if (base && base[0]) {
        if (rank)
            snprintf(path, sizeof(path), "%s.pid%d.rank%s", base, (int)getpid(), rank);
        else
            snprintf(path, sizeof(path), "%s.pid%d", base, (int)getpid());
        out = fopen(path, "a");
        if (!out) {
            fprintf(stderr, "scalpel_rt: cannot write report %s: %s\n", path,
                    strerror(errno));
            return;
        }
    }
    fprintf(out, "# counter report: binary=%s epoch=%d pid=%d rank=%s\n",
            epoch->binary, epoch->id, (int)getpid(), rank ? rank : "-");
    struct context **order = calloc((size_t)(epoch->n_contexts ? epoch->n_contexts : 1),
                                    sizeof(*order));
    if (!order) {
        if (out != stdout)
            fclose(out);
        return;
    }
    for (int i = 0; i < epoch->n_contexts; i++)
        order[i] = &epoch->contexts[i];
    qsort(order, (size_t)epoch->n_contexts, sizeof(*order), name_order);
    for (int i = 0; i < epoch->n_contexts; i++) {
        struct context *ctx = order[i];
        for (int gi = 0; gi < ctx->n_groups; gi++)
            for (int u = 0; u < ctx->groups[gi].n_units; u++)
                fprintf(out, "# %-24s %12llu  %5d  %-32s %16llu %12llu\n",
                        ctx->name, (unsigned long long)ctx->call_count, gi,
                        ctx->groups[gi].units[u],
                        (unsigned long long)group_read_unit(&ctx->groups[gi], u),
                        (unsigned long long)ctx->calls_per_group[gi]);
    }
    fprintf(out, "function,epoch,group,event,value,calls\n");
    for (int i = 0; i < epoch->n_contexts; i++) {
        struct context *ctx = order[i];
        fprintf(out, "%s,%d,-1,CALLS,%llu,%llu\n", ctx->name, epoch->id,
                (unsigned long long)ctx->call_count,
                (unsigned long long)ctx->call_count);
        for (int gi = 0; gi < ctx->n_groups; gi++)
            for (int u = 0; u < ctx->groups[gi].n_units; u++)
                fprintf(out, "%s,%d,%d,%s,%llu,%llu\n", ctx->name, epoch->id, gi,
                        ctx->groups[gi].units[u],
                        (unsigned long long)group_read_unit(&ctx->groups[gi], u),
                        (unsigned long long)ctx->calls_per_group[gi]);
    }
    fprintf(out, "\n");
    free(order);
    if (out != stdout)
        fclose(out);
    else
        fflush(out);
}

/* -------------------------------------------------------- session logic */

static NOINSTR void session_close_locked(void)
{
    struct context *ctx = g_session.ctx;
    if (!ctx)
        return;
    group_enable(&ctx->groups[g_session.active_group], 0);
    g_session.ctx = NULL;
    g_session.pending_stop = 0;
}

/* quiescent boundary: flush the dumped epoch and install the next one */
static NOINSTR void apply_reload_locked(void)
{
    if (!g_reload_pending || g_session.ctx)
        return;
    g_reload_pending = 0;
    const char *path = getenv("SCALPEL_CONFIG");
    if (!path)
        return;
    struct parsed_config *cfg = parse_config_file(path);
    if (!cfg) {
        fprintf(stderr, "scalpel_rt: reload failed, keeping epoch %d\n",
                g_epoch ? g_epoch->id : -1);
        return;
    }
    struct epoch *next = install_epoch(cfg, g_epoch ? g_epoch->id + 1 : 0);
    free(cfg->functions);
    free(cfg);
    if (!next)
        return;
    struct epoch *old = g_epoch;
    emit_epoch_report(old);  /* dump the previous contexts */
    if (old)
        for (int i = 0; i < old->n_contexts; i++)
            for (int gi = 0; gi < old->contexts[i].n_groups; gi++)
                group_close_counters(&old->contexts[i].groups[gi]);
    /* release store pairs with lock-free readers; the superseded epoch
     * intentionally leaks because a reader may still hold its pointer */
    __atomic_store_n(&g_epoch, next, __ATOMIC_RELEASE);
}

static NOINSTR uint64_t group_for_call(struct context *ctx, uint64_t call_number)
{
    if (ctx->multiplex_period == 0 || ctx->n_groups < 2)
        return 0;
    return ((call_number - 1) / ctx->multiplex_period) % (uint64_t)ctx->n_groups;
}

static NOINSTR void native_enter(void *fn, void *call_site)
{
    (void)call_site;
    if (!g_enabled)
        return;
    uintptr_t addr = (uintptr_t)fn;
    struct context *ctx = lookup_context(g_epoch, addr);
    /* fast path: nothing to count, no parked session to flush, no reload */
    if (!ctx && !(g_session.ctx && g_session.pending_stop) && !g_reload_pending)
        return;
    pthread_mutex_lock(&g_lock);
    struct context *owner = g_session.ctx;
    if (owner) {
        if (owner->addr == addr && pthread_equal(g_session.owner, pthread_self())) {
            uint64_t n = __atomic_add_fetch(&owner->call_count, 1, __ATOMIC_RELAXED);
            if (g_session.pending_stop) {
                /* immediate successive call: retain the session */
                g_session.pending_stop = 0;
                g_session.depth = 1;
                int group = (int)group_for_call(owner, n);
                if (group != g_session.active_group) {
                    group_enable(&owner->groups[g_session.active_group], 0);
                    group_enable(&owner->groups[group], 1);
                    g_session.active_group = group;
                }
            } else {
                g_session.depth++;  /* recursion: keep counting where we are */
            }
            owner->calls_per_group[g_session.active_group]++;
            pthread_mutex_unlock(&g_lock);
            return;
        }
        if (g_session.pending_stop) {
            session_close_locked();
        } else {
            /* parent wins: nested monitored calls are counted only */
            ctx = lookup_context(g_epoch, addr);
            if (ctx)
                __atomic_add_fetch(&ctx->call_count, 1, __ATOMIC_RELAXED);
            pthread_mutex_unlock(&g_lock);
            return;
        }
    }
    apply_reload_locked();
    ctx = lookup_context(g_epoch, addr);
    if (!ctx) {
        pthread_mutex_unlock(&g_lock);
        return;
    }
    uint64_t n = __atomic_add_fetch(&ctx->call_count, 1, __ATOMIC_RELAXED);
    if (ctx->disabled || ctx->n_groups == 0) {
        pthread_mutex_unlock(&g_lock);
        return;
    }
    int group = (int)group_for_call(ctx, n);
    g_session.ctx = ctx;
    g_session.depth = 1;
    g_session.active_group = group;
    g_session.pending_stop = 0;
    g_session.owner = pthread_self();
    ctx->calls_per_group[group]++;
    group_enable(&ctx->groups[group], 1);
    pthread_mutex_unlock(&g_lock);
}

/* counting-only and disabled contexts legitimately exit without a session */
static NOINSTR int expects_session(uintptr_t addr)
{
    struct context *ctx = lookup_context(g_epoch, addr);
    return ctx && ctx->n_groups > 0 && !ctx->disabled;
}

static NOINSTR void native_exit(void *fn, void *call_site)
{
    (void)call_site;
    if (!g_enabled)
        return;
    uintptr_t addr = (uintptr_t)fn;
    if (!g_session.ctx) {
        if (expects_session(addr))
            __atomic_add_fetch(&g_unmatched_exits, 1, __ATOMIC_RELAXED);
        return;
    }
    pthread_mutex_lock(&g_lock);
    struct context *owner = g_session.ctx;
    if (!owner) {
        pthread_mutex_unlock(&g_lock);
        return;
    }
    if (owner->addr == addr && pthread_equal(g_session.owner, pthread_self())) {
        if (g_session.pending_stop) {
            __atomic_add_fetch(&g_unmatched_exits, 1, __ATOMIC_RELAXED);
        } else if (--g_session.depth == 0) {
            if (g_retain)
                g_session.pending_stop = 1;
            else {
                session_close_locked();
                apply_reload_locked();
            }
        }
    } else if (g_session.pending_stop) {
        /* an enclosing frame is unwinding past the retained session */
        session_close_locked();
        apply_reload_locked();
        if (expects_session(addr))
            __atomic_add_fetch(&g_unmatched_exits, 1, __ATOMIC_RELAXED);
    }
    pthread_mutex_unlock(&g_lock);
}

/* ------------------------------------------------------------- wiring */

NOINSTR void scalpel_set_handlers(scalpel_callback_fn enter, scalpel_callback_fn leave)
{
    g_override_enter = enter;
    g_override_exit = leave;
}

NOINSTR void __cyg_profile_func_enter(void *fn, void *call_site)
{
    scalpel_callback_fn hook = g_override_enter;
    if (hook)
        hook(fn, call_site);
    else
        native_enter(fn, call_site);
}

NOINSTR void __cyg_profile_func_exit(void *fn, void *call_site)
{
    scalpel_callback_fn hook = g_override_exit;
    if (hook)
        hook(fn, call_site);
    else
        native_exit(fn, call_site);
}

static NOINSTR void on_sigusr1(int signum)
{
    (void)signum;
    g_reload_pending = 1;
}

static NOINSTR void finalize(void)
{
    pthread_mutex_lock(&g_lock);
    session_close_locked();
    pthread_mutex_unlock(&g_lock);
    if (g_enabled || getenv("SCALPEL_OUT")) {
        if (!g_epoch && getenv("SCALPEL_OUT")) {
            /* no configuration: an empty report still marks the run */
            struct epoch empty = {0, "-", 0, NULL};
            emit_epoch_report(&empty);
        } else {
            emit_epoch_report(g_epoch);
        }
    }
    if (g_unmatched_exits)
        fprintf(stderr, "scalpel_rt: %llu unmatched exit callback(s)\n",
                (unsigned long long)g_unmatched_exits);
}

__attribute__((constructor))
static NOINSTR void scalpel_rt_init(void)
{
    g_retain = !(getenv("SCALPEL_NO_RETAIN")
                 && strcmp(getenv("SCALPEL_NO_RETAIN"), "1") == 0);
    signal(SIGUSR1, on_sigusr1);
    atexit(finalize);
    const char *config_path = getenv("SCALPEL_CONFIG");
    if (!config_path || !config_path[0])
        return;
    if (load_symbols() != 0) {
        fprintf(stderr, "scalpel_rt: no usable symbol table; monitoring disabled\n");
        return;
    }
    struct parsed_config *cfg = parse_config_file(config_path);
    if (!cfg)
        return;
    g_epoch = install_epoch(cfg, 0);
    free(cfg->functions);
    free(cfg);
    if (g_epoch)
        g_enabled = 1;
}
