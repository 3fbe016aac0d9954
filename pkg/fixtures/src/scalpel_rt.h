/* Instrumentation-callback runtime linked into the fixture binaries.
 *
 * The compiler inserts calls to __cyg_profile_func_enter/exit on entry and
 * exit of instrumented functions.  This runtime implements them: it reads
 * the monitoring configuration from $SCALPEL_CONFIG, resolves configured
 * function names against the executable's symbol table, counts calls and
 * (where the kernel allows) hardware events per function, multiplexes event
 * groups by call count, reloads the configuration on SIGUSR1, and appends a
 * report to $SCALPEL_OUT (stdout by default) at process exit.
 *
 * An external host may take over the callbacks with scalpel_set_handlers();
 * the native runtime then stays out of the way entirely.
 */
#ifndef SCALPEL_RT_H
#define SCALPEL_RT_H

#ifdef __cplusplus
extern "C" {
#endif

typedef void (*scalpel_callback_fn)(void *fn, void *call_site);

/* Route callbacks to an external host (pass NULLs to restore the native
 * runtime).  Not thread-safe against concurrent callbacks; install before
 * running instrumented code. */
void scalpel_set_handlers(scalpel_callback_fn enter, scalpel_callback_fn leave);

/* Known symbol used to compute the load bias of position-independent
 * executables (runtime address minus link-time address). */
void scalpel_rt_anchor(void);

void __cyg_profile_func_enter(void *fn, void *call_site);
void __cyg_profile_func_exit(void *fn, void *call_site);

#ifdef __cplusplus
}
#endif

#endif
