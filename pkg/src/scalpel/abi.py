"""ctypes glue exposing the runtime handlers as C instrumentation callbacks.

Compiler-instrumented code calls ``__cyg_profile_func_enter(fn, call_site)``
and ``__cyg_profile_func_exit(fn, call_site)`` with two code addresses.  A
host bridge library that routes those symbols through settable function
pointers (``scalpel_set_handlers``) lets instrumented shared objects loaded
into this process drive the Python runtime directly.
"""

from __future__ import annotations

import ctypes

from .runtime import CallbackRuntime

# void (*)(void *fn, void *call_site) with the platform C calling convention
CALLBACK_CFUNC = ctypes.CFUNCTYPE(None, ctypes.c_void_p, ctypes.c_void_p)


def make_callback_pair(runtime: CallbackRuntime):
    """Entry/exit callbacks for ``runtime``; hold the returned references."""

    def enter(fn, call_site):
        runtime.on_function_entry(fn or 0, call_site or 0)

    def leave(fn, call_site):
        runtime.on_function_exit(fn or 0, call_site or 0)

    return CALLBACK_CFUNC(enter), CALLBACK_CFUNC(leave)


def install_into_bridge(bridge: ctypes.CDLL, runtime: CallbackRuntime):
    """Point a bridge library's callback hooks at ``runtime``.

    The bridge must export ``scalpel_set_handlers(enter, exit)``.  The
    returned pair must stay referenced for as long as callbacks may fire;
    ctypes does not keep callback trampolines alive.
    """
    pair = make_callback_pair(runtime)
    bridge.scalpel_set_handlers(pair[0], pair[1])
    return pair


def function_address(lib: ctypes.CDLL, name: str) -> int:
    """Runtime address of an exported function (load-bias anchor)."""
    return ctypes.cast(getattr(lib, name), ctypes.c_void_p).value
