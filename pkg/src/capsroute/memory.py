"""Allocator tuning for workloads that repeatedly create large temporaries.

glibc serves big requests with mmap and hands freed memory straight back to
the kernel, so every training step page-faults its working set in again.
Keeping freed memory in the heap avoids that cost.
"""

import ctypes
import ctypes.util
import sys

_M_TRIM_THRESHOLD = -1
_M_TOP_PAD = -2
_M_MMAP_MAX = -4

_done = False


def tune_allocator():
    """Disable mmap-backed allocations and heap trimming. Returns True if
    applied; a no-op off glibc."""
    global _done
    if _done:
        return True
    if not sys.platform.startswith("linux"):
        return False
    name = ctypes.util.find_library("c") or "libc.so.6"
    try:
        libc = ctypes.CDLL(name)
        mallopt = libc.mallopt
    except (OSError, AttributeError):
        return False
    ok = (mallopt(_M_MMAP_MAX, 0) == 1 and mallopt(_M_TRIM_THRESHOLD, 2 ** 31 - 1) == 1
          and mallopt(_M_TOP_PAD, 0) == 1)
    _done = ok
    return ok
