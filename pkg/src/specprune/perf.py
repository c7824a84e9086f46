"""Process-level performance knobs.

Training allocates and frees tens of megabytes of activations per step;
glibc's default behavior of returning large freed chunks to the kernel
makes every step pay page-fault costs again.  Raising the mmap and trim
thresholds keeps those pages in the process.  Called by the CLI and the
test suite; safe no-op where glibc is unavailable.
"""

from __future__ import annotations

import ctypes

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3
_done = False


def tune_allocator() -> bool:
    global _done
    if _done:
        return True
    try:
        libc = ctypes.CDLL("libc.so.6")
        ok = bool(libc.mallopt(_M_MMAP_THRESHOLD, 1 << 30)) and bool(
            libc.mallopt(_M_TRIM_THRESHOLD, 1 << 30)
        )
    except (OSError, AttributeError):
        return False
    _done = ok
    return ok
