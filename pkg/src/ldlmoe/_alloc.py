"""Allocator tuning for the many large, short-lived numpy temporaries of BPTT."""
import ctypes
import ctypes.util

_M_TRIM_THRESHOLD = -1
_M_TOP_PAD = -2
_M_MMAP_THRESHOLD = -3
_done = False


def tune_allocator() -> bool:
    """Keep freed blocks in the glibc heap instead of returning them to the OS.

    Without this every multi-megabyte buffer is a fresh mmap and pays page
    faults on first touch.  No-op (returns False) off glibc.
    """
    global _done
    if _done:
        return True
    name = ctypes.util.find_library("c")
    if not name:
        return False
    try:
        libc = ctypes.CDLL(name)
        ok = (libc.mallopt(_M_MMAP_THRESHOLD, 1 << 25) == 1
              and libc.mallopt(_M_TRIM_THRESHOLD, 1 << 30) == 1
              and libc.mallopt(_M_TOP_PAD, 1 << 26) == 1)
    except (OSError, AttributeError):
        return False
    _done = ok
    return ok
