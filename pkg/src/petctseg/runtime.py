"""Process-level tuning for allocation-heavy numeric loops."""

import ctypes

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3

_done = False


def tune_allocator():
    """Raise glibc's mmap/trim thresholds so large numpy buffers recycle.

    A training step allocates and frees tens of megabytes of scratch
    (im2col buffers, gradients). With default thresholds glibc hands those
    pages back to the kernel on every free and each step pays them back in
    page faults, which dominates the step time. Keeping big allocations on
    the heap removes that cost. Idempotent; silently does nothing where
    glibc is unavailable.
    """
    global _done
    if _done:
        return
    _done = True
    try:
        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(_M_MMAP_THRESHOLD, 1 << 30)
        libc.mallopt(_M_TRIM_THRESHOLD, 1 << 30)
    except OSError:
        pass
