"""Process-level allocator tuning.

Training churns through ~100MB scratch tensors every step; glibc's default
mmap threshold hands those straight back to the kernel, so every step pays
page-fault costs again. Raising the mmap/trim thresholds keeps the arena
warm. Safe no-op anywhere it does not apply.
"""

import ctypes
import sys

M_TRIM_THRESHOLD = -1
M_MMAP_THRESHOLD = -3


def tune_allocator():
    if not sys.platform.startswith("linux"):
        return
    try:
        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(M_MMAP_THRESHOLD, 1 << 30)
        libc.mallopt(M_TRIM_THRESHOLD, 1 << 30)
    except OSError:
        pass
