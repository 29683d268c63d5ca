# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled Zhang-Suen thinning kernel.

Same contract as vamae._thinning_py.zhang_suen_thin; selected at import
time by vamae.thinning when available.
"""

import numpy as np


def zhang_suen_thin(img):
    """Thin a {0,1} uint8 mask to 1-pixel-wide centerlines.

    Runs both Zhang-Suen sub-iterations until a full pass deletes nothing.
    Returns a new uint8 array of the same shape.
    """
    arr = np.ascontiguousarray(img, dtype=np.uint8)
    cdef Py_ssize_t h = arr.shape[0]
    cdef Py_ssize_t w = arr.shape[1]
    # zero padding keeps the neighbour reads branch-free
    padded = np.zeros((h + 2, w + 2), dtype=np.uint8)
    padded[1:-1, 1:-1] = arr
    flags = np.zeros_like(padded)

    cdef unsigned char[:, ::1] p = padded
    cdef unsigned char[:, ::1] f = flags
    cdef Py_ssize_t i, j
    cdef int sub, changed, n_del
    cdef unsigned char p2, p3, p4, p5, p6, p7, p8, p9
    cdef int b, a

    changed = 1
    while changed:
        changed = 0
        for sub in range(2):
            n_del = 0
            for i in range(1, h + 1):
                for j in range(1, w + 1):
                    if p[i, j] == 0:
                        continue
                    p2 = p[i - 1, j]
                    p3 = p[i - 1, j + 1]
                    p4 = p[i, j + 1]
                    p5 = p[i + 1, j + 1]
                    p6 = p[i + 1, j]
                    p7 = p[i + 1, j - 1]
                    p8 = p[i, j - 1]
                    p9 = p[i - 1, j - 1]
                    b = p2 + p3 + p4 + p5 + p6 + p7 + p8 + p9
                    if b < 2 or b > 6:
                        continue
                    # 0->1 transitions around the ring p2,p3,...,p9,p2
                    a = 0
                    if p2 == 0 and p3 == 1: a += 1
                    if p3 == 0 and p4 == 1: a += 1
                    if p4 == 0 and p5 == 1: a += 1
                    if p5 == 0 and p6 == 1: a += 1
                    if p6 == 0 and p7 == 1: a += 1
                    if p7 == 0 and p8 == 1: a += 1
                    if p8 == 0 and p9 == 1: a += 1
                    if p9 == 0 and p2 == 1: a += 1
                    if a != 1:
                        continue
                    if sub == 0:
                        if p2 * p4 * p6 != 0 or p4 * p6 * p8 != 0:
                            continue
                    else:
                        if p2 * p4 * p8 != 0 or p2 * p6 * p8 != 0:
                            continue
                    f[i, j] = 1
                    n_del += 1
            if n_del:
                changed = 1
                for i in range(1, h + 1):
                    for j in range(1, w + 1):
                        if f[i, j]:
                            p[i, j] = 0
                            f[i, j] = 0
    return padded[1:-1, 1:-1].copy()
