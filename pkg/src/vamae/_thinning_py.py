"""Vectorized numpy fallback for the Zhang-Suen thinning kernel."""

import numpy as np


def _neighbours(p):
    """Eight clockwise neighbour planes of the zero-padded image `p`."""
    return (
        p[:-2, 1:-1],   # p2: north
        p[:-2, 2:],     # p3: north-east
        p[1:-1, 2:],    # p4: east
        p[2:, 2:],      # p5: south-east
        p[2:, 1:-1],    # p6: south
        p[2:, :-2],     # p7: south-west
        p[1:-1, :-2],   # p8: west
        p[:-2, :-2],    # p9: north-west
    )


def _subpass(padded, sub):
    """Mark and delete one Zhang-Suen sub-iteration. Returns deletion count."""
    core = padded[1:-1, 1:-1]
    p2, p3, p4, p5, p6, p7, p8, p9 = _neighbours(padded)
    ring = (p2, p3, p4, p5, p6, p7, p8, p9, p2)
    b = sum(n.astype(np.int32) for n in ring[:-1])
    a = sum(((ring[k] == 0) & (ring[k + 1] == 1)) for k in range(8))
    cond = (core == 1) & (b >= 2) & (b <= 6) & (a == 1)
    if sub == 0:
        cond &= ((p2 & p4 & p6) == 0) & ((p4 & p6 & p8) == 0)
    else:
        cond &= ((p2 & p4 & p8) == 0) & ((p2 & p6 & p8) == 0)
    core[cond] = 0
    return int(cond.sum())


def zhang_suen_thin(img):
    """Thin a {0,1} uint8 mask to 1-pixel-wide centerlines.

    Runs both Zhang-Suen sub-iterations until a full pass deletes nothing.
    Returns a new uint8 array of the same shape.
    """
    arr = np.asarray(img, dtype=np.uint8)
    padded = np.zeros((arr.shape[0] + 2, arr.shape[1] + 2), dtype=np.uint8)
    padded[1:-1, 1:-1] = arr
    while _subpass(padded, 0) + _subpass(padded, 1):
        pass
    return padded[1:-1, 1:-1].copy()
