"""Independent reference implementations shared by several test modules."""
import itertools

import numpy as np


def brute_close(b, r):
    """Dilate then erode by explicit offsets; outside the volume counts as background."""
    offs = [o for o in itertools.product(range(-r, r + 1), repeat=3) if sum(x * x for x in o) <= r * r]
    pad = r
    x = np.pad(b.astype(bool), pad)
    n = np.array(x.shape)

    def shifted(a, o):
        out = np.zeros_like(a)
        src = tuple(slice(max(0, -d), n[i] - max(0, d)) for i, d in enumerate(o))
        dst = tuple(slice(max(0, d), n[i] - max(0, -d)) for i, d in enumerate(o))
        out[dst] = a[src]
        return out

    dil = np.zeros_like(x)
    for o in offs:
        dil |= shifted(x, o)
    ero = np.ones_like(x)
    for o in offs:
        ero &= shifted(dil, o)  # shifted-in cells are 0, i.e. background outside
    return ero[pad:-pad, pad:-pad, pad:-pad].astype(np.uint8)
