"""Generate one phantom of each class and look at it the way the model will.

Run:  python demos/phantom_tour.py [out_dir]
"""
import os
import sys
import tempfile

import numpy as np

from strokeseg.phantom import PhantomSpec, gen_phantom, hu_to_raw
from strokeseg.volume import (Projection, hu_normalize, read_svol, reslice, window_scale,
                              write_smsk, write_svol)


def main(out_dir):
    os.makedirs(out_dir, exist_ok=True)
    for cls in ("healthy", "ischemic", "hemorrhagic"):
        hu, lab = gen_phantom(PhantomSpec(cls, (32, 32, 32), (2.0, 2.0, 2.0), seed=1))
        raw = hu_to_raw(hu)
        write_svol(f"{out_dir}/{cls}.svol", raw)
        write_smsk(f"{out_dir}/{cls}.smsk", lab)

        # the files store scanner integers; HU comes back through the header affine
        back = hu_normalize(read_svol(f"{out_dir}/{cls}.svol"))
        win = window_scale(back)
        brain = (lab.labels == 0) & (back.values > -50) & (back.values < 200)
        line = f"{cls:<12} brain {back.values[brain].mean():6.1f} HU"
        if lab.labels.any():
            lesion = back.values[lab.labels > 0].mean()
            line += f"  lesion {lesion:6.1f} HU  ({int((lab.labels > 0).sum())} voxels)"
        print(line)

        # each projection sees the same lesion as a different stack of 2-D slices
        for p in Projection:
            stack = reslice(lab, p).labels
            hit = np.flatnonzero(stack.reshape(stack.shape[0], -1).any(axis=1))
            span = f"slices {hit.min()}..{hit.max()}" if hit.size else "no lesion slices"
            print(f"    {p.value:<9} {stack.shape}  {span}")
        print(f"    windowed range [{win.values.min():.2f}, {win.values.max():.2f}]")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="phantoms_"))
