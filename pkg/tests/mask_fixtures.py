"""Random binary masks for the refinement tests; every third one has a ring with a hole."""

import numpy as np
from scipy import ndimage


def random_masks(n: int = 100, size: int = 64, seed: int = 0) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    rows, cols = np.mgrid[0:size, 0:size]
    out = []
    for i in range(n):
        noise = ndimage.gaussian_filter(rng.standard_normal((size, size)), rng.uniform(1.0, 3.0))
        mask = noise > rng.uniform(0.1, 0.5) * noise.std()
        if i % 3 == 0:
            r0, c0 = rng.uniform(20, 44, 2)
            outer, inner = rng.uniform(12, 18), rng.uniform(3, 8)
            d2 = (rows - r0) ** 2 + (cols - c0) ** 2
            mask &= d2 > (outer + 3) ** 2  # keep clutter away from the ring
            mask |= (d2 <= outer ** 2) & (d2 > inner ** 2)
        out.append(mask.astype(np.uint8))
    return out
