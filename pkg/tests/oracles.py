"""Naive reference implementations used as test oracles."""
import numpy as np


def brute_force_block(prev, nxt, by, bx, block, search_range):
    """Best (dx, dy) for one block by scanning every candidate with plain loops."""
    h, w = prev.shape[:2]
    best = None
    for dy in range(-search_range, search_range + 1):
        for dx in range(-search_range, search_range + 1):
            y0, x0 = by * block - dy, bx * block - dx
            if y0 < 0 or x0 < 0 or y0 + block > h or x0 + block > w:
                continue
            sad = 0.0
            for i in range(block):
                for j in range(block):
                    sad += np.abs(nxt[by * block + i, bx * block + j] - prev[y0 + i, x0 + j]).sum()
            key = (sad, dx * dx + dy * dy, dy, dx)
            if best is None or key < best[0]:
                best = (key, (dx, dy))
    return best[1]


def moving_footprint(sample, t, block):
    """Blocks touched by a moving sprite in frame t-1 or frame t."""
    h, w = sample.frames.shape[1:3]
    touched = np.zeros((h, w), dtype=bool)
    for i, s in enumerate(sample.spec.sprites):
        if tuple(s.velocity) == (0, 0):
            continue
        for k in (t - 1, t):
            touched |= sample.masks[k][i]
    blocks = touched.reshape(h // block, block, w // block, block).any(axis=(1, 3))
    return np.repeat(np.repeat(blocks, block, axis=0), block, axis=1)
