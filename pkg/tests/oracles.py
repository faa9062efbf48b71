"""Reference implementations written independently of the package code.

They are deliberately naive (explicit loops, brute force) so that agreement
with the vectorised library versions is meaningful.
"""

from __future__ import annotations

from collections import deque

import numpy as np


def median3x3_nearest(plane: np.ndarray) -> np.ndarray:
    h, w = plane.shape
    out = np.empty_like(plane)
    for r in range(h):
        for c in range(w):
            vals = [plane[min(max(r + dr, 0), h - 1), min(max(c + dc, 0), w - 1)]
                    for dr in (-1, 0, 1) for dc in (-1, 0, 1)]
            out[r, c] = sorted(vals)[4]
    return out


def affine_from_three_points(measured: np.ndarray, known: np.ndarray) -> tuple[float, float]:
    """Exact gain/offset through the first and last probe (the data are exactly affine)."""
    g = (known[2] - known[0]) / (measured[2] - measured[0])
    return g, known[0] - g * measured[0]


def bfs_components(mask: np.ndarray, connectivity: int = 8) -> list[list[tuple[int, int]]]:
    """Components in raster order of discovery, each a list of pixels."""
    fg = np.asarray(mask) > 0
    h, w = fg.shape
    if connectivity == 8:
        nbrs = [(dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1) if (dr, dc) != (0, 0)]
    else:
        nbrs = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    seen = np.zeros_like(fg)
    comps = []
    for r in range(h):
        for c in range(w):
            if not fg[r, c] or seen[r, c]:
                continue
            comp, queue = [], deque([(r, c)])
            seen[r, c] = True
            while queue:
                pr, pc = queue.popleft()
                comp.append((pr, pc))
                for dr, dc in nbrs:
                    qr, qc = pr + dr, pc + dc
                    if 0 <= qr < h and 0 <= qc < w and fg[qr, qc] and not seen[qr, qc]:
                        seen[qr, qc] = True
                        queue.append((qr, qc))
            comps.append(comp)
    return comps


def keep_largest(mask: np.ndarray) -> np.ndarray:
    comps = bfs_components(mask, 8)
    out = np.zeros(np.shape(mask), np.uint8)
    if not comps:
        return out
    best = comps[0]
    for comp in comps[1:]:
        if len(comp) > len(best):
            best = comp
    for r, c in best:
        out[r, c] = 1
    return out


def count_holes(mask: np.ndarray) -> int:
    """Background 4-components that do not touch the border."""
    bg = (np.asarray(mask) == 0).astype(np.uint8)
    h, w = bg.shape
    n = 0
    for comp in bfs_components(bg, 4):
        if not any(r in (0, h - 1) or c in (0, w - 1) for r, c in comp):
            n += 1
    return n


def mann_whitney_auc(pos: list[float], neg: list[float]) -> float:
    total = 0.0
    for p in pos:
        for q in neg:
            total += 1.0 if p > q else 0.5 if p == q else 0.0
    return total / (len(pos) * len(neg))


def monte_carlo_kl(mu: np.ndarray, log_var: np.ndarray, n: int, rng: np.random.Generator) -> float:
    """E_q[log q(z) - log p(z)] for diagonal q = N(mu, sigma^2), p = N(0, I)."""
    sigma = np.exp(0.5 * log_var)
    z = mu + sigma * rng.standard_normal((n, mu.size))
    log_q = -0.5 * (((z - mu) / sigma) ** 2 + log_var + np.log(2 * np.pi))
    log_p = -0.5 * (z ** 2 + np.log(2 * np.pi))
    return float(np.mean(np.sum(log_q - log_p, axis=1)))


def conv_chain_geometry(size: int, layers: list[tuple[int, int, int]]) -> tuple[int, int]:
    """Output side and receptive field of a chain of (kernel, stride, padding) convolutions."""
    side, rf, jump = size, 1, 1
    for k, s, p in layers:
        side = (side + 2 * p - k) // s + 1
        rf += (k - 1) * jump
        jump *= s
    return side, rf
