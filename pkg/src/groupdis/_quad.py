"""Batched adaptive trapezoid integration.

Integrates many smooth segments at once; segments are bisected level by level
wherever the midpoint refinement disagrees with the coarse trapezoid. Exact on
the first pass for constant and linear integrands, which makes piecewise
constant hazards free.
"""

from __future__ import annotations

import numpy as np


def batched_adaptive_trapezoid(f, a, b, tol=1e-8, max_levels=48):
    """Integrate ``f`` over each [a_i, b_i].

    Args:
        f: callable ``f(t, idx) -> values`` where ``t`` and ``idx`` are equal
            length arrays; ``idx`` identifies the originating segment so the
            integrand can look up per-segment context.
        a, b: segment endpoints, equal-length 1-D arrays.
        tol: absolute tolerance per original segment (halved on each split).

    Returns:
        Array of per-segment integrals, in input order.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    n = a.shape[0]
    out = np.zeros(n)
    if n == 0:
        return out
    idx = np.arange(n)
    live = b > a
    idx, aa, bb = idx[live], a[live], b[live]
    fa = np.asarray(f(aa, idx), dtype=float)
    fb = np.asarray(f(bb, idx), dtype=float)
    tols = np.full(idx.shape, float(tol))
    for _ in range(max_levels):
        if idx.size == 0:
            break
        mid = 0.5 * (aa + bb)
        fm = np.asarray(f(mid, idx), dtype=float)
        width = bb - aa
        coarse = width * (fa + fb) / 2.0
        fine = width * (fa + 2.0 * fm + fb) / 4.0
        err = np.abs(fine - coarse) / 3.0
        done = err <= tols
        np.add.at(out, idx[done], fine[done])
        split = ~done
        idx = np.concatenate([idx[split], idx[split]])
        aa, bb = (np.concatenate([aa[split], mid[split]]),
                  np.concatenate([mid[split], bb[split]]))
        fa, fb = (np.concatenate([fa[split], fm[split]]),
                  np.concatenate([fm[split], fb[split]]))
        tols = np.concatenate([tols[split] / 2.0, tols[split] / 2.0])
    else:
        if idx.size:  # depth exhausted: accept the refined estimates
            mid = 0.5 * (aa + bb)
            fm = np.asarray(f(mid, idx), dtype=float)
            np.add.at(out, idx, (bb - aa) * (fa + 2.0 * fm + fb) / 4.0)
    return out
