"""Reference implementations of the hot kernels, used when the compiled
extension is unavailable (or ``VSPAN_PURE_PYTHON=1``)."""
from __future__ import annotations


def stab(starts, ends, t):
    """Indices ``i`` with ``starts[i] <= t <= ends[i]``."""
    return [i for i, (s, e) in enumerate(zip(starts, ends)) if s <= t <= e]


def covered_length(starts, ends, lo, hi):
    """Length of the union of half-open ``[starts[i], ends[i])`` clipped to
    ``[lo, hi)``. Inputs must be sorted by start."""
    total = 0
    cur_s = cur_e = lo
    for s, e in zip(starts, ends):
        if s < lo:
            s = lo
        if e > hi:
            e = hi
        if e <= s:
            continue
        if s > cur_e:
            total += cur_e - cur_s
            cur_s, cur_e = s, e
        elif e > cur_e:
            cur_e = e
    return total + (cur_e - cur_s)
