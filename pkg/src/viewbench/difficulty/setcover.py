"""Coverage matrices and minimum set cover (greedy and certified branch-and-bound)."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np


class InfeasibleCover(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class CoverageMatrix:
    """Rows are per-view coverage sets re-indexed into a dense universe.

    `universe_ids` maps universe index -> surface-voxel id.
    """
    universe_ids: np.ndarray
    rows: tuple

    @property
    def universe_size(self) -> int:
        return len(self.universe_ids)

    @property
    def n_rows(self) -> int:
        return len(self.rows)

    def dense(self) -> np.ndarray:
        m = np.zeros((self.n_rows, self.universe_size), dtype=bool)
        for i, r in enumerate(self.rows):
            m[i, r] = True
        return m

    def bitsets(self) -> list[int]:
        return [_to_bits(r, self.universe_size) for r in self.rows]

    def restrict(self, row_ids) -> "CoverageMatrix":
        """Sub-matrix on the given rows, universe shrunk to their union."""
        rows = [self.rows[i] for i in row_ids]
        keep = np.unique(np.concatenate(rows)) if rows else np.zeros(0, np.int64)
        remap = np.full(self.universe_size, -1, np.int64)
        remap[keep] = np.arange(len(keep))
        return CoverageMatrix(self.universe_ids[keep], tuple(remap[r] for r in rows))

    @classmethod
    def from_sets(cls, sets) -> "CoverageMatrix":
        """Build from arbitrary per-row id collections; the universe is their union."""
        arrs = [np.unique(np.asarray(list(s) if not isinstance(s, np.ndarray) else s, dtype=np.int64)) for s in sets]
        if not arrs:
            raise ValueError("need at least one row")
        uni = np.unique(np.concatenate(arrs))
        if len(uni) == 0:
            raise ValueError("empty universe")
        return cls(uni, tuple(np.searchsorted(uni, a) for a in arrs))


def _to_bits(idx, n) -> int:
    bits = np.zeros(n, dtype=bool)
    bits[idx] = True
    return int.from_bytes(np.packbits(bits, bitorder="little").tobytes(), "little")


@dataclass(frozen=True)
class SetCoverSolution:
    selected: tuple[int, ...]
    certified_optimal: bool

    @property
    def size(self) -> int:
        return len(self.selected)


def greedy_cover(row_bits: list[int], target: int) -> list[int]:
    """Max marginal gain (lowest index on ties), then drop redundant picks in reverse order."""
    uncovered = target
    chosen = []
    while uncovered:
        best, best_gain = -1, 0
        for i, r in enumerate(row_bits):
            g = (r & uncovered).bit_count()
            if g > best_gain:
                best, best_gain = i, g
        if best < 0:
            raise InfeasibleCover("rows do not cover the universe")
        chosen.append(best)
        uncovered &= ~row_bits[best]
    for i in reversed(list(chosen)):
        rest = 0
        for j in chosen:
            if j != i:
                rest |= row_bits[j]
        if rest & target == target:
            chosen.remove(i)
    return chosen


def _reduce_elements(dense: np.ndarray) -> np.ndarray:
    """Distinct element columns that are not implied by another column.

    Covering an element whose row set is a subset of another's also covers the
    other, so only inclusion-minimal columns matter.
    """
    cols = np.unique(dense.T, axis=0)
    sizes = cols.sum(axis=1)
    # float32 keeps BLAS speed and is exact for row counts far below 2**24
    a = cols.astype(np.float32)
    keep = np.ones(len(cols), dtype=bool)
    chunk = 1024
    for s in range(0, len(cols), chunk):
        inter = a[s:s + chunk] @ a.T
        # column f is implied by column e when e's rows are a subset of f's; columns are unique, so
        # the only non-strict subset of f is f itself
        implied_by = (inter == sizes[None, :]).sum(axis=1)
        keep[s:s + chunk] = implied_by == 1
    return cols[keep]


class _Budget(Exception):
    pass


def exact_cover(dense: np.ndarray, time_budget: float = 30.0) -> tuple[list[int], bool]:
    """Branch-and-bound minimum cover; returns (rows, certified)."""
    n_rows = dense.shape[0]
    full_bits = [_to_bits(np.flatnonzero(r), dense.shape[1]) for r in dense]
    greedy = greedy_cover(full_bits, (1 << dense.shape[1]) - 1)
    elems = _reduce_elements(dense)
    n_el = len(elems)
    row_bits = [_to_bits(np.flatnonzero(elems[:, i]), n_el) for i in range(n_rows)]
    elem_rows = [_to_bits(np.flatnonzero(e), n_rows) for e in elems]
    # rows forced by elements with a single covering row
    forced = sorted({int(np.flatnonzero(e)[0]) for e in elems if e.sum() == 1})
    uncovered = (1 << n_el) - 1
    for r in forced:
        uncovered &= ~row_bits[r]
    best = [list(greedy)]
    deadline = time.monotonic() + time_budget
    ticks = [0]

    def bits(x):
        out = []
        while x:
            low = x & -x
            out.append(low.bit_length() - 1)
            x ^= low
        return out

    def lower_bound(unc, allowed):
        cnt = unc.bit_count()
        if cnt == 0:
            return 0
        mx = 0
        for r in bits(allowed):
            mx = max(mx, (row_bits[r] & unc).bit_count())
        if mx == 0:
            return n_rows + 1
        lb1 = -(-cnt // mx)
        used = 0
        lb2 = 0
        for e in sorted(bits(unc), key=lambda e: (elem_rows[e] & allowed).bit_count()):
            rs = elem_rows[e] & allowed
            if rs & used == 0:
                used |= rs
                lb2 += 1
        return max(lb1, lb2)

    def search(unc, chosen, allowed):
        ticks[0] += 1
        if ticks[0] % 64 == 0 and time.monotonic() > deadline:
            raise _Budget
        if unc == 0:
            if len(chosen) < len(best[0]):
                best[0] = list(chosen)
            return
        if len(chosen) + lower_bound(unc, allowed) >= len(best[0]):
            return
        # branch on the uncovered element with the fewest admissible rows
        pick, pick_rows = -1, None
        for e in bits(unc):
            rs = elem_rows[e] & allowed
            c = rs.bit_count()
            if pick_rows is None or c < pick_rows.bit_count():
                pick, pick_rows = e, rs
                if c <= 1:
                    break
        if pick_rows == 0:
            return
        cands = sorted(bits(pick_rows), key=lambda r: (-(row_bits[r] & unc).bit_count(), r))
        for r in cands:
            chosen.append(r)
            search(unc & ~row_bits[r], chosen, allowed)
            chosen.pop()
            allowed &= ~(1 << r)

    try:
        search(uncovered, list(forced), (1 << n_rows) - 1)
    except _Budget:
        return sorted(greedy), False
    return sorted(best[0]), True


def solve_set_cover(matrix: CoverageMatrix, mode: str = "exact", time_budget: float = 30.0) -> SetCoverSolution:
    if matrix.universe_size == 0:
        raise InfeasibleCover("empty universe")
    dense = matrix.dense()
    if not dense.any(axis=0).all():
        raise InfeasibleCover("rows do not cover the universe")
    if mode == "greedy":
        return SetCoverSolution(tuple(greedy_cover(matrix.bitsets(), (1 << matrix.universe_size) - 1)), False)
    if mode == "exact":
        rows, certified = exact_cover(dense, time_budget)
        return SetCoverSolution(tuple(rows), certified)
    raise ValueError(f"unknown set cover mode {mode!r}")
