"""Pure NumPy kernel lane.

Implements the same API as the compiled core in ``_kernels_c``:
CSR matrix-vector products and ILU(0) factor/solve on a fixed sparsity
pattern. The triangular sweeps are level-scheduled so that rows within a
dependency level are processed with vectorized gathers instead of a Python
loop per row; the schedule depends only on the pattern and is cached on the
pattern object.
"""

import numpy as np

LANE = "python"


class Pattern:
    """Opaque per-sparsity-pattern state shared by the kernel calls.

    ``indices`` must be sorted within each row and every row must contain
    its diagonal entry; ``diag_pos`` gives the flat data position of the
    diagonal of each row.
    """

    def __init__(self, indptr, indices, diag_pos):
        self.n = indptr.shape[0] - 1
        self.indptr = np.asarray(indptr, dtype=np.int64)
        self.indices = np.asarray(indices, dtype=np.int64)
        self.diag_pos = np.asarray(diag_pos, dtype=np.int64)
        self._ilu = None  # factor/solve schedules, built lazily

    def ilu_schedule(self):
        if self._ilu is None:
            self._ilu = _build_ilu_schedule(self)
        return self._ilu


def make_pattern(indptr, indices, diag_pos):
    return Pattern(indptr, indices, diag_pos)


def matvec(pat, data, x, out=None):
    prod = data * x[pat.indices]
    res = np.add.reduceat(prod, pat.indptr[:-1])
    if out is None:
        return res
    out[:] = res
    return out


class _IluSchedule:
    __slots__ = ("div_buckets", "upd_buckets", "fwd_levels", "bwd_levels")

    def __init__(self, div_buckets, upd_buckets, fwd_levels, bwd_levels):
        self.div_buckets = div_buckets
        self.upd_buckets = upd_buckets
        self.fwd_levels = fwd_levels
        self.bwd_levels = bwd_levels


def _build_ilu_schedule(pat):
    n = pat.n
    indptr, indices, diag_pos = pat.indptr, pat.indices, pat.diag_pos

    # Dependency levels: a row waits for all its strictly-lower neighbors.
    level = np.zeros(n, dtype=np.int64)
    rows_lower = []  # per row: flat positions of strictly lower entries
    for i in range(n):
        lo, dp = int(indptr[i]), int(diag_pos[i])
        rows_lower.append(np.arange(lo, dp))
        cols = indices[lo:dp]
        if cols.size:
            level[i] = level[cols].max() + 1

    max_rank = max((r.size for r in rows_lower), default=0)
    nlev = int(level.max()) + 1 if n else 0

    # Factorization op buckets. Rank r of a level handles every row's r-th
    # lower entry: the division l_ik = a_ik / u_kk followed by the update
    # a_ij -= l_ik * u_kj over shared upper columns j > k. Buckets run in
    # (level, rank) order; inside a bucket all targets are distinct.
    div_buckets = []
    upd_buckets = []
    for lev in range(nlev):
        rows = np.nonzero(level == lev)[0]
        for r in range(max_rank):
            pos_ik, dpos_k = [], []
            pos_ij, pos_ik_u, pos_kj = [], [], []
            for i in rows:
                lower = rows_lower[i]
                if r >= lower.size:
                    continue
                pik = int(lower[r])
                k = int(indices[pik])
                pos_ik.append(pik)
                dpos_k.append(int(diag_pos[k]))
                # shared upper columns: two-pointer over the sorted rows
                a = pik + 1
                b = int(diag_pos[k]) + 1
                a_end, b_end = int(indptr[i + 1]), int(indptr[k + 1])
                while a < a_end and b < b_end:
                    ca, cb = int(indices[a]), int(indices[b])
                    if ca == cb:
                        pos_ij.append(a)
                        pos_ik_u.append(pik)
                        pos_kj.append(b)
                        a += 1
                        b += 1
                    elif ca < cb:
                        a += 1
                    else:
                        b += 1
            if pos_ik:
                div_buckets.append((np.array(pos_ik), np.array(dpos_k)))
                upd_buckets.append((np.array(pos_ij), np.array(pos_ik_u),
                                    np.array(pos_kj)))

    def tri_levels(lower_part):
        """Level schedule for one triangular sweep (L if lower_part else U)."""
        lv = np.zeros(n, dtype=np.int64)
        order = range(n) if lower_part else range(n - 1, -1, -1)
        for i in order:
            if lower_part:
                cols = indices[indptr[i]:diag_pos[i]]
            else:
                cols = indices[diag_pos[i] + 1:indptr[i + 1]]
            if cols.size:
                lv[i] = lv[cols].max() + 1
        levels = []
        for l in range(int(lv.max()) + 1 if n else 0):
            rows = np.nonzero(lv == l)[0]
            pos = []
            starts = [0]
            for i in rows:
                if lower_part:
                    pos.extend(range(int(indptr[i]), int(diag_pos[i])))
                else:
                    pos.extend(range(int(diag_pos[i]) + 1, int(indptr[i + 1])))
                starts.append(len(pos))
            pos = np.array(pos, dtype=np.int64)
            cols = indices[pos] if pos.size else pos
            levels.append((rows, pos, cols,
                           np.array(starts[:-1], dtype=np.int64),
                           np.diff(starts).astype(np.int64)))
        return levels

    return _IluSchedule(div_buckets, upd_buckets,
                        tri_levels(True), tri_levels(False))


def ilu0_factor(pat, data, pivot_floor):
    """ILU(0) on a copy of ``data``; returns (lu_data, n_pivot_fixups)."""
    lu = data.copy()
    sched = pat.ilu_schedule()
    fixups = 0
    for (pos_ik, dpos_k), (pos_ij, pos_ik_u, pos_kj) in zip(
            sched.div_buckets, sched.upd_buckets):
        piv = lu[dpos_k]
        bad = np.abs(piv) < pivot_floor
        if bad.any():
            fixups += int(bad.sum())
            piv = np.where(bad, np.where(piv < 0, -pivot_floor, pivot_floor),
                           piv)
            lu[dpos_k] = piv
        lu[pos_ik] = lu[pos_ik] / piv
        if pos_ij.size:
            lu[pos_ij] -= lu[pos_ik_u] * lu[pos_kj]
    diag = lu[pat.diag_pos]
    bad = np.abs(diag) < pivot_floor
    if bad.any():
        fixups += int(bad.sum())
        lu[pat.diag_pos] = np.where(
            bad, np.where(diag < 0, -pivot_floor, pivot_floor), diag)
    return lu, fixups


def _sweep(levels, lu, z, divide_diag, diag_pos):
    for rows, pos, cols, starts, counts in levels:
        if pos.size:
            contrib = lu[pos] * z[cols]
            if counts.min() > 0:
                z[rows] -= np.add.reduceat(contrib, starts)
            else:
                # only rows with entries contribute; empty segments would
                # confuse reduceat, so sum the filtered segmentation
                nz = counts > 0
                sums = np.zeros(rows.shape[0], dtype=z.dtype)
                sums[nz] = np.add.reduceat(contrib, starts[nz])
                z[rows] -= sums
        if divide_diag:
            z[rows] /= lu[diag_pos[rows]]


def ilu0_solve(pat, lu, rhs, out=None):
    if out is None:
        z = rhs.copy()
    else:
        np.copyto(out, rhs)
        z = out
    sched = pat.ilu_schedule()
    _sweep(sched.fwd_levels, lu, z, False, pat.diag_pos)
    _sweep(sched.bwd_levels, lu, z, True, pat.diag_pos)
    return z
