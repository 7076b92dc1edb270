"""Streaming turbulence statistics, budget terms, and loss building blocks.

The moment accumulator tracks arbitrary-order central co-moments of named
channels online, so long runs never need to store their history. The channel
helpers slice fields along the wall-normal axis, average over the homogeneous
directions, and feed either postprocessing (profiles, budgets, wall scalings)
or differentiable losses (with analytic gradients back to the fields).
"""

import csv
import itertools
from dataclasses import dataclass

import numpy as np

from .piso import wide_grad

__all__ = ["MomentAccumulator", "ChannelSlices", "ChannelAccumulator",
           "StatsProfile", "BudgetProfile", "LossWeights",
           "channel_slices", "slice_mean", "slice_cov",
           "frame_profile", "frame_profile_backward",
           "window_profile", "window_profile_backward",
           "physical_gradient", "budget_terms", "friction_velocity",
           "FrictionScales", "stats_loss", "stats_loss_grad",
           "tcf_default_weights", "aggregate_error", "skin_friction",
           "vorticity", "vorticity_correlation", "temporal_correlation",
           "profile_to_csv", "budget_to_csv", "correlation_to_csv"]


# ---------------------------------------------------------------------------
# online central co-moments


def _sub_multisets(t):
    """Expansion terms for the merge update of the central sum over t.

    Yields (subset_or_None, complement_counts, coeff) over distinct position
    subsets: the central product over the subset times the mean-shift powers
    of the complement, with the multiplicity of equal splittings merged.
    """
    k = len(t)
    terms = {}
    for mask in range(2 ** k):
        sub = tuple(sorted(t[i] for i in range(k) if mask >> i & 1))
        comp = tuple(sorted(t[i] for i in range(k) if not mask >> i & 1))
        if len(sub) == 1:
            continue        # first central moments vanish identically
        terms[(sub, comp)] = terms.get((sub, comp), 0) + 1
    out = []
    for (sub, comp), coeff in terms.items():
        out.append((sub if sub else None, comp, coeff))
    return out


class MomentAccumulator:
    """Central co-moments of named channels, accumulated online.

    ``tuples`` lists the co-moments to track as tuples of channel names or
    indices, e.g. ("u", "u") for a variance or ("u", "v", "v", "v") for a
    fourth-order co-moment. The tracked set is closed under sub-multisets
    automatically since the merge update needs every lower order.
    Moments use the population convention (division by the sample count).
    """

    def __init__(self, channels, tuples=None, max_order=2):
        self.channels = tuple(channels)
        c = len(self.channels)
        if tuples is None:
            tuples = []
            for order in range(2, max_order + 1):
                tuples.extend(
                    itertools.combinations_with_replacement(range(c), order))
        want = set()
        for t in tuples:
            t = self._key(t)
            for mask in range(2 ** len(t)):
                sub = tuple(sorted(t[i] for i in range(len(t))
                                   if mask >> i & 1))
                if len(sub) >= 2:
                    want.add(sub)
        self._tuples = sorted(want, key=lambda t: (len(t), t))
        self._slot = {t: i for i, t in enumerate(self._tuples)}
        self._plan = [_sub_multisets(t) for t in self._tuples]
        self.count = 0
        self.mean = np.zeros(c)
        self.sums = np.zeros(len(self._tuples))

    def _key(self, t):
        out = []
        for ch in t:
            out.append(ch if isinstance(ch, int)
                       else self.channels.index(ch))
        return tuple(sorted(out))

    @property
    def tuples(self):
        return tuple(self._tuples)

    @property
    def max_order(self):
        return max((len(t) for t in self._tuples), default=1)

    def update(self, samples):
        """Accumulate a batch of shape (N, channels) (or (N,) for one)."""
        arr = np.asarray(samples, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr[:, None]
        if arr.shape[1] != len(self.channels):
            raise ValueError(f"batch has {arr.shape[1]} channels, "
                             f"accumulator tracks {len(self.channels)}")
        n2 = arr.shape[0]
        if n2 == 0:
            return self
        mean2 = arr.mean(axis=0)
        cen = arr - mean2
        sums2 = np.empty(len(self._tuples))
        for i, t in enumerate(self._tuples):
            prod = cen[:, t[0]].copy()
            for ch in t[1:]:
                prod *= cen[:, ch]
            sums2[i] = prod.sum()
        self._merge_raw(n2, mean2, sums2)
        return self

    def merge(self, other):
        """New accumulator equal to accumulating both streams."""
        if other._tuples != self._tuples or other.channels != self.channels:
            raise ValueError("accumulator configurations differ")
        out = self.copy()
        out._merge_raw(other.count, other.mean.copy(), other.sums.copy())
        return out

    def copy(self):
        out = MomentAccumulator.__new__(MomentAccumulator)
        out.channels = self.channels
        out._tuples = self._tuples
        out._slot = self._slot
        out._plan = self._plan
        out.count = self.count
        out.mean = self.mean.copy()
        out.sums = self.sums.copy()
        return out

    def _merge_raw(self, n2, mean2, sums2):
        if n2 == 0:
            return
        n1 = self.count
        if n1 == 0:
            self.count, self.mean, self.sums = n2, mean2, sums2
            return
        n = n1 + n2
        mu = self.mean + (n2 / n) * (mean2 - self.mean)
        parts = ((self.mean - mu, n1, self.sums),
                 (mean2 - mu, n2, sums2))
        new = np.zeros_like(self.sums)
        for i, plan in enumerate(self._plan):
            acc = 0.0
            for d, np_, sums in parts:
                for sub, comp, coeff in plan:
                    base = np_ if sub is None else sums[self._slot[sub]]
                    if base == 0.0:
                        continue
                    w = coeff * base
                    for ch in comp:
                        w *= d[ch]
                    acc += w
            new[i] = acc
        self.count, self.mean, self.sums = n, mu, new

    def moment(self, t):
        """Finalized central co-moment for the channel tuple t."""
        key = self._key(t)
        if len(key) < 2:
            raise ValueError("use .mean for first moments")
        if self.count < 2:
            raise ValueError("central moments undefined for count < 2")
        return self.sums[self._slot[key]] / self.count

    def mean_of(self, ch):
        if self.count < 1:
            raise ValueError("empty accumulator has no mean")
        return float(self.mean[self._key((ch,))[0]])

    def covariance(self):
        c = len(self.channels)
        out = np.empty((c, c))
        for i in range(c):
            for j in range(i, c):
                out[i, j] = out[j, i] = self.moment((i, j))
        return out

    def standardized(self, ch, order):
        """Standardized moment (order 3 = skewness, 4 = flatness)."""
        i = self._key((ch,))[0]
        var = self.moment((i, i))
        if var <= 0.0:
            return 0.0
        return self.moment((i,) * order) / var ** (order / 2.0)


# ---------------------------------------------------------------------------
# channel topology: wall-normal slices over homogeneous directions


@dataclass
class ChannelSlices:
    wall_axis: int
    y: np.ndarray          # (Y,) slice center coordinates
    idx: np.ndarray        # (Y, M) global cell indices per slice
    inv: np.ndarray        # (n,) slice index of each cell
    y_lo: float            # wall coordinates
    y_hi: float

    @property
    def ny(self):
        return self.y.shape[0]

    @property
    def m(self):
        return self.idx.shape[1]

    @property
    def delta(self):
        return 0.5 * (self.y_hi - self.y_lo)

    @property
    def dy(self):
        edges = np.empty(self.ny + 1)
        edges[0], edges[-1] = self.y_lo, self.y_hi
        edges[1:-1] = 0.5 * (self.y[1:] + self.y[:-1])
        return np.diff(edges)


def channel_slices(domain, wall_axis=1):
    """Wall-normal slicing for a single-block channel.

    The homogeneous axes must be periodic (no boundary faces) and both
    wall_axis sides must be prescribed walls; anything else is rejected.
    """
    if len(domain.block_shapes) != 1:
        raise ValueError("channel statistics need a single-block mesh")
    sides = set()
    for f in domain.bfaces:
        if f.axis != wall_axis:
            raise ValueError("homogeneous axes must be periodic")
        sides.add(f.side)
    if sides != {0, 1}:
        raise ValueError("both walls of the channel must be boundaries")
    grid = domain.block_index_grid(0)
    ny = grid.shape[wall_axis]
    idx = np.moveaxis(grid, wall_axis, 0).reshape(ny, -1)
    y = domain.centers[idx, wall_axis].mean(axis=1)
    inv = np.empty(domain.n, dtype=np.int64)
    for j in range(ny):
        inv[idx[j]] = j
    walls = {f.side: float(f.face_centers[:, wall_axis].mean())
             for f in domain.bfaces}
    y_lo, y_hi = sorted(walls.values())
    return ChannelSlices(wall_axis, y, idx, inv, y_lo, y_hi)


def slice_mean(sl, f):
    """Per-slice mean of a per-cell field over homogeneous directions."""
    return f[sl.idx].mean(axis=1)


def slice_cov(sl, u, mean=None):
    """Per-slice central covariance (Y, C, C) of an (n, C) field."""
    if mean is None:
        mean = slice_mean(sl, u)
    cen = u[sl.idx] - mean[:, None, :]
    return np.einsum("ymi,ymj->yij", cen, cen) / sl.m


def frame_profile(sl, u):
    """(mean, cov) slice profile of a single velocity frame."""
    mean = slice_mean(sl, u)
    return mean, slice_cov(sl, u, mean)


def frame_profile_backward(sl, u, d_mean, d_cov):
    """Cotangent of frame_profile back onto the velocity field."""
    mean = slice_mean(sl, u)
    cen = u[sl.idx] - mean[:, None, :]
    sym = d_cov + np.swapaxes(d_cov, 1, 2)
    du_sl = np.einsum("yij,ymj->ymi", sym, cen) / sl.m
    du_sl += d_mean[:, None, :] / sl.m
    du = np.zeros_like(u)
    du[sl.idx.ravel()] = du_sl.reshape(-1, u.shape[1])
    return du


def window_profile(profiles):
    """Window-averaged (mean, cov) from per-frame profiles.

    Equivalent to pooling all frames' cells into one sample set per slice:
    the covariance recenters each frame about the windowed mean.
    """
    means = np.stack([m for m, _ in profiles])
    covs = np.stack([c for _, c in profiles])
    mu = means.mean(axis=0)
    dev = means - mu
    cov = covs.mean(axis=0) + np.einsum("tyi,tyj->yij", dev, dev) / len(profiles)
    return mu, cov


def window_profile_backward(profiles, d_mu, d_cov):
    """Cotangents of window_profile w.r.t. each frame's (mean, cov)."""
    means = np.stack([m for m, _ in profiles])
    nt = means.shape[0]
    mu = means.mean(axis=0)
    dev = means - mu
    sym = d_cov + np.swapaxes(d_cov, 1, 2)
    out = []
    for t in range(nt):
        dm = d_mu / nt + np.einsum("yij,yj->yi", sym, dev[t]) / nt
        out.append((dm, d_cov / nt))
    return out


# ---------------------------------------------------------------------------
# streaming channel statistics


class ChannelAccumulator:
    """Per-slice moment accumulators fed frame by frame.

    Tracks means, the full covariance, and (optionally) the third and
    fourth single-channel moments for skewness and flatness profiles.
    """

    def __init__(self, domain, wall_axis=1, higher=True):
        self.slices = channel_slices(domain, wall_axis)
        d = domain.dim
        names = tuple("uvw"[:d])
        tuples = list(itertools.combinations_with_replacement(range(d), 2))
        if higher:
            tuples += [(i,) * 3 for i in range(d)]
            tuples += [(i,) * 4 for i in range(d)]
        self.accs = [MomentAccumulator(names, tuples)
                     for _ in range(self.slices.ny)]
        self.higher = higher
        self.time = 0.0

    def add_frame(self, u, dt=0.0):
        for j, acc in enumerate(self.accs):
            acc.update(u[self.slices.idx[j]])
        self.time += dt

    def merge(self, other):
        out = ChannelAccumulator.__new__(ChannelAccumulator)
        out.slices = self.slices
        out.higher = self.higher
        out.accs = [a.merge(b) for a, b in zip(self.accs, other.accs)]
        out.time = self.time + other.time
        return out

    def profile(self, nu=None):
        sl = self.slices
        d = len(self.accs[0].channels)
        mean = np.stack([a.mean for a in self.accs])
        cov = np.stack([a.covariance() for a in self.accs])
        skew = flat = None
        if self.higher:
            skew = np.array([[a.standardized(i, 3) for i in range(d)]
                             for a in self.accs])
            flat = np.array([[a.standardized(i, 4) for i in range(d)]
                             for a in self.accs])
        scales = None
        if nu is not None:
            scales = friction_scales_from_profile(sl, mean[:, 0], nu)
        return StatsProfile(y=sl.y.copy(), mean=mean, cov=cov,
                            skewness=skew, flatness=flat, scales=scales,
                            y_walls=(sl.y_lo, sl.y_hi))


@dataclass
class FrictionScales:
    u_tau: float
    re_tau: float
    delta: float
    nu: float

    def y_plus(self, dist_to_wall):
        return np.asarray(dist_to_wall) * self.u_tau / self.nu

    @property
    def t_plus_scale(self):
        """Multiply a time by this to get wall units."""
        return self.u_tau ** 2 / self.nu

    @property
    def ett_scale(self):
        """Multiply a time by this to get eddy turnover times."""
        return self.u_tau / self.delta


@dataclass
class StatsProfile:
    y: np.ndarray
    mean: np.ndarray                 # (Y, C)
    cov: np.ndarray                  # (Y, C, C)
    skewness: np.ndarray = None
    flatness: np.ndarray = None
    scales: FrictionScales = None
    y_walls: tuple = None            # (y_lo, y_hi) wall coordinates

    @property
    def y_plus(self):
        if self.scales is None or self.y_walls is None:
            raise ValueError("profile carries no friction scaling")
        lo, hi = self.y_walls
        d_wall = np.minimum(self.y - lo, hi - self.y)
        return self.scales.y_plus(d_wall)


def friction_scales_from_profile(sl, u_mean, nu, wall_values=(0.0, 0.0)):
    """u_tau from one-sided slice-mean gradients at both walls, averaged."""
    lo = abs((u_mean[0] - wall_values[0]) / (sl.y[0] - sl.y_lo))
    hi = abs((u_mean[-1] - wall_values[1]) / (sl.y_hi - sl.y[-1]))
    slope = 0.5 * (lo + hi)
    u_tau = float(np.sqrt(nu * slope))
    delta = sl.delta
    return FrictionScales(u_tau=u_tau, re_tau=u_tau * delta / nu,
                          delta=delta, nu=nu)


def friction_velocity(domain, u, nu, wall_axis=1, flow_axis=0,
                      wall_values=(0.0, 0.0)):
    """Friction velocity and derived scalings from an instantaneous field."""
    sl = channel_slices(domain, wall_axis)
    u_mean = slice_mean(sl, u[:, flow_axis])
    return friction_scales_from_profile(sl, u_mean, nu, wall_values)


# ---------------------------------------------------------------------------
# budget terms


@dataclass
class BudgetProfile:
    y: np.ndarray
    production: np.ndarray           # (Y, C, C) each
    dissipation: np.ndarray
    transport: np.ndarray
    diffusion: np.ndarray
    pressure_term: np.ndarray

    def residual(self):
        """P + T + D + Pi - eps, a closure diagnostic (not identically 0
        at finite resolution)."""
        return (self.production + self.transport + self.diffusion
                + self.pressure_term - self.dissipation)


def physical_gradient(domain, phi, variant="onesided"):
    """Cartesian gradient of a per-cell scalar via the transform metrics."""
    gp = wide_grad(domain, np.asarray(phi, dtype=np.float64), variant)
    return np.einsum("nai,na->ni", domain.tmat, gp)


def budget_terms(domain, frames, pressures, wall_axis=1):
    """Reynolds-stress budget profiles from a frame sequence.

    frames: (T, n, C) velocities; pressures: (T, n). Averaging runs over
    time and the homogeneous directions. Derivatives use the solver's
    transform-aware wide differences (one-sided at walls).
    """
    sl = channel_slices(domain, wall_axis)
    frames = np.asarray(frames, dtype=np.float64)
    pressures = np.asarray(pressures, dtype=np.float64)
    if frames.ndim != 3 or pressures.shape != frames.shape[:2]:
        raise ValueError("need (T, n, C) velocities and (T, n) pressures")
    nt, n, c = frames.shape
    mean_sl = frames[:, sl.idx].mean(axis=(0, 2))        # (Y, C)
    mean_cell = mean_sl[sl.inv]                          # broadcast back
    flucts = frames - mean_cell

    # mean-velocity gradients, slice averaged: dU[y, k, j] = d<u_j>/dx_k
    grad_mean = np.stack([physical_gradient(domain, mean_cell[:, j])
                          for j in range(c)], axis=-1)   # (n, k, j)
    dU = grad_mean[sl.idx].mean(axis=1)                  # (Y, k, j)

    rey = np.zeros((sl.ny, c, c))                        # <u'_i u'_j>
    eps = np.zeros((sl.ny, c, c))
    pi = np.zeros((sl.ny, c, c))
    triple = np.zeros((n, c, c, c))
    for t in range(nt):
        up = flucts[t]
        rey += np.einsum("ymi,ymj->yij", up[sl.idx], up[sl.idx]) / sl.m
        g = np.stack([physical_gradient(domain, up[:, i])
                      for i in range(c)], axis=0)        # (i, n, k)
        prod = np.einsum("ink,jnk->nij", g, g)
        eps += 2.0 * prod[sl.idx].mean(axis=1)
        gp = physical_gradient(domain, pressures[t])     # (n, j)
        cross = np.einsum("ni,nj->nij", up, gp)
        pi -= (cross + np.swapaxes(cross, 1, 2))[sl.idx].mean(axis=1)
        triple += np.einsum("ni,nj,nk->nijk", up, up, up)
    rey /= nt
    eps /= nt
    pi /= nt
    triple /= nt

    production = -(np.einsum("yik,ykj->yij", rey, dU)
                   + np.einsum("yjk,yki->yij", rey, dU))

    transport = np.zeros((sl.ny, c, c))
    rey_cell = np.einsum("tni,tnj->nij", flucts, flucts) / nt
    diffusion = np.zeros((sl.ny, c, c))
    for i in range(c):
        for j in range(i, c):
            div = np.zeros(n)
            for k in range(c):
                div += physical_gradient(domain, triple[:, i, j, k])[:, k]
            transport[:, i, j] = transport[:, j, i] = \
                -div[sl.idx].mean(axis=1)
            g1 = physical_gradient(domain, rey_cell[:, i, j])
            lap = np.zeros(n)
            for k in range(c):
                lap += physical_gradient(domain, g1[:, k])[:, k]
            diffusion[:, i, j] = diffusion[:, j, i] = \
                lap[sl.idx].mean(axis=1)

    return BudgetProfile(y=sl.y.copy(), production=production,
                         dissipation=eps, transport=transport,
                         diffusion=diffusion, pressure_term=pi)


# ---------------------------------------------------------------------------
# losses


@dataclass
class LossWeights:
    """Nonnegative weights for the statistics loss and its companions."""
    mean: np.ndarray                 # (C,) weights for the mean profiles
    cov: np.ndarray                  # (C, C) weights for the covariances
    frame: float = 0.5               # per-frame statistics weight
    source: float = 1.0              # supervised source / correction weight
    div: float = 1e-4                # divergence feedback weight
    weight_decay: float = 0.0

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.cov = np.asarray(self.cov, dtype=np.float64)
        if (self.mean < 0).any() or (self.cov < 0).any() or self.frame < 0 \
                or self.source < 0 or self.div < 0 or self.weight_decay < 0:
            raise ValueError("loss weights must be nonnegative")


def tcf_default_weights(dim=3):
    """Weight set used for the turbulent-channel training runs."""
    mean = np.ones(dim)
    mean[1:] = 0.5
    cov = np.zeros((dim, dim))
    np.fill_diagonal(cov, 1.0)
    if dim >= 2:
        cov[0, 1] = cov[1, 0] = 1.0
    return LossWeights(mean=mean, cov=cov, frame=0.5, source=1.0, div=1e-4)


def _profile_mse(a, b):
    # mean over slices of squared mismatch, per trailing component
    return np.mean((a - b) ** 2, axis=0)


def stats_loss(profiles, reference, weights, window=None):
    """Weighted statistics loss over a rollout window.

    profiles: per-frame (mean, cov) pairs. reference: (mean, cov) pair on
    the same slices. The loss combines the window-averaged statistics and
    the per-frame statistics, both weighted per component.
    """
    loss, _ = stats_loss_grad(profiles, reference, weights, window)
    return loss


def stats_loss_grad(profiles, reference, weights, window=None):
    """stats_loss value plus its gradients w.r.t. each frame's profile.

    Returns (loss, grads) with grads[t] = (d_mean, d_cov) matching the
    frame profiles. Quadratic in the profiles, so the gradients are exact.
    """
    ref_mean, ref_cov = reference
    if window is not None:
        lo, hi = window
        profiles = profiles[lo:hi]
    if not profiles:
        raise ValueError("empty profile window")
    for m, cv in profiles:
        if m.shape != ref_mean.shape or cv.shape != ref_cov.shape:
            raise ValueError("profile and reference shapes differ")
    ny = ref_mean.shape[0]
    wm, wc = weights.mean, weights.cov

    def term(mean, cov):
        lm = float(np.sum(wm * _profile_mse(mean, ref_mean)))
        lc = float(np.sum(wc * _profile_mse(cov, ref_cov)))
        return lm + lc

    def term_grad(mean, cov, scale):
        dm = scale * wm[None, :] * 2.0 * (mean - ref_mean) / ny
        dc = scale * wc[None, :, :] * 2.0 * (cov - ref_cov) / ny
        return dm, dc

    win_mean, win_cov = window_profile(profiles)
    loss = term(win_mean, win_cov)
    dwm, dwc = term_grad(win_mean, win_cov, 1.0)
    grads = window_profile_backward(profiles, dwm, dwc)
    for t, (m, cv) in enumerate(profiles):
        loss += weights.frame * term(m, cv)
        dm, dc = term_grad(m, cv, weights.frame)
        grads[t] = (grads[t][0] + dm, grads[t][1] + dc)
    return loss, grads


def aggregate_error(curves, reference, dy):
    """Single scalar aggregating normalized, cell-size-weighted errors.

    curves / reference: dicts of equally keyed (Y,) profiles. Each profile's
    squared error is normalized by the reference's max magnitude, weighted
    by the cell size dy, and divided by the total size.
    """
    dy = np.asarray(dy, dtype=np.float64)
    total = dy.sum()
    out = 0.0
    for key, ref in reference.items():
        ref = np.asarray(ref, dtype=np.float64)
        cur = np.asarray(curves[key], dtype=np.float64)
        norm = np.abs(ref).max()
        if norm == 0.0:
            raise ValueError(f"reference profile {key!r} is identically zero")
        out += float(np.sum(np.abs(cur - ref) ** 2 * dy)) / (norm * total)
    return out


# ---------------------------------------------------------------------------
# scalar diagnostics


def skin_friction(domain, u, nu, u_bulk, wall_axis=1, side=0, flow_axis=0):
    """C_f along a wall from one-sided shear, with unit density.

    Returns (positions along the wall, C_f per face cell).
    """
    faces = [f for f in domain.bfaces
             if f.kind == "dirichlet" and f.axis == wall_axis
             and f.side == side]
    if not faces:
        raise ValueError("no wall found on that axis/side")
    pos, cf = [], []
    for f in faces:
        dist = np.abs(domain.centers[f.cells, wall_axis]
                      - f.face_centers[:, wall_axis])
        slope = (u[f.cells, flow_axis] - 0.0) / dist
        tau = nu * slope
        cf.append(tau / (0.5 * u_bulk ** 2))
        pos.append(f.face_centers[:, flow_axis])
    pos = np.concatenate(pos)
    cf = np.concatenate(cf)
    order = np.argsort(pos)
    return pos[order], cf[order]


def vorticity(domain, u, variant="onesided"):
    """Transform-aware vorticity: scalar in 2D, vector in 3D."""
    grads = [physical_gradient(domain, u[:, i], variant)
             for i in range(domain.dim)]
    if domain.dim == 2:
        return grads[1][:, 0] - grads[0][:, 1]
    out = np.empty((domain.n, 3))
    out[:, 0] = grads[2][:, 1] - grads[1][:, 2]
    out[:, 1] = grads[0][:, 2] - grads[2][:, 0]
    out[:, 2] = grads[1][:, 0] - grads[0][:, 1]
    return out


def vorticity_correlation(w, w_hat):
    """Normalized inner product of two vorticity fields."""
    w = np.asarray(w, dtype=np.float64).ravel()
    w_hat = np.asarray(w_hat, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(w), np.linalg.norm(w_hat)
    if na == 0.0 or nb == 0.0:
        raise ValueError("zero-norm field in vorticity correlation")
    return float(np.dot(w, w_hat) / (na * nb))


def temporal_correlation(series_i, series_j=None):
    """Two-point temporal correlation R(tau) of fluctuation series.

    series: (T, ...) samples at fixed locations (trailing axes pooled).
    R(tau) = <a(t) b(t+tau)> / (rms(a(t)) rms(b(t+tau))), averaged over the
    admissible t for each lag.
    """
    a = np.asarray(series_i, dtype=np.float64)
    b = a if series_j is None else np.asarray(series_j, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("series shapes differ")
    nt = a.shape[0]
    a2 = a.reshape(nt, -1)
    b2 = b.reshape(nt, -1)
    out = np.empty(nt)
    for tau in range(nt):
        x = a2[: nt - tau]
        y = b2[tau:]
        num = np.mean(x * y)
        den = np.sqrt(np.mean(x ** 2)) * np.sqrt(np.mean(y ** 2))
        if den == 0.0:
            raise ValueError("zero-variance series in temporal correlation")
        out[tau] = num / den
    return out


# ---------------------------------------------------------------------------
# CSV export


def profile_to_csv(path, profile):
    c = profile.mean.shape[1]
    names = "uvw"[:c]
    cols = ["y"] + [f"mean_{names[i]}" for i in range(c)]
    cols += [f"cov_{names[i]}{names[j]}" for i in range(c)
             for j in range(i, c)]
    if profile.skewness is not None:
        cols += [f"skew_{names[i]}" for i in range(c)]
        cols += [f"flat_{names[i]}" for i in range(c)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for k in range(profile.y.shape[0]):
            row = [profile.y[k]] + list(profile.mean[k])
            row += [profile.cov[k, i, j] for i in range(c)
                    for j in range(i, c)]
            if profile.skewness is not None:
                row += list(profile.skewness[k]) + list(profile.flatness[k])
            w.writerow(row)


def budget_to_csv(path, budget):
    c = budget.production.shape[1]
    names = "uvw"[:c]
    terms = [("production", budget.production),
             ("dissipation", budget.dissipation),
             ("transport", budget.transport),
             ("diffusion", budget.diffusion),
             ("pressure", budget.pressure_term)]
    cols = ["y"] + [f"{t}_{names[i]}{names[j]}" for t, _ in terms
                    for i in range(c) for j in range(i, c)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for k in range(budget.y.shape[0]):
            row = [budget.y[k]]
            for _, arr in terms:
                row += [arr[k, i, j] for i in range(c)
                        for j in range(i, c)]
            w.writerow(row)


def correlation_to_csv(path, lags, values):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lag", "value"])
        for lag, v in zip(lags, values):
            w.writerow([lag, v])
