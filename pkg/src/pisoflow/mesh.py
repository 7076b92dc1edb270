"""Multi-block structured meshes with curvilinear cell metrics.

A mesh is a set of logically rectangular blocks, each given by its grid
vertex coordinates, glued along whole sides. A :class:`Connection` carries an
axis permutation and per-axis flips so blocks may meet in rotated or mirrored
index frames; velocity components are Cartesian everywhere, so only
transformed quantities (contravariant fluxes, metric tensors, computational
space derivatives) pick up the permutation and orientation signs when fetched
across a connection.

The :class:`Domain` flattens all blocks into one global cell numbering and
precomputes, for every cell and face direction, the neighbor index, the axis
map into the neighbor's frame, and the orientation signs. Cell metrics follow
the standard transformation: with x(xi) the grid map, T = (dx/dxi)^-1,
J = det(dx/dxi), and alpha = J T T^t.
"""

from dataclasses import dataclass

import numpy as np

from .linalg import SystemPattern


@dataclass(frozen=True)
class Connection:
    """Whole-side conformal gluing to another block (or the same block).

    ``perm[k]`` is the neighbor axis that my axis ``k`` maps to across the
    face; ``flip[k]`` says my axis ``k`` runs against neighbor axis
    ``perm[k]``. ``perm[axis_of_face]`` must equal ``axis`` and
    ``flip[axis_of_face]`` must equal ``side == side_of_face``.
    """

    block: int
    axis: int
    side: int
    perm: tuple
    flip: tuple


@dataclass(frozen=True)
class Dirichlet:
    """Prescribed velocity face. ``value`` may be a scalar, a length-d
    vector, an (m, d) array over the flattened face, or a callable taking
    face centers (m, d) and returning any of those."""

    value: object = 0.0


@dataclass(frozen=True)
class AdvectiveOutflow:
    """Outflow face whose velocity is advected out of the domain and then
    rescaled for global mass balance. ``value=None`` seeds the face velocity
    from the adjacent cells when a flow state is created."""

    value: object = None


class BlockSpec:
    def __init__(self, vertices):
        vertices = np.ascontiguousarray(vertices, dtype=np.float64)
        self.vertices = vertices
        self.dim = vertices.shape[-1]
        if vertices.ndim != self.dim + 1:
            raise ValueError("vertex array rank does not match coordinates")
        self.shape = tuple(s - 1 for s in vertices.shape[:-1])
        if any(s < 1 for s in self.shape):
            raise ValueError("block needs at least one cell per axis")


def _avg_pairs(arr, axis):
    lo = [slice(None)] * arr.ndim
    hi = [slice(None)] * arr.ndim
    lo[axis] = slice(None, -1)
    hi[axis] = slice(1, None)
    return 0.5 * (arr[tuple(lo)] + arr[tuple(hi)])


def _cell_centers(verts, d):
    c = verts
    for ax in range(d):
        c = _avg_pairs(c, ax)
    return c


def _face_centers(verts, axis, side, d):
    sl = [slice(None)] * (d + 1)
    sl[axis] = -1 if side else 0
    fc = verts[tuple(sl)]
    for ax in range(d - 1):
        fc = _avg_pairs(fc, ax)
    return fc


def _axis_derivative(centers, f_lo, f_hi, axis):
    """d(samples)/d(xi) along one axis, one-sided to the face slabs at the
    block edge. Faces sit half a cell outside the first/last centers."""
    c = np.moveaxis(centers, axis, 0)
    out = np.empty_like(c)
    m = c.shape[0]
    if m == 1:
        out[0] = f_hi - f_lo
    else:
        out[1:-1] = 0.5 * (c[2:] - c[:-2])
        out[0] = (c[1] - f_lo) / 1.5
        out[-1] = (f_hi - c[-2]) / 1.5
    return np.moveaxis(out, 0, axis)


def _metrics_from_dxdxi(dxdxi):
    jac = np.linalg.det(dxdxi)
    tmat = np.linalg.inv(dxdxi)
    alpha = jac[..., None, None] * (tmat @ np.swapaxes(tmat, -1, -2))
    # mirror the upper triangle so symmetry is exact, not just to rounding
    d = alpha.shape[-1]
    iu, ju = np.triu_indices(d, k=1)
    alpha[..., ju, iu] = alpha[..., iu, ju]
    return jac, tmat, alpha


class BoundaryFace:
    """One physical (non-connection) block side with its face geometry."""

    def __init__(self, key, spec, cells, area_shape, axis, side, nsign,
                 face_centers, face_jac, face_t, face_alpha):
        self.key = key
        self.spec = spec
        self.kind = ("dirichlet" if isinstance(spec, Dirichlet)
                     else "advective_outflow")
        self.cells = cells
        self.area_shape = area_shape
        self.axis = axis
        self.side = side
        self.nsign = float(nsign)
        self.face_centers = face_centers
        self.face_jac = face_jac
        self.face_t = face_t
        self.face_alpha = face_alpha
        self.m = cells.shape[0]

    def resolve_value(self, value, dim):
        if callable(value):
            value = value(self.face_centers)
        arr = np.asarray(value, dtype=np.float64)
        if arr.ndim == 0:
            out = np.full((self.m, dim), float(arr))
        elif arr.shape == (dim,):
            out = np.tile(arr, (self.m, 1))
        elif arr.shape == (self.m, dim):
            out = arr.copy()
        elif arr.shape == tuple(self.area_shape) + (dim,):
            out = arr.reshape(self.m, dim).copy()
        else:
            raise ValueError(
                f"boundary value shape {arr.shape} does not fit face "
                f"{self.key} with {self.m} cells")
        return out

    def initial_values(self, dim):
        if self.spec.value is None:
            return None
        return self.resolve_value(self.spec.value, dim)


class Domain:
    """Global flattened view of a multi-block mesh plus its metrics."""

    def __init__(self, blocks, boundaries, check=True):
        if not blocks:
            raise ValueError("need at least one block")
        self.dim = blocks[0].dim
        d = self.dim
        if any(b.dim != d for b in blocks):
            raise ValueError("mixed block dimensionality")
        self.blocks = list(blocks)
        self.boundaries = dict(boundaries)
        for b in range(len(blocks)):
            for a in range(d):
                for s in (0, 1):
                    if (b, a, s) not in self.boundaries:
                        raise ValueError(f"no boundary spec for block {b}, "
                                         f"axis {a}, side {s}")
        self.block_shapes = [blk.shape for blk in self.blocks]
        counts = [int(np.prod(sh)) for sh in self.block_shapes]
        self.offsets = np.concatenate(
            [[0], np.cumsum(counts)]).astype(np.int64)
        self.n = int(self.offsets[-1])

        self._check_connection_specs()
        self._build_metrics()
        self._build_neighbors()
        self._build_pattern()
        self._build_boundary_faces()
        if check:
            self.validate()

    # -- small helpers ----------------------------------------------------

    def block_index_grid(self, b):
        cnt = self.offsets[b + 1] - self.offsets[b]
        return (self.offsets[b] + np.arange(cnt, dtype=np.int64)).reshape(
            self.block_shapes[b])

    def block_view(self, field, b):
        """View of a flat global field as the block's grid."""
        sl = slice(self.offsets[b], self.offsets[b + 1])
        return field[sl].reshape(self.block_shapes[b] + field.shape[1:])

    def _conn(self, key):
        spec = self.boundaries.get(key)
        return spec if isinstance(spec, Connection) else None

    # -- construction ------------------------------------------------------

    def _check_connection_specs(self):
        d = self.dim
        for (b, a, s), spec in self.boundaries.items():
            if not isinstance(spec, Connection):
                continue
            c = spec
            if sorted(c.perm) != list(range(d)):
                raise ValueError(f"{(b, a, s)}: perm is not a permutation")
            if c.perm[a] != c.axis:
                raise ValueError(f"{(b, a, s)}: perm[axis] != neighbor axis")
            if bool(c.flip[a]) != (c.side == s):
                raise ValueError(f"{(b, a, s)}: flip along the crossing axis "
                                 "must equal (sides match)")
            back = self._conn((c.block, c.axis, c.side))
            if back is None or (back.block, back.axis, back.side) != (b, a, s):
                raise ValueError(f"{(b, a, s)}: connection is not mutual")
            for k in range(d):
                if back.perm[c.perm[k]] != k:
                    raise ValueError(f"{(b, a, s)}: back perm not inverse")
                if bool(back.flip[c.perm[k]]) != bool(c.flip[k]):
                    raise ValueError(f"{(b, a, s)}: back flip mismatch")
            # conformal resolutions on the shared face
            sh, nsh = self.block_shapes[b], self.block_shapes[c.block]
            for k in range(d):
                if k != a and sh[k] != nsh[c.perm[k]]:
                    raise ValueError(f"{(b, a, s)}: non-conformal connection "
                                     f"(axis {k}: {sh[k]} vs "
                                     f"{nsh[c.perm[k]]})")
            if c.block == b and c.axis == a and self.block_shapes[b][a] < 3:
                raise ValueError("periodic axes need at least 3 cells")

    def _build_metrics(self):
        d = self.dim
        cent, dxdxi = [], []
        self._face_center_cache = {}
        for b, blk in enumerate(self.blocks):
            v = blk.vertices
            c = _cell_centers(v, d)
            der = np.empty(c.shape[:-1] + (d, d))
            for a in range(d):
                f_lo = _face_centers(v, a, 0, d)
                f_hi = _face_centers(v, a, 1, d)
                self._face_center_cache[(b, a, 0)] = f_lo
                self._face_center_cache[(b, a, 1)] = f_hi
                der[..., :, a] = _axis_derivative(c, f_lo, f_hi, a)
            cent.append(c.reshape(-1, d))
            dxdxi.append(der.reshape(-1, d, d))
        self.centers = np.concatenate(cent, axis=0)
        self.dxdxi = np.concatenate(dxdxi, axis=0)
        self.jac, self.tmat, self.alpha = _metrics_from_dxdxi(self.dxdxi)
        if (self.jac <= 0).any():
            raise ValueError("mesh has non-positive cell Jacobians "
                             "(inverted or degenerate cells)")

    def _mapped_edge_slab(self, grid_nb, conn):
        """Neighbor edge layer of ``grid_nb`` reindexed into my face frame.

        ``grid_nb`` is any per-cell array on the neighbor block (leading axes
        = neighbor shape). Returns the layer adjacent to the shared face,
        with axes transposed/flipped so it aligns with my face indexing.
        """
        na, ns = conn.axis, conn.side
        nshape = grid_nb.shape[:len(conn.perm)]
        sl = [slice(None)] * grid_nb.ndim
        sl[na] = nshape[na] - 1 if ns else 0
        slab = grid_nb[tuple(sl)]
        d = len(conn.perm)
        a = conn.perm.index(na)  # my crossing axis
        my_face_axes = [k for k in range(d) if k != a]
        nb_face_axes = [k for k in range(d) if k != na]
        order = [nb_face_axes.index(conn.perm[k]) for k in my_face_axes]
        order += list(range(len(nb_face_axes), slab.ndim))  # trailing dims
        slab = slab.transpose(order)
        for q, k in enumerate(my_face_axes):
            if conn.flip[k]:
                slab = np.flip(slab, axis=q)
        return slab

    def _build_neighbors(self):
        d, n = self.dim, self.n
        self.nbr = np.full((d, 2, n), -1, dtype=np.int64)
        self.nbr_ax = np.tile(np.arange(d, dtype=np.int8), (d, 2, n, 1))
        self.nbr_sign = np.ones((d, 2, n, d), dtype=np.int8)
        for b in range(len(self.blocks)):
            grid = self.block_index_grid(b)
            flat = grid.ravel()
            for a in range(d):
                g = np.moveaxis(grid, a, 0)
                for s in (0, 1):
                    nbrs = np.full(g.shape, -1, dtype=np.int64)
                    if s == 1:
                        nbrs[:-1] = g[1:]
                    else:
                        nbrs[1:] = g[:-1]
                    edge = g[-1 if s else 0]
                    conn = self._conn((b, a, s))
                    if conn is not None:
                        ngrid = self.block_index_grid(conn.block)
                        slab = self._mapped_edge_slab(ngrid, conn)
                        nbrs[-1 if s else 0] = slab
                        self.nbr_ax[a, s, edge.ravel(), :] = np.array(
                            conn.perm, dtype=np.int8)
                        sgn = np.where(np.array(conn.flip, bool), -1, 1)
                        self.nbr_sign[a, s, edge.ravel(), :] = sgn.astype(
                            np.int8)
                    self.nbr[a, s, flat] = np.moveaxis(nbrs, 0, a).ravel()

    def _build_pattern(self):
        d, n = self.dim, self.n
        rows = [np.arange(n, dtype=np.int64)]
        cols = [np.arange(n, dtype=np.int64)]
        for a in range(d):
            for s in (0, 1):
                mask = self.nbr[a, s] >= 0
                rows.append(np.nonzero(mask)[0])
                cols.append(self.nbr[a, s, mask])
        try:
            self.pattern = SystemPattern(n, np.concatenate(rows),
                                         np.concatenate(cols))
        except ValueError as e:
            raise ValueError(
                "could not build the cell adjacency pattern; this usually "
                "means a connected loop shorter than 3 cells: " + str(e))
        self.diag_slot = self.pattern.diag_pos
        self.nb_slot = np.full((d, 2, n), -1, dtype=np.int64)
        for a in range(d):
            for s in (0, 1):
                mask = self.nbr[a, s] >= 0
                i = np.nonzero(mask)[0]
                self.nb_slot[a, s, i] = self.pattern.entry_pos(
                    i, self.nbr[a, s, i])

    def _build_boundary_faces(self):
        d = self.dim
        self.bfaces = []
        for key in sorted(self.boundaries):
            spec = self.boundaries[key]
            if isinstance(spec, Connection):
                continue
            b, a, s = key
            grid = self.block_index_grid(b)
            sl = [slice(None)] * d
            sl[a] = -1 if s else 0
            cells = grid[tuple(sl)]
            area_shape = cells.shape
            fc = self._face_center_cache[(b, a, s)]
            adj = self.centers[cells.ravel()].reshape(fc.shape)
            nsign = 1.0 if s else -1.0
            face_axes = [k for k in range(d) if k != a]
            der = np.empty(fc.shape[:-1] + (d, d))
            der[..., :, a] = 2.0 * nsign * (fc - adj)
            for q, t in enumerate(face_axes):
                if fc.shape[q] == 1:
                    raise ValueError(f"face {key} is a single strip; "
                                     "tangential metrics are undefined")
                der[..., :, t] = np.gradient(fc, axis=q)[..., :]
            fjac, ft, falpha = _metrics_from_dxdxi(der)
            if (fjac <= 0).any():
                raise ValueError(f"non-positive Jacobian at boundary "
                                 f"face {key}")
            m = cells.size
            self.bfaces.append(BoundaryFace(
                key, spec, cells.ravel().copy(), area_shape, a, s, nsign,
                fc.reshape(m, d), fjac.reshape(m), ft.reshape(m, d, d),
                falpha.reshape(m, d, d)))

    # -- checks ------------------------------------------------------------

    def validate(self):
        """Cross-checks the neighbor tables and connection geometry."""
        d = self.dim
        idx = np.arange(self.n, dtype=np.int64)
        for a in range(d):
            for s in (0, 1):
                mask = self.nbr[a, s] >= 0
                i = idx[mask]
                j = self.nbr[a, s, mask]
                na = self.nbr_ax[a, s, mask, a].astype(np.int64)
                sg = self.nbr_sign[a, s, mask, a]
                rs = np.where(sg > 0, 1 - s, s)
                back = self.nbr[na, rs, j]
                if not np.array_equal(back, i):
                    raise AssertionError(
                        f"neighbor tables not involutive at axis {a} side {s}")
        # geometric conformality of connection faces, up to a rigid shift
        for (b, a, s), spec in sorted(self.boundaries.items()):
            if not isinstance(spec, Connection):
                continue
            mine = self._face_vertex_slab(b, a, s)
            theirs = self._face_vertex_slab(spec.block, spec.axis, spec.side)
            # map neighbor slab into my face frame (vertex grids flip the
            # same way cell grids do)
            theirs = self._mapped_vertex_slab(theirs, (b, a, s), spec)
            diff = mine - theirs
            span = np.max(np.abs(diff - diff.reshape(-1, d).mean(axis=0)))
            scale = max(1.0, float(np.max(np.abs(mine))))
            if span > 1e-9 * scale:
                raise AssertionError(
                    f"connection at {(b, a, s)} is not geometrically "
                    f"conformal (max vertex mismatch {span:.3e})")

    def _face_vertex_slab(self, b, a, s):
        v = self.blocks[b].vertices
        sl = [slice(None)] * (self.dim + 1)
        sl[a] = -1 if s else 0
        return v[tuple(sl)]

    def _mapped_vertex_slab(self, slab_theirs, my_key, conn):
        d = self.dim
        b, a, s = my_key
        my_face_axes = [k for k in range(d) if k != a]
        nb_face_axes = [k for k in range(d) if k != conn.axis]
        order = [nb_face_axes.index(conn.perm[k]) for k in my_face_axes]
        order += [slab_theirs.ndim - 1]
        out = slab_theirs.transpose(order)
        for q, k in enumerate(my_face_axes):
            if conn.flip[k]:
                out = np.flip(out, axis=q)
        return out

    # -- oriented fetches --------------------------------------------------

    def fetch_scalar(self, f, a, s, fill=0.0):
        """Neighbor values of per-cell scalar f across (axis a, side s)."""
        idx = self.nbr[a, s]
        safe = np.maximum(idx, 0)
        return np.where(idx >= 0, f[safe], fill)

    def fetch_vector(self, f, a, s, fill=0.0):
        """Neighbor values of (n, d) Cartesian field; no reorientation."""
        idx = self.nbr[a, s]
        safe = np.maximum(idx, 0)
        out = np.where((idx >= 0)[:, None], f[safe], fill)
        return out

    def fetch_axis_quantity(self, f, a, s, j, fill=0.0):
        """Neighbor values of an (n, d) frame-indexed field component j,
        seen in my frame: sign_j * f[nbr, perm[j]]."""
        idx = self.nbr[a, s]
        safe = np.maximum(idx, 0)
        aj = self.nbr_ax[a, s, :, j].astype(np.int64)
        sj = self.nbr_sign[a, s, :, j].astype(f.dtype)
        return np.where(idx >= 0, sj * f[safe, aj], fill)

    def fetch_tensor_quantity(self, f, a, s, j, k, fill=0.0):
        """Neighbor (n, d, d) frame-indexed tensor component (j, k) in my
        frame: sign_j sign_k f[nbr, perm[j], perm[k]]."""
        idx = self.nbr[a, s]
        safe = np.maximum(idx, 0)
        aj = self.nbr_ax[a, s, :, j].astype(np.int64)
        ak = self.nbr_ax[a, s, :, k].astype(np.int64)
        sj = self.nbr_sign[a, s, :, j].astype(f.dtype)
        sk = self.nbr_sign[a, s, :, k].astype(f.dtype)
        return np.where(idx >= 0, sj * sk * f[safe, aj, ak], fill)


# ---------------------------------------------------------------------------
# mesh generators


def _grid_vertices(*coords):
    mesh = np.meshgrid(*coords, indexing="ij")
    return np.stack(mesh, axis=-1)


def _identity_conn(block, axis, side, d):
    flip = tuple(False for _ in range(d))
    return Connection(block, axis, side, tuple(range(d)), flip)


def make_box(shape, lengths=None, periodic=None):
    """Single rectangular block, optionally periodic per axis."""
    d = len(shape)
    if lengths is None:
        lengths = tuple(float(s) for s in shape)
    if periodic is None:
        periodic = (True,) * d
    coords = [np.linspace(0.0, lengths[a], shape[a] + 1) for a in range(d)]
    blk = BlockSpec(_grid_vertices(*coords))
    bnd = {}
    for a in range(d):
        for s in (0, 1):
            if periodic[a]:
                bnd[(0, a, s)] = _identity_conn(0, a, 1 - s, d)
            else:
                bnd[(0, a, s)] = Dirichlet(0.0)
    return Domain([blk], bnd)


def make_cavity(shape=(32, 32), lid_axis=1, lid_side=0, lid_speed=1.0,
                size=1.0):
    """Closed box with one moving wall; the lid drags fluid along the first
    axis that is not the lid normal."""
    d = len(shape)
    coords = [np.linspace(0.0, size, s + 1) for s in shape]
    blk = BlockSpec(_grid_vertices(*coords))
    move_axis = next(a for a in range(d) if a != lid_axis)
    lid_vec = np.zeros(d)
    lid_vec[move_axis] = lid_speed
    bnd = {}
    for a in range(d):
        for s in (0, 1):
            if a == lid_axis and s == lid_side:
                bnd[(0, a, s)] = Dirichlet(tuple(lid_vec))
            else:
                bnd[(0, a, s)] = Dirichlet(0.0)
    return Domain([blk], bnd)


def make_poiseuille(shape=(8, 32), length=1.0, height=1.0, distort=0.0):
    """Streamwise periodic duct between two no-slip walls. ``distort``
    rotates interior vertices about the domain center by an angle field that
    vanishes on every boundary, turning the grid non-orthogonal without
    moving the walls or breaking periodicity."""
    x = np.linspace(0.0, length, shape[0] + 1)
    y = np.linspace(0.0, height, shape[1] + 1)
    v = _grid_vertices(x, y)
    if distort:
        c = np.array([length / 2.0, height / 2.0])
        phi = (distort * np.sin(np.pi * v[..., 0] / length)
               * np.sin(np.pi * v[..., 1] / height))
        rel = v - c
        cos, sin = np.cos(phi), np.sin(phi)
        v = np.stack([c[0] + cos * rel[..., 0] - sin * rel[..., 1],
                      c[1] + sin * rel[..., 0] + cos * rel[..., 1]], axis=-1)
    blk = BlockSpec(v)
    bnd = {
        (0, 0, 0): _identity_conn(0, 0, 1, 2),
        (0, 0, 1): _identity_conn(0, 0, 0, 2),
        (0, 1, 0): Dirichlet(0.0),
        (0, 1, 1): Dirichlet(0.0),
    }
    return Domain([blk], bnd)


def wall_refined_coords(n, delta=1.0, ratio=1.095):
    """Symmetric two-sided geometric refinement over [0, 2*delta] with the
    finest cells at both ends; n must be even."""
    if n % 2:
        raise ValueError("wall-refined axis needs an even cell count")
    m = n // 2
    if ratio == 1.0:
        h = np.full(m, delta / m)
    else:
        h0 = delta * (ratio - 1.0) / (ratio ** m - 1.0)
        h = h0 * ratio ** np.arange(m)
    lower = np.concatenate([[0.0], np.cumsum(h)])
    upper = 2.0 * delta - lower[::-1]
    return np.concatenate([lower, upper[1:]])


def make_channel(shape=(16, 16, 8), delta=1.0, ratio=1.095):
    """Plane channel: streamwise and spanwise periodic, walls at y=0 and
    y=2*delta, wall-refined in y. Domain 2*pi*delta x 2*delta x pi*delta."""
    x = np.linspace(0.0, 2.0 * np.pi * delta, shape[0] + 1)
    y = wall_refined_coords(shape[1], delta, ratio)
    z = np.linspace(0.0, np.pi * delta, shape[2] + 1)
    blk = BlockSpec(_grid_vertices(x, y, z))
    bnd = {
        (0, 0, 0): _identity_conn(0, 0, 1, 3),
        (0, 0, 1): _identity_conn(0, 0, 0, 3),
        (0, 1, 0): Dirichlet(0.0),
        (0, 1, 1): Dirichlet(0.0),
        (0, 2, 0): _identity_conn(0, 2, 1, 3),
        (0, 2, 1): _identity_conn(0, 2, 0, 3),
    }
    return Domain([blk], bnd)


def make_backstep(cells_per_h=4, h=1.0, step=1.0, u_bulk=1.0):
    """Backwards-facing step in five blocks: inlet section above the step,
    then main and outflow-buffer sections split above/below the step line.

    Inlet length 5h, main 32h, buffer 3h; inlet duct height h, step height
    ``step``. The inlet carries a parabolic profile with bulk speed u_bulk.
    """
    q = int(cells_per_h)
    qs = max(1, round(q * step / h))
    nx_in, nx_main, nx_buf = 5 * q, 32 * q, 3 * q

    def block(x0, x1, nx, y0, y1, ny):
        return BlockSpec(_grid_vertices(np.linspace(x0, x1, nx + 1),
                                        np.linspace(y0, y1, ny + 1)))

    y_step, y_top = step, step + h
    blocks = [
        block(-5 * h, 0.0, nx_in, y_step, y_top, q),      # 0 inlet (upper)
        block(0.0, 32 * h, nx_main, y_step, y_top, q),    # 1 main upper
        block(0.0, 32 * h, nx_main, 0.0, y_step, qs),     # 2 main lower
        block(32 * h, 35 * h, nx_buf, y_step, y_top, q),  # 3 buffer upper
        block(32 * h, 35 * h, nx_buf, 0.0, y_step, qs),   # 4 buffer lower
    ]

    def inlet_profile(fc):
        yy = (fc[:, 1] - y_step) / h
        u = 6.0 * u_bulk * yy * (1.0 - yy)
        return np.stack([u, np.zeros_like(u)], axis=-1)

    wall = Dirichlet(0.0)
    d = 2
    bnd = {
        (0, 0, 0): Dirichlet(inlet_profile),
        (0, 0, 1): _identity_conn(1, 0, 0, d),
        (0, 1, 0): wall, (0, 1, 1): wall,
        (1, 0, 0): _identity_conn(0, 0, 1, d),
        (1, 0, 1): _identity_conn(3, 0, 0, d),
        (1, 1, 0): _identity_conn(2, 1, 1, d),
        (1, 1, 1): wall,
        (2, 0, 0): wall,  # vertical face of the step
        (2, 0, 1): _identity_conn(4, 0, 0, d),
        (2, 1, 0): wall,
        (2, 1, 1): _identity_conn(1, 1, 0, d),
        (3, 0, 0): _identity_conn(1, 0, 1, d),
        (3, 0, 1): AdvectiveOutflow(),
        (3, 1, 0): _identity_conn(4, 1, 1, d),
        (3, 1, 1): wall,
        (4, 0, 0): _identity_conn(2, 0, 1, d),
        (4, 0, 1): AdvectiveOutflow(),
        (4, 1, 0): wall,
        (4, 1, 1): _identity_conn(3, 1, 0, d),
    }
    return Domain(blocks, bnd)


def make_obstacle_grid(domain_size=(16.0, 8.0), obstacle_center=(3.0, 4.0),
                       obstacle_size=(1.5, 1.5), nx=(6, 4, 30),
                       ny=(8, 4, 8), inlet=None):
    """Eight blocks tiling a rectangle around a rectangular hole; west side
    is a velocity inlet, east side an advective outflow, the rest no-slip."""
    lx, ly = domain_size
    cx, cy = obstacle_center
    wx, wy = obstacle_size
    xs = [0.0, cx - wx / 2, cx + wx / 2, lx]
    ys = [0.0, cy - wy / 2, cy + wy / 2, ly]
    if inlet is None:
        def inlet(fc):
            u = np.exp(-((fc[:, 1] - cy) ** 2) / (2.0 * 0.4 ** 2))
            return np.stack([u, np.zeros_like(u)], axis=-1)

    ids = {}
    blocks = []
    for j in range(3):
        for i in range(3):
            if (i, j) == (1, 1):
                continue
            ids[(i, j)] = len(blocks)
            blocks.append(BlockSpec(_grid_vertices(
                np.linspace(xs[i], xs[i + 1], nx[i] + 1),
                np.linspace(ys[j], ys[j + 1], ny[j] + 1))))

    wall = Dirichlet(0.0)
    bnd = {}
    d = 2
    for (i, j), b in ids.items():
        # west
        if i == 0:
            bnd[(b, 0, 0)] = Dirichlet(inlet)
        elif (i - 1, j) in ids:
            bnd[(b, 0, 0)] = _identity_conn(ids[(i - 1, j)], 0, 1, d)
        else:
            bnd[(b, 0, 0)] = wall  # east face of the hole
        # east
        if i == 2:
            bnd[(b, 0, 1)] = AdvectiveOutflow()
        elif (i + 1, j) in ids:
            bnd[(b, 0, 1)] = _identity_conn(ids[(i + 1, j)], 0, 0, d)
        else:
            bnd[(b, 0, 1)] = wall
        # south
        if j == 0:
            bnd[(b, 1, 0)] = wall
        elif (i, j - 1) in ids:
            bnd[(b, 1, 0)] = _identity_conn(ids[(i, j - 1)], 1, 1, d)
        else:
            bnd[(b, 1, 0)] = wall
        # north
        if j == 2:
            bnd[(b, 1, 1)] = wall
        elif (i, j + 1) in ids:
            bnd[(b, 1, 1)] = _identity_conn(ids[(i, j + 1)], 1, 0, d)
        else:
            bnd[(b, 1, 1)] = wall
    return Domain(blocks, bnd)


def make_two_block(shape=(6, 6), rotated=False):
    """Two unit blocks side by side; with ``rotated=True`` the second block's
    index frame is rotated so the gluing exercises axis permutation and flip.
    """
    nx, ny = shape
    x1 = np.linspace(0.0, 1.0, nx + 1)
    x2 = np.linspace(1.0, 2.0, nx + 1)
    y = np.linspace(0.0, 1.0, ny + 1)
    a = BlockSpec(_grid_vertices(x1, y))
    wall = Dirichlet(0.0)
    if not rotated:
        b = BlockSpec(_grid_vertices(x2, y))
        bnd = {
            (0, 0, 1): _identity_conn(1, 0, 0, 2),
            (1, 0, 0): _identity_conn(0, 0, 1, 2),
        }
    else:
        # block 1 local axis 0 runs along global -y, local axis 1 along +x
        gy, gx = np.meshgrid(y[::-1], x2, indexing="ij")
        b = BlockSpec(np.stack([gx, gy], axis=-1))
        bnd = {
            (0, 0, 1): Connection(1, 1, 0, perm=(1, 0), flip=(False, True)),
            (1, 1, 0): Connection(0, 0, 1, perm=(1, 0), flip=(True, False)),
        }
    for blk in (0, 1):
        for ax in (0, 1):
            for sd in (0, 1):
                bnd.setdefault((blk, ax, sd), wall)
    return Domain([a, b], bnd)
