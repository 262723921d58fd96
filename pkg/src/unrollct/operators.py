"""Linear operators for 2D parallel-beam tomography.

The projector traces every ray through the pixel grid and stores the exact
ray/pixel intersection lengths in a sparse matrix, so the adjoint is the
exact transpose of the forward map.  Angle subsets restrict the operator to
an interleaved group of views; the sketched variant is the same geometry
discretized on a coarser pixel grid.  Down/up-sampling between grids uses a
fixed 2x2 block mean and a fixed clamped bilinear interpolation.

Conventions:
  * images are (ny, nx) float arrays; pixel (i, j) is centered at
    x = (j - (nx-1)/2) * px, y = ((ny-1)/2 - i) * px, i.e. row 0 on top;
  * sinograms are (n_angles, n_detectors); view a has angle 2*pi*a/n_angles;
  * the ray for (angle, t) starts at u * (cos, sin) with
    u = (t - (n_detectors-1)/2) * detector_spacing and travels along
    (-sin, cos).

When ``n_angles`` is divisible by 4 the view direction vectors are produced
by exact quarter-turn reduction from the first quadrant, which makes the
discretized operator commute bit-exactly with 90-degree grid rotations
(circular shifts of the angle axis).
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp


class DimensionError(ValueError):
    """Shape of an operand does not match the operator."""


@dataclass(frozen=True)
class Geometry:
    """Parallel-beam acquisition over [0, 2pi)."""

    n_angles: int
    n_detectors: int
    detector_spacing: float = 1.0

    def __post_init__(self):
        if self.n_angles < 1:
            raise ValueError("n_angles must be >= 1")
        if self.n_detectors < 1:
            raise ValueError("n_detectors must be >= 1")
        if not self.detector_spacing > 0:
            raise ValueError("detector_spacing must be positive")

    def angles(self):
        return 2.0 * np.pi * np.arange(self.n_angles) / self.n_angles

    def direction_cosines(self):
        """(cos, sin) arrays for every view.

        Quarter-turn exact when 4 | n_angles: views in quadrant q are the
        q-fold 90-degree rotation of the first-quadrant views, so rotated
        rays have bit-identical geometry.
        """
        n = self.n_angles
        if n % 4 == 0:
            quarter = n // 4
            base = 2.0 * np.pi * np.arange(quarter) / n
            c0, s0 = np.cos(base), np.sin(base)
            cos = np.concatenate([c0, -s0, -c0, s0])
            sin = np.concatenate([s0, c0, -s0, -c0])
            return cos, sin
        theta = self.angles()
        return np.cos(theta), np.sin(theta)


@dataclass
class Image:
    """Dense pixel grid with physical pixel size."""

    values: np.ndarray
    pixel_size: float = 1.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or min(self.values.shape) < 1:
            raise ValueError("image values must be a 2D array")
        if not np.isfinite(self.values).all():
            raise ValueError("image values must be finite")
        if not self.pixel_size > 0:
            raise ValueError("pixel_size must be positive")

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]


@dataclass
class Sinogram:
    """Measurement grid indexed (angle, detector)."""

    values: np.ndarray
    geometry: Geometry

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        expected = (self.geometry.n_angles, self.geometry.n_detectors)
        if self.values.shape != expected:
            raise DimensionError("sinogram shape %s != geometry %s"
                                 % (self.values.shape, expected))
        if not np.isfinite(self.values).all():
            raise ValueError("sinogram values must be finite")


class SubsetScheme:
    """Interleaved partition of views: view j belongs to subset j mod m."""

    def __init__(self, m, n_angles):
        if m < 1:
            raise ValueError("subset count must be >= 1")
        if n_angles % m != 0:
            raise ValueError("m=%d must divide n_angles=%d" % (m, n_angles))
        self.m = m
        self.n_angles = n_angles
        self.assignment = [list(range(i, n_angles, m)) for i in range(m)]

    @property
    def q_angles(self):
        return self.n_angles // self.m

    def row_indices(self, i, n_detectors):
        """Flat sinogram row indices of subset i (rows ordered by view)."""
        if not 0 <= i < self.m:
            raise IndexError("subset index %d out of range [0, %d)" % (i, self.m))
        views = np.asarray(self.assignment[i])
        return (views[:, None] * n_detectors + np.arange(n_detectors)[None, :]).ravel()


@dataclass(frozen=True)
class SketchScheme:
    """Coarse-grid approximation schedule: layers k < k_switch run on the
    grid downsampled by ``factor`` per axis."""

    factor: int = 2
    k_switch: int = 0

    def __post_init__(self):
        if self.factor < 1:
            raise ValueError("factor must be >= 1")
        if self.k_switch < 0:
            raise ValueError("k_switch must be >= 0")


def default_k_switch(n_layers):
    """Default number of initial coarse-grid layers: all but the last third."""
    return n_layers - -(-n_layers // 3)


# ---------------------------------------------------------------------------
# ray tracing


def _trace_view(cos_a, sin_a, n_det, spacing, ny, nx, px):
    """Sparse triplets (detector, flat pixel, length) for one view.

    Rays lying exactly on a grid line (axis-parallel views only) put half of
    each cell-high segment into the two adjacent pixel columns/rows; this
    symmetric tie rule keeps the operator exactly covariant under
    quarter-turn rotations of the grid.
    """
    u = (np.arange(n_det) - (n_det - 1) / 2.0) * spacing
    ox, oy = u * cos_a, u * sin_a
    dx, dy = -sin_a, cos_a
    xmin, xmax = -nx / 2.0 * px, nx / 2.0 * px
    ymin, ymax = -ny / 2.0 * px, ny / 2.0 * px

    if dx == 0.0 or dy == 0.0:
        return _trace_axis_parallel(ox, oy, dx, dy, ny, nx, px)

    # slab entry/exit parameters per ray
    tx0, tx1 = (xmin - ox) / dx, (xmax - ox) / dx
    ty0, ty1 = (ymin - oy) / dy, (ymax - oy) / dy
    t_in = np.maximum(np.minimum(tx0, tx1), np.minimum(ty0, ty1))
    t_out = np.minimum(np.maximum(tx0, tx1), np.maximum(ty0, ty1))

    xlines = (np.arange(nx + 1) - nx / 2.0) * px
    ylines = (np.arange(ny + 1) - ny / 2.0) * px
    tx = (xlines[None, :] - ox[:, None]) / dx
    ty = (ylines[None, :] - oy[:, None]) / dy
    t = np.concatenate([tx, ty], axis=1)
    t = np.clip(t, t_in[:, None], t_out[:, None])
    t.sort(axis=1)

    seg = np.diff(t, axis=1)
    tmid = 0.5 * (t[:, :-1] + t[:, 1:])
    mx = ox[:, None] + tmid * dx
    my = oy[:, None] + tmid * dy
    col = np.floor((mx - xmin) / px).astype(np.int64)
    row = np.floor((ymax - my) / px).astype(np.int64)
    ok = (seg > 0) & (t_out > t_in)[:, None]
    ok &= (col >= 0) & (col < nx) & (row >= 0) & (row < ny)

    det_idx = np.broadcast_to(np.arange(n_det)[:, None], seg.shape)
    return det_idx[ok], (row * nx + col)[ok], seg[ok]


def _trace_axis_parallel(ox, oy, dx, dy, ny, nx, px):
    """Axis-parallel views: each ray crosses one column (or row) of cells."""
    dets, pixels, weights = [], [], []
    n_det = len(ox)
    for t in range(n_det):
        if dx == 0.0:                       # vertical ray at x = ox[t]
            s = (ox[t] + nx / 2.0 * px) / px
            if not 0 <= s <= nx:
                continue
            rows = np.arange(ny)
            if s == np.floor(s):            # exactly on a column boundary
                for c, w in ((int(s) - 1, 0.5 * px), (int(s), 0.5 * px)):
                    if 0 <= c < nx:
                        dets.append(np.full(ny, t))
                        pixels.append(rows * nx + c)
                        weights.append(np.full(ny, w))
            else:
                c = int(np.floor(s))
                if 0 <= c < nx:
                    dets.append(np.full(ny, t))
                    pixels.append(rows * nx + c)
                    weights.append(np.full(ny, px))
        else:                               # horizontal ray at y = oy[t]
            s = (ny / 2.0 * px - oy[t]) / px
            if not 0 <= s <= ny:
                continue
            cols = np.arange(nx)
            if s == np.floor(s):
                for r, w in ((int(s) - 1, 0.5 * px), (int(s), 0.5 * px)):
                    if 0 <= r < ny:
                        dets.append(np.full(nx, t))
                        pixels.append(r * nx + cols)
                        weights.append(np.full(nx, w))
            else:
                r = int(np.floor(s))
                if 0 <= r < ny:
                    dets.append(np.full(nx, t))
                    pixels.append(r * nx + cols)
                    weights.append(np.full(nx, px))
    if not dets:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty, np.zeros(0)
    return (np.concatenate(dets), np.concatenate(pixels),
            np.concatenate(weights))


class Projector:
    """Sparse-matrix parallel-beam projector with exact transpose adjoint.

    Immutable after construction; applications are pure functions.
    """

    def __init__(self, geometry, image_shape, pixel_size=1.0):
        ny, nx = image_shape
        if ny < 1 or nx < 1:
            raise ValueError("image dimensions must be >= 1")
        if not pixel_size > 0:
            raise ValueError("pixel_size must be positive")
        self.geometry = geometry
        self.image_shape = (int(ny), int(nx))
        self.pixel_size = float(pixel_size)
        self.data_shape = (geometry.n_angles, geometry.n_detectors)
        self.matrix = self._build_matrix()
        self._subset_cache = {}

    def _build_matrix(self):
        ny, nx = self.image_shape
        geo = self.geometry
        cos, sin = geo.direction_cosines()
        rows, cols, vals = [], [], []
        for a in range(geo.n_angles):
            det, pix, w = _trace_view(cos[a], sin[a], geo.n_detectors,
                                      geo.detector_spacing, ny, nx,
                                      self.pixel_size)
            rows.append(a * geo.n_detectors + det)
            cols.append(pix)
            vals.append(w)
        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        vals = np.concatenate(vals)
        shape = (geo.n_angles * geo.n_detectors, ny * nx)
        return sp.csr_matrix((vals, (rows, cols)), shape=shape)

    # -- applications -------------------------------------------------
    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape != self.image_shape:
            raise DimensionError("image shape %s != grid %s"
                                 % (x.shape, self.image_shape))
        return (self.matrix @ x.ravel()).reshape(self.data_shape)

    def adjoint(self, y):
        y = np.asarray(y, dtype=np.float64)
        if y.shape != self.data_shape:
            raise DimensionError("sinogram shape %s != geometry %s"
                                 % (y.shape, self.data_shape))
        return (self.matrix.T @ y.ravel()).reshape(self.image_shape)

    # -- derived operators --------------------------------------------
    def restricted(self, scheme, i):
        """Operator using only the views of subset ``i`` (cached)."""
        key = (scheme.m, i)
        if key not in self._subset_cache:
            if scheme.m == 1:
                self._subset_cache[key] = self
            else:
                rows = scheme.row_indices(i, self.geometry.n_detectors)
                sub = RowSubsetOperator(self, scheme.assignment[i], rows)
                self._subset_cache[key] = sub
        return self._subset_cache[key]

    def materialize(self):
        return self.matrix.toarray()

    def norm_estimate(self, n_iters=60):
        """Power-method estimate of the spectral norm (deterministic start)."""
        return _power_norm(self.matrix, n_iters)


class RowSubsetOperator:
    """Rows of a projector restricted to one angle subset."""

    def __init__(self, parent, views, rows):
        self.parent = parent
        self.views = list(views)
        self.image_shape = parent.image_shape
        self.data_shape = (len(views), parent.geometry.n_detectors)
        self.matrix = parent.matrix[rows]

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape != self.image_shape:
            raise DimensionError("image shape %s != grid %s"
                                 % (x.shape, self.image_shape))
        return (self.matrix @ x.ravel()).reshape(self.data_shape)

    def adjoint(self, y):
        y = np.asarray(y, dtype=np.float64)
        if y.shape != self.data_shape:
            raise DimensionError("partial sinogram shape %s != %s"
                                 % (y.shape, self.data_shape))
        return (self.matrix.T @ y.ravel()).reshape(self.image_shape)

    def materialize(self):
        return self.matrix.toarray()


class MatrixOperator:
    """Dense-matrix operator with optional row grouping.

    Rows can be grouped (``group_size`` consecutive rows per group) so that
    subset schemes partition groups the same way they partition views of a
    projector.  Inputs are 1D vectors, outputs 1D of length n_rows.
    """

    def __init__(self, matrix, group_size=1):
        self.matrix = np.asarray(matrix, dtype=np.float64)
        if self.matrix.ndim != 2:
            raise ValueError("matrix must be 2D")
        n = self.matrix.shape[0]
        if group_size < 1 or n % group_size != 0:
            raise ValueError("group_size must divide the row count")
        self.group_size = int(group_size)
        self.n_groups = n // self.group_size
        self.image_shape = (self.matrix.shape[1],)
        self.data_shape = (n,)
        self._subset_cache = {}

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape != self.image_shape:
            raise DimensionError("vector shape %s != %s" % (x.shape, self.image_shape))
        return self.matrix @ x

    def adjoint(self, y):
        y = np.asarray(y, dtype=np.float64)
        if y.shape != self.data_shape:
            raise DimensionError("data shape %s != %s" % (y.shape, self.data_shape))
        return self.matrix.T @ y

    def restricted(self, scheme, i):
        key = (scheme.m, i)
        if key not in self._subset_cache:
            if scheme.m == 1:
                self._subset_cache[key] = self
            else:
                if scheme.n_angles != self.n_groups:
                    raise ValueError("scheme covers %d groups, operator has %d"
                                     % (scheme.n_angles, self.n_groups))
                rows = scheme.row_indices(i, self.group_size)
                self._subset_cache[key] = MatrixOperator(self.matrix[rows],
                                                         self.group_size)
        return self._subset_cache[key]

    def materialize(self):
        return self.matrix.copy()

    def norm_estimate(self, n_iters=60):
        return _power_norm(self.matrix, n_iters)


def _power_norm(matrix, n_iters):
    d = matrix.shape[1]
    v = np.cos(np.arange(d) * 0.7) + 1.0          # fixed, nonzero start
    v /= np.linalg.norm(v)
    s = 0.0
    for _ in range(n_iters):
        w = matrix.T @ (matrix @ v)
        s = np.linalg.norm(w)
        if s == 0.0:
            return 0.0
        v = w / s
    return float(np.sqrt(s))


# ---------------------------------------------------------------------------
# public operations


def build_projector(geometry, image_shape, pixel_size=1.0):
    """Deterministic parallel-beam projector on the given pixel grid."""
    return Projector(geometry, image_shape, pixel_size)


def build_sketched_projector(geometry, image_shape, pixel_size=1.0, factor=2):
    """Same geometry discretized on a ``factor``-times coarser grid.

    factor=1 returns an operator identical to :func:`build_projector`.
    """
    ny, nx = image_shape
    if ny % factor or nx % factor:
        raise ValueError("factor=%d must divide image dims %s" % (factor, image_shape))
    return Projector(geometry, (ny // factor, nx // factor), pixel_size * factor)


def forward(projector, x):
    return projector.forward(x)


def adjoint(projector, y):
    return projector.adjoint(y)


def subset_forward(projector, scheme, i, x):
    """Apply only the rows of subset ``i``."""
    return projector.restricted(scheme, i).forward(x)


def subset_adjoint(projector, scheme, i, y_partial):
    """Transpose of :func:`subset_forward` (implicitly zero-fills other rows)."""
    return projector.restricted(scheme, i).adjoint(y_partial)


# ---------------------------------------------------------------------------
# grid transfer


def downsample2(x):
    """2x2 block mean; requires even dimensions."""
    x = np.asarray(x, dtype=np.float64)
    ny, nx = x.shape
    if ny % 2 or nx % 2:
        raise ValueError("downsample2 requires even dimensions")
    return x.reshape(ny // 2, 2, nx // 2, 2).mean(axis=(1, 3))


def downsample2_transpose(g):
    """Exact transpose of :func:`downsample2`."""
    g = np.asarray(g, dtype=np.float64)
    return np.repeat(np.repeat(g, 2, axis=0), 2, axis=1) * 0.25


def _up_axis(x, axis):
    # output 2t   = v[t] + 0.25*(v[t-1] - v[t])   (clamped at t=0)
    # output 2t+1 = v[t] + 0.25*(v[t+1] - v[t])   (clamped at t=n-1)
    v = np.moveaxis(x, axis, 0)
    n = v.shape[0]
    prev = v[np.clip(np.arange(n) - 1, 0, n - 1)]
    nxt = v[np.clip(np.arange(n) + 1, 0, n - 1)]
    out = np.empty((2 * n,) + v.shape[1:], dtype=v.dtype)
    out[0::2] = v + 0.25 * (prev - v)
    out[1::2] = v + 0.25 * (nxt - v)
    return np.moveaxis(out, 0, axis)


def _up_axis_t(g, axis):
    g = np.moveaxis(g, axis, 0)
    ge, go = g[0::2], g[1::2]
    out = 0.75 * (ge + go)
    out[:-1] += 0.25 * ge[1:]
    out[0] += 0.25 * ge[0]
    out[1:] += 0.25 * go[:-1]
    out[-1] += 0.25 * go[-1]
    return np.moveaxis(out, 0, axis)


def upsample2(x):
    """Bilinear 2x upsampling with border clamping.

    Output sample (i, j) reads the input at ((i+0.5)/2 - 0.5, (j+0.5)/2 - 0.5),
    i.e. each axis mixes the two nearest input samples with weights
    {0.75, 0.25}; constants are reproduced exactly.  This map is fixed and is
    deliberately not the transpose of :func:`downsample2`.
    """
    x = np.asarray(x, dtype=np.float64)
    return _up_axis(_up_axis(x, 0), 1)


def upsample2_transpose(g):
    """Exact transpose of :func:`upsample2` (used by reverse-mode passes)."""
    g = np.asarray(g, dtype=np.float64)
    return _up_axis_t(_up_axis_t(g, 1), 0)


# ---------------------------------------------------------------------------
# operator-call accounting


@dataclass
class CallRecord:
    kind: str            # "forward" | "adjoint"
    row_fraction: float  # rows used / total rows
    grid_fraction: float # relative compute of the grid (1/factor)
    tag: str = "unroll"


@dataclass
class CallTrace:
    """Record of operator applications for cost accounting."""

    records: list = field(default_factory=list)

    def add(self, kind, row_fraction=1.0, grid_fraction=1.0, tag="unroll"):
        self.records.append(CallRecord(kind, row_fraction, grid_fraction, tag))

    def count(self, tags=None):
        total = 0.0
        for rec in self.records:
            if tags is None or rec.tag in tags:
                total += rec.row_fraction * rec.grid_fraction
        return total


def grid_cost_fraction(factor):
    """Relative compute of one application on a ``factor``-times coarser grid.

    Ray tracing work scales with crossings per ray, i.e. with the grid side
    length, so a 2x coarser grid costs half of a full application.  Declared
    constant, not a wall-clock measurement.
    """
    return 1.0 / factor


def count_operator_calls(trace, tags=None):
    """Total full-operator-equivalent applications recorded in ``trace``."""
    return trace.count(tags)
