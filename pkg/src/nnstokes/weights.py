"""Discrete maximal functions, Muckenhoupt certification and weighted norms.

All averages are taken over grid-aligned cubes. Cube ``(c, r)`` is the set of
cells whose index differs from ``c`` by at most ``r`` in every direction, so
``r = 0`` is the single cell ``c``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

_MAGIC = b"NNSF"
_VERSION = 1


@dataclass
class GridField:
    """Scalar values on a uniform cell grid in one or two dimensions."""

    values: np.ndarray
    h: float
    origin: tuple[float, ...] | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if not self.h > 0:
            raise ValueError("cell spacing must be positive")
        if self.origin is None:
            self.origin = (0.0,) * self.values.ndim
        self.origin = tuple(float(o) for o in self.origin)
        if len(self.origin) != self.values.ndim:
            raise ValueError("origin must have one entry per axis")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("grid field values must be finite")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def cell_volume(self) -> float:
        return self.h ** self.ndim

    def centers(self, axis: int) -> np.ndarray:
        return self.origin[axis] + (np.arange(self.shape[axis]) + 0.5) * self.h

    def mesh(self) -> list[np.ndarray]:
        return np.meshgrid(*[self.centers(a) for a in range(self.ndim)], indexing="ij")

    def index_of(self, point) -> tuple[int, ...]:
        """Index of the cell containing ``point``."""
        idx = []
        for a, x in enumerate(np.atleast_1d(point)):
            i = int(np.floor((x - self.origin[a]) / self.h))
            idx.append(min(max(i, 0), self.shape[a] - 1))
        return tuple(idx)

    def like(self, values) -> "GridField":
        return GridField(values, self.h, self.origin)

    def integral(self) -> float:
        return float(np.sum(self.values) * self.cell_volume)

    # -- serialization ---------------------------------------------------------

    def to_bytes(self) -> bytes:
        head = struct.pack("<4sII", _MAGIC, _VERSION, self.ndim)
        head += struct.pack(f"<{self.ndim}Q", *self.shape)
        head += struct.pack(f"<d{self.ndim}d", self.h, *self.origin)
        return head + np.ascontiguousarray(self.values, dtype="<f8").tobytes(order="C")

    @classmethod
    def from_bytes(cls, data: bytes) -> "GridField":
        magic, version, ndim = struct.unpack_from("<4sII", data, 0)
        if magic != _MAGIC or version != _VERSION:
            raise ValueError("not a grid field file")
        off = struct.calcsize("<4sII")
        shape = struct.unpack_from(f"<{ndim}Q", data, off)
        off += 8 * ndim
        h, *origin = struct.unpack_from(f"<d{ndim}d", data, off)
        off += 8 * (ndim + 1)
        values = np.frombuffer(data, dtype="<f8", offset=off, count=int(np.prod(shape)))
        return cls(values.reshape(shape).copy(), h, tuple(origin))

    def save(self, path) -> Path:
        path = Path(path)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def load(cls, path) -> "GridField":
        return cls.from_bytes(Path(path).read_bytes())

    def to_csv(self, path) -> Path:
        path = Path(path)
        coords = [c.ravel() for c in self.mesh()]
        names = ["x", "y", "z"][: self.ndim]
        idx = np.indices(self.shape).reshape(self.ndim, -1)
        inames = ["i", "j", "k"][: self.ndim]
        table = np.column_stack([*idx, *coords, self.values.ravel()])
        fmt = ["%d"] * self.ndim + ["%.17g"] * (self.ndim + 1)
        np.savetxt(path, table, delimiter=",", fmt=fmt,
                   header=",".join(inames + names + ["value"]), comments="")
        return path


# -- cube sums ----------------------------------------------------------------


def _prefix_sums(a: np.ndarray) -> np.ndarray:
    out = np.zeros(tuple(n + 1 for n in a.shape))
    out[tuple(slice(1, None) for _ in a.shape)] = a
    for axis in range(a.ndim):
        np.cumsum(out, axis=axis, out=out)
    return out


def _box_sums(prefix: np.ndarray, lo: list[np.ndarray], hi: list[np.ndarray]) -> np.ndarray:
    """Sums over boxes ``[lo, hi)`` per axis given as broadcastable index arrays."""
    if len(lo) == 1:
        return prefix[hi[0]] - prefix[lo[0]]
    x0, x1 = lo[0][:, None], hi[0][:, None]
    y0, y1 = lo[1][None, :], hi[1][None, :]
    return prefix[x1, y1] - prefix[x0, y1] - prefix[x1, y0] + prefix[x0, y0]


def _clipped_bounds(centers: np.ndarray, r: int, n: int):
    return np.clip(centers - r, 0, n), np.clip(centers + r + 1, 0, n)


def maximal_function(f: GridField, r_max: int | None = None) -> GridField:
    """Centered maximal function of ``|f|`` over cubes, ``f`` extended by zero.

    Each cube average divides by the full cube volume ``(2r+1)^d`` even where
    the cube leaves the grid. ``r_max`` defaults to the largest radius whose
    cube can still gain mass, beyond which averages only shrink.
    """
    a = np.abs(f.values)
    d = a.ndim
    if d not in (1, 2):
        raise ValueError("maximal_function supports 1D and 2D grids")
    if r_max is None:
        r_max = max(a.shape) - 1
    prefix = _prefix_sums(a)
    ranges = [np.arange(n) for n in a.shape]
    out = a.copy()
    for r in range(1, r_max + 1):
        lo, hi = zip(*(_clipped_bounds(c, r, n) for c, n in zip(ranges, a.shape)))
        avg = _box_sums(prefix, list(lo), list(hi)) / float(2 * r + 1) ** d
        np.maximum(out, avg, out=out)
    return f.like(out)


@dataclass(frozen=True)
class CubeFamily:
    """Dyadic cubes: half-widths ``0, 1, 2, 4, ...`` with centers strided by the half-width.

    ``mode='clipped'`` intersects every cube with the grid; ``mode='interior'``
    keeps only cubes that lie inside the grid.
    """

    shape: tuple[int, ...]
    mode: str = "clipped"

    def __post_init__(self):
        if self.mode not in ("clipped", "interior"):
            raise ValueError("mode must be 'clipped' or 'interior'")

    @property
    def half_widths(self) -> list[int]:
        widths = [0]
        r = 1
        while True:
            widths.append(r)
            if 2 * r + 1 >= max(self.shape):
                break
            r *= 2
        return widths

    @property
    def family_id(self) -> str:
        return f"dyadic-{self.mode}-{'x'.join(map(str, self.shape))}"

    def windows(self):
        """Yield ``(r, lo, hi)`` with per-axis bound arrays of the family's cubes."""
        for r in self.half_widths:
            stride = max(1, r)
            lo, hi = [], []
            for n in self.shape:
                c = np.arange(0, n, stride)
                if self.mode == "interior":
                    c = c[(c - r >= 0) & (c + r < n)]
                a, b = _clipped_bounds(c, r, n)
                lo.append(a)
                hi.append(b)
            if any(len(x) == 0 for x in lo):
                continue
            yield r, lo, hi

    def __len__(self) -> int:
        return sum(int(np.prod([len(x) for x in lo])) for _, lo, _ in self.windows())


def _cube_averages(values: np.ndarray, cubes: CubeFamily):
    prefix = _prefix_sums(values)
    ones = _prefix_sums(np.ones_like(values))
    for r, lo, hi in cubes.windows():
        yield r, _box_sums(prefix, lo, hi) / _box_sums(ones, lo, hi)


@dataclass
class Weight:
    """A strictly positive grid field plus cached Muckenhoupt estimates."""

    field: GridField
    cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not np.all(self.field.values > 0):
            raise ValueError("weights must be strictly positive")

    @property
    def values(self) -> np.ndarray:
        return self.field.values

    @classmethod
    def constant(cls, shape, h: float, value: float = 1.0, origin=None) -> "Weight":
        return cls(GridField(np.full(shape, float(value)), h, origin))

    def certify(self, p: float, cubes: CubeFamily | None = None) -> float:
        cubes = cubes or CubeFamily(self.field.shape)
        key = (float(p), cubes.family_id)
        if key not in self.cache:
            self.cache[key] = ap_constant(self, p, cubes)
        return self.cache[key]


def ap_constant(w: Weight, p: float, cubes: CubeFamily | None = None) -> float:
    """Largest ``<w>_B <w^(-1/(p-1))>_B^(p-1)`` over the cube family."""
    if not p > 1:
        raise ValueError("ap_constant needs p > 1; use a1_constant for p = 1")
    cubes = cubes or CubeFamily(w.field.shape)
    vals = w.values
    dual = vals ** (-1.0 / (p - 1.0))
    best = 1.0
    for (_, avg), (_, avg_dual) in zip(_cube_averages(vals, cubes), _cube_averages(dual, cubes)):
        best = max(best, float(np.max(avg * avg_dual ** (p - 1.0))))
    return best


def a1_constant(w: Weight) -> float:
    """``max M w / w`` over the grid."""
    return float(np.max(maximal_function(w.field).values / w.values))


def weight_from_forcing(f, s0: float, *, certify: bool = True) -> Weight:
    """``(1 + M|f|)^(s0 - 2)``, the weight in which ``f`` is square integrable.

    ``f`` is a :class:`GridField` or any object with a ``magnitude()`` method
    returning the pointwise Frobenius norm as a cell-centered field.
    """
    if not 1.0 < s0 < 2.0:
        raise ValueError("s0 must lie in (1, 2)")
    mag = f if isinstance(f, GridField) else f.magnitude()
    Mf = maximal_function(mag)
    w = Weight(mag.like((1.0 + Mf.values) ** (s0 - 2.0)))
    if certify:
        w.certify(2.0)
    return w


def dual_weight(w: Weight, q: float) -> Weight:
    if not q > 1:
        raise ValueError("q must exceed 1")
    return Weight(w.field.like(w.values ** (-1.0 / (q - 1.0))))


def cap_weight(w: Weight, j: int) -> Weight:
    """Pointwise ``min(1, j w)``."""
    if j < 1:
        raise ValueError("j must be a positive integer")
    return Weight(w.field.like(np.minimum(1.0, j * w.values)))


def min_weight(w1: Weight, w2: Weight) -> Weight:
    return Weight(w1.field.like(np.minimum(w1.values, w2.values)))


def default_s0(q: float) -> float:
    """``1 + (q - 1)/2`` clamped into the open interval ``(1, 2)``."""
    return float(np.clip(1.0 + 0.5 * (q - 1.0), 1.0 + 1e-3, 2.0 - 1e-3))


# -- weighted norms -------------------------------------------------------------


def face_weights(w: np.ndarray, axis: int) -> np.ndarray:
    """Cell weight averaged onto the faces normal to ``axis`` (one-sided on the boundary)."""
    pad = [(0, 0)] * w.ndim
    pad[axis] = (1, 1)
    wp = np.pad(w, pad, mode="edge")
    lo = [slice(None)] * w.ndim
    hi = [slice(None)] * w.ndim
    lo[axis] = slice(0, -1)
    hi[axis] = slice(1, None)
    return 0.5 * (wp[tuple(lo)] + wp[tuple(hi)])


def node_weights(w: np.ndarray) -> np.ndarray:
    """Mean of the (1, 2 or 4) cells around every node of a 2D grid."""
    total = np.zeros((w.shape[0] + 1, w.shape[1] + 1))
    count = np.zeros_like(total)
    for di in (0, 1):
        for dj in (0, 1):
            total[di:di + w.shape[0], dj:dj + w.shape[1]] += w
            count[di:di + w.shape[0], dj:dj + w.shape[1]] += 1.0
    return total / count


def weighted_lp_norm(f, w: Weight | None, p: float) -> float:
    """``(sum |f|^p w h^d)^(1/p)``.

    Grid fields are summed cell by cell. Staggered fields provide
    ``lp_power_sum(cell_weights, p)`` and sample the weight at their own
    locations.
    """
    if p < 1:
        raise ValueError("p must be at least 1")
    if isinstance(f, GridField):
        wv = np.ones(f.shape) if w is None else w.values
        total = float(np.sum(np.abs(f.values) ** p * wv) * f.cell_volume)
    else:
        wv = None if w is None else w.values
        total = float(f.lp_power_sum(wv, p))
    return total ** (1.0 / p)


# -- embedding into an unweighted Lebesgue space --------------------------------


def embedding_exponent(a_p: float, p: float, n: int = 2) -> float:
    """Exponent ``s > 1`` used for the local embedding of ``L^p_w`` into ``L^s``.

    Hoelder's inequality needs ``w^(-s/(p-s))`` to be integrable on cubes;
    we take ``s/(p-s) = (1 + eta)/(p-1)`` with the reverse-Hoelder margin
    ``eta = 1/(2^(n+1) A_p)``.
    """
    eta = 1.0 / (2 ** (n + 1) * a_p)
    return p * (1.0 + eta) / (p + eta)


def embedding_constant(w: Weight, p: float, s: float, cubes: CubeFamily | None = None) -> float:
    """Sup over cubes of ``(<w^(-s/(p-s))>^((p-s)/s) <w>)^(1/p)``."""
    if not 1 <= s < p:
        raise ValueError("need 1 <= s < p")
    cubes = cubes or CubeFamily(w.field.shape)
    r = s / (p - s)
    best = 0.0
    for (_, avg), (_, avg_neg) in zip(_cube_averages(w.values, cubes),
                                      _cube_averages(w.values ** (-r), cubes)):
        best = max(best, float(np.max((avg_neg ** (1.0 / r) * avg) ** (1.0 / p))))
    return best


def embedding_ratio(f: GridField, w: Weight, p: float, s: float,
                    cubes: CubeFamily | None = None) -> float:
    """Largest ``(<|f|^s>^(1/s)) / (<w>^(-1/p) <|f|^p w>^(1/p))`` over cubes."""
    cubes = cubes or CubeFamily(w.field.shape)
    a = np.abs(f.values)
    gen_s = _cube_averages(a ** s, cubes)
    gen_pw = _cube_averages(a ** p * w.values, cubes)
    gen_w = _cube_averages(w.values, cubes)
    best = 0.0
    for (_, ms), (_, mpw), (_, mw) in zip(gen_s, gen_pw, gen_w):
        lhs = ms ** (1.0 / s)
        rhs = mw ** (-1.0 / p) * mpw ** (1.0 / p)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(rhs > 0, lhs / rhs, 0.0)
        best = max(best, float(np.max(ratio)))
    return best
