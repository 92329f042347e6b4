"""Geometry of the box [-N,N]^d, codimension-2 tubes, and winding arithmetic.

Conventions used throughout the package:

* vertices are integer coordinate tuples inside the box,
* diameters are measured in the L-infinity metric on lattice coordinates,
* distances to tubes and between point sets are Euclidean,
* winding numbers are counted in full turns (counterclockwise positive)
  of the projection onto a tube's axis plane.

Tube anchors sit on half-integers in both axis coordinates, so no lattice
vertex and no cable-edge point ever lies on a tube, and every single lattice
step sweeps an angle of strictly less than a half turn around any anchor.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError

Point = tuple  # integer lattice vertex, length d


@dataclass(frozen=True)
class BoxConfig:
    """The box Lambda_N = [-N, N]^d with d >= 3.

    N = 0 (a single vertex) is allowed as a degenerate case; it is useful
    for boundary tests of the Green and sampling machinery.
    """

    d: int
    N: int

    def __post_init__(self):
        if self.d < 3:
            raise DomainError(f"dimension must be >= 3, got d={self.d}")
        if self.N < 0:
            raise DomainError(f"half-side must be >= 0, got N={self.N}")
        if self.d * math.log2(2 * self.N + 1) >= 63:
            raise DomainError(
                f"(2N+1)^d does not fit a 64-bit index space (d={self.d}, N={self.N})"
            )

    @property
    def side(self) -> int:
        return 2 * self.N + 1

    @property
    def n_vertices(self) -> int:
        return self.side**self.d

    def contains(self, p) -> bool:
        return len(p) == self.d and all(-self.N <= c <= self.N for c in p)

    # linear indexing: row-major over coordinates shifted to [0, 2N]
    def index_of(self, p) -> int:
        idx = 0
        for c in p:
            idx = idx * self.side + (c + self.N)
        return idx

    def point_of(self, idx: int) -> Point:
        coords = []
        for _ in range(self.d):
            coords.append(idx % self.side - self.N)
            idx //= self.side
        return tuple(reversed(coords))

    def strides(self) -> np.ndarray:
        """Row-major strides so that index = coords_shifted @ strides."""
        s = np.ones(self.d, dtype=np.int64)
        for k in range(self.d - 2, -1, -1):
            s[k] = s[k + 1] * self.side
        return s


@dataclass(frozen=True)
class CablePoint:
    """A point in the interior of a cable edge: endpoints and a fraction.

    ``a`` and ``b`` must be lattice neighbours; ``t`` in (0,1) is the
    position measured from ``a``.
    """

    a: Point
    b: Point
    t: float

    def __post_init__(self):
        if not 0.0 < self.t < 1.0:
            raise DomainError(f"cable fraction must be strictly inside (0,1), got {self.t}")
        diff = [abs(x - y) for x, y in zip(self.a, self.b)]
        if sum(diff) != 1:
            raise DomainError(f"cable endpoints must be lattice neighbours: {self.a}, {self.b}")

    def coords(self) -> tuple:
        return tuple(x + self.t * (y - x) for x, y in zip(self.a, self.b))


def _is_half_integer(v) -> bool:
    return abs(v * 2 - round(v * 2)) < 1e-12 and round(v * 2) % 2 != 0


@dataclass(frozen=True)
class Tube:
    """A codimension-2 affine subspace {x : (x_i, x_j) = (u, v)}.

    ``axes`` is the ordered pair (i, j) of distinct coordinate indices and
    ``anchor`` the pair (u, v) of half-integers, so the tube never meets
    the cable graph.
    """

    axes: tuple
    anchor: tuple

    def __post_init__(self):
        i, j = self.axes
        if not (0 <= i < j):
            raise DomainError(f"tube axes must satisfy 0 <= i < j, got {self.axes}")
        u, v = self.anchor
        if not (_is_half_integer(u) and _is_half_integer(v)):
            raise DomainError(f"tube anchor must be half-integers, got {self.anchor}")

    def to_json(self) -> dict:
        return {"axes": [int(self.axes[0]), int(self.axes[1])],
                "anchor": [float(self.anchor[0]), float(self.anchor[1])]}

    @classmethod
    def from_json(cls, obj: dict) -> "Tube":
        return cls(axes=tuple(obj["axes"]), anchor=tuple(obj["anchor"]))


@dataclass
class TubeFamily:
    """A finite axis-aligned covering family of tubes at relative scale eps."""

    eps: float
    tubes: list = field(default_factory=list)
    xi: float = 0.0
    pitch: float = 1.0  # anchor grid spacing actually used (lattice units)

    def to_json(self) -> dict:
        return {
            "eps": self.eps,
            "xi": self.xi,
            "pitch": self.pitch,
            "tubes": [t.to_json() for t in self.tubes],
        }

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, sort_keys=True)

    @classmethod
    def from_json(cls, obj: dict) -> "TubeFamily":
        fam = cls(eps=obj["eps"], xi=obj["xi"], pitch=obj["pitch"])
        fam.tubes = [Tube.from_json(t) for t in obj["tubes"]]
        return fam


def neighbors(p, box: BoxConfig) -> list:
    """All lattice neighbours of p inside the box (between d and 2d of them)."""
    if not box.contains(p):
        raise DomainError(f"point {p} outside box [-{box.N},{box.N}]^{box.d}")
    out = []
    for k in range(box.d):
        for s in (-1, 1):
            c = p[k] + s
            if -box.N <= c <= box.N:
                out.append(p[:k] + (c,) + p[k + 1:])
    return out


def dist_to_tube(p, t: Tube) -> float:
    """Euclidean distance of the (i,j)-projection of p to the tube anchor."""
    i, j = t.axes
    return math.hypot(p[i] - t.anchor[0], p[j] - t.anchor[1])


def winding_increment(a, b, t: Tube) -> float:
    """Signed angle (in turns) swept around the tube anchor by the step a -> b.

    a and b must be adjacent on the cable graph; the result is always
    strictly smaller than 1/2 turn in absolute value because the anchor has
    half-integer coordinates and therefore never lies on the segment.
    """
    if sum(abs(x - y) for x, y in zip(a, b)) != 1:
        raise DomainError(f"points {a}, {b} are not lattice neighbours")
    i, j = t.axes
    u, v = t.anchor
    a0, a1 = a[i] - u, a[j] - v
    b0, b1 = b[i] - u, b[j] - v
    # angle difference via atan2 of the relative rotation; exact antisymmetry
    cross = a0 * b1 - a1 * b0
    dot = a0 * b0 + a1 * b1
    return math.atan2(cross, dot) / (2.0 * math.pi)


def path_winding(path, t: Tube) -> int:
    """Winding index of a closed lattice path around a tube.

    The path is a list of vertices whose consecutive elements are neighbours
    and whose first and last elements coincide (or are neighbours, in which
    case the closing step is implied).
    """
    if len(path) < 2:
        return 0
    pts = list(path)
    if pts[0] != pts[-1]:
        if sum(abs(x - y) for x, y in zip(pts[0], pts[-1])) != 1:
            raise DomainError("path is not closed")
        pts.append(pts[0])
    total = 0.0
    for a, b in zip(pts[:-1], pts[1:]):
        total += winding_increment(a, b, t)
    w = round(total)
    if abs(total - w) > 1e-6:
        raise DomainError(f"winding sum {total} of a closed path is not an integer")
    return int(w)


def steps_winding(steps_ij: np.ndarray, anchor) -> int:
    """Winding index from an (n,2) array of projected positions (closed).

    Vectorised twin of path_winding for the (i,j)-projection of a closed
    path; steps_ij[k] is the projected position after k steps and
    steps_ij[0] == steps_ij[-1].
    """
    x = steps_ij[:, 0] - anchor[0]
    y = steps_ij[:, 1] - anchor[1]
    cross = x[:-1] * y[1:] - y[:-1] * x[1:]
    dot = x[:-1] * x[1:] + y[:-1] * y[1:]
    total = float(np.arctan2(cross, dot).sum()) / (2.0 * math.pi)
    return int(round(total))


def tube_family(eps: float, box: BoxConfig) -> TubeFamily:
    """Axis-aligned tube family covering all codim-2 directions at scale eps.

    Anchors form, for each ordered axis pair, a square grid of half-integers
    with spacing ``pitch``; the target spacing is eps*N/4 but it is floored
    at 1 because anchors are constrained to half-integers.  Any anchor point
    in [-N, N]^2 is then within pitch/2 of a family anchor in L-infinity.
    """
    if not 0.0 < eps < 1.0:
        raise DomainError(f"eps must be in (0,1), got {eps}")
    pitch = max(1, int(eps * box.N / 4))
    # half-integer grid of integer pitch covering [-N, N]; the right edge is
    # always included so the covering radius is max(1/2, pitch/2)
    lo, hi = -box.N + 0.5, box.N - 0.5
    values = []
    u = lo
    while u <= hi:
        values.append(u)
        u += pitch
    if not values or values[-1] != hi:
        values.append(hi)
    if box.N == 0:
        values = [0.5]
    fam = TubeFamily(eps=eps, xi=eps / 4.0, pitch=float(pitch))
    for i in range(box.d):
        for j in range(i + 1, box.d):
            for u in values:
                for v in values:
                    fam.tubes.append(Tube(axes=(i, j), anchor=(u, v)))
    return fam


def hausdorff_distance(A, B) -> float:
    """Two-sided Hausdorff distance between finite point sets (Euclidean)."""
    A = np.asarray(list(A), dtype=float)
    B = np.asarray(list(B), dtype=float)
    if A.size == 0 or B.size == 0:
        raise DomainError("hausdorff_distance requires nonempty sets")
    if A.ndim == 1:
        A = A[None, :]
    if B.ndim == 1:
        B = B[None, :]
    # pairwise in blocks to keep memory flat for large clusters
    def one_sided(X, Y):
        worst = 0.0
        for k in range(0, len(X), 1024):
            blk = X[k:k + 1024]
            d2 = ((blk[:, None, :] - Y[None, :, :]) ** 2).sum(axis=2)
            worst = max(worst, float(np.sqrt(d2.min(axis=1)).max()))
        return worst

    return max(one_sided(A, B), one_sided(B, A))


def linf_diameter(points) -> float:
    """L-infinity diameter of a finite point set."""
    arr = np.asarray(list(points), dtype=float)
    if arr.ndim == 1:
        arr = arr[None, :]
    return float((arr.max(axis=0) - arr.min(axis=0)).max())
