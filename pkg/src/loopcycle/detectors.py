"""Detectors for the low-probability loop-geometry events and the exponent
condition checker.

The three events:

* pinching: one loop carries two times i<j whose points are closer than N^c
  while both arcs between them have diameter at least N^a resp. N^b,
* two mesoscopic loops: one cluster holds two distinct loops above the
  N^a / N^b diameter thresholds,
* distant connection: two points at distance >= N^c on one loop B whose
  neighbourhoods are connected by the soup with B removed.

All detectors are exact relative to these finite-sample definitions and
operate on pure loop-trace connectivity (bridge decorations never enter the
event definitions).  Geometric conventions: point-to-point distances are
Euclidean, diameters are L-infinity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .errors import DomainError
from .soup import SoupSample


@dataclass(frozen=True)
class ExponentConfig:
    """Exponents (a, b, c) for the event lemmas plus the theorem thresholds."""

    d: int
    a: float
    b: float
    c: float
    alpha: float = 0.0
    beta: float = 0.0
    gamma: float = 0.0
    gamma0: float = 0.0

    def __post_init__(self):
        if not (self.c < self.b <= self.a):
            raise DomainError(f"exponents must satisfy c < b <= a, got "
                              f"a={self.a}, b={self.b}, c={self.c}")

    @property
    def nu1(self) -> float:
        """No-pinching margin: (a+b)(d-2) - (d + c(d-4))."""
        return (self.a + self.b) * (self.d - 2) - (self.d + self.c * (self.d - 4))

    @property
    def nu2(self) -> float:
        """No-two-mesoscopic margin: a + b - (1 + 4/(d-2))."""
        return self.a + self.b - (1.0 + 4.0 / (self.d - 2))

    @property
    def nu3(self) -> float:
        """No-distant-connection margin: (d-2)a + (d-4)c - d."""
        return (self.d - 2) * self.a + (self.d - 4) * self.c - self.d


@dataclass
class AbcReport:
    nu1: float
    nu2: float
    nu3: float
    nu1_ok: bool
    nu2_ok: bool
    nu3_ok: bool
    beta_ok: bool
    gamma_ok: bool

    @property
    def all_ok(self) -> bool:
        return (self.nu1_ok and self.nu2_ok and self.nu3_ok
                and self.beta_ok and self.gamma_ok)

    def to_json(self) -> dict:
        return {"nu1": self.nu1, "nu2": self.nu2, "nu3": self.nu3,
                "nu1_ok": self.nu1_ok, "nu2_ok": self.nu2_ok, "nu3_ok": self.nu3_ok,
                "beta_ok": self.beta_ok, "gamma_ok": self.gamma_ok,
                "all_ok": self.all_ok}


def check_abc_conditions(cfg: ExponentConfig) -> AbcReport:
    """Evaluate the three nu margins and the beta/gamma thresholds.

    A margin of exactly zero is reported as FAIL (the conditions are strict
    inequalities; the a=b=9/10, d=7 case lands exactly on nu2=0).
    """
    if cfg.d <= 4:
        raise DomainError(f"exponent conditions need d >= 5, got d={cfg.d}")
    return AbcReport(
        nu1=cfg.nu1, nu2=cfg.nu2, nu3=cfg.nu3,
        nu1_ok=cfg.nu1 > 0.0, nu2_ok=cfg.nu2 > 0.0, nu3_ok=cfg.nu3 > 0.0,
        beta_ok=cfg.beta > 4.0 / (cfg.d - 2),
        gamma_ok=cfg.gamma > 2.0 / (cfg.d - 4),
    )


# ---------------------------------------------------------------------------
# event detectors
# ---------------------------------------------------------------------------

def _loop_positions(s: SoupSample, li: int) -> np.ndarray:
    return s.loop(li).positions()[:-1].astype(np.int32)  # (L, d)


def _arc_diameter(pos: np.ndarray, i: int, j: int) -> float:
    """L-infinity diameter of the arc pos[i..j] (inclusive, forward)."""
    seg = pos[i:j + 1]
    return float((seg.max(axis=0) - seg.min(axis=0)).max())


def detect_pinching(s: SoupSample, cfg: ExponentConfig) -> list:
    """Witnesses (loop id, x, y) of (a,b,c)-pinching loops.

    Candidate close pairs come from a spatial hash with cell size >= N^c
    (adjacent cells cover every pair at Euclidean distance < N^c), then the
    two arc diameters are evaluated exactly.
    """
    N = s.box.N
    ra = N ** cfg.a
    rb = N ** cfg.b
    rc = N ** cfg.c
    out = []
    cell = max(1.0, math.ceil(rc))
    for li in range(s.n_loops):
        if s.diameters[li] < ra:
            continue
        pos = _loop_positions(s, li)
        L = len(pos)
        if L < 2 * rb:
            continue
        grid: dict = {}
        for t in range(L):
            key = tuple((pos[t] // cell).tolist())
            grid.setdefault(key, []).append(t)
        offsets = list(np.ndindex(*([3] * s.box.d)))
        seen = set()
        hit = None
        for key, ts in grid.items():
            for off in offsets:
                nkey = tuple(k + o - 1 for k, o in zip(key, off))
                if nkey < key or nkey not in grid:
                    continue
                for i in ts:
                    for j in grid[nkey]:
                        if nkey == key and j <= i:
                            continue
                        a, b = (i, j) if i < j else (j, i)
                        gap = b - a
                        if min(gap, L - gap) < rb:
                            continue
                        if (a, b) in seen:
                            continue
                        seen.add((a, b))
                        if np.linalg.norm(pos[a] - pos[b]) >= rc:
                            continue
                        d1 = _arc_diameter(pos, a, b)
                        d2 = _arc_diameter_wrap(pos, b, a)
                        if (d1 >= ra and d2 >= rb) or (d1 >= rb and d2 >= ra):
                            hit = (li, tuple(int(x) for x in pos[a]),
                                   tuple(int(x) for x in pos[b]))
                            break
                    if hit:
                        break
                if hit:
                    break
            if hit:
                break
        if hit:
            out.append(hit)
    return out


def _arc_diameter_wrap(pos: np.ndarray, i: int, j: int) -> float:
    """Diameter of the arc from index i forward (wrapping) to index j."""
    if i <= j:
        seg = pos[i:j + 1]
    else:
        seg = np.concatenate([pos[i:], pos[:j + 1]], axis=0)
    return float((seg.max(axis=0) - seg.min(axis=0)).max())


def detect_pinching_bruteforce(s: SoupSample, cfg: ExponentConfig) -> list:
    """Quadratic reference scan; same witnesses as detect_pinching."""
    N = s.box.N
    ra, rb, rc = N ** cfg.a, N ** cfg.b, N ** cfg.c
    out = []
    for li in range(s.n_loops):
        pos = _loop_positions(s, li)
        L = len(pos)
        hit = None
        for a in range(L):
            for b in range(a + 1, L):
                if np.linalg.norm(pos[a] - pos[b]) >= rc:
                    continue
                d1 = _arc_diameter(pos, a, b)
                d2 = _arc_diameter_wrap(pos, b, a)
                if (d1 >= ra and d2 >= rb) or (d1 >= rb and d2 >= ra):
                    hit = (li, tuple(int(x) for x in pos[a]),
                           tuple(int(x) for x in pos[b]))
                    break
            if hit:
                break
        if hit:
            out.append(hit)
    return out


def detect_two_mesoscopic(clusters: list, cfg: ExponentConfig) -> list:
    """Witnesses (cluster id, loop1, loop2) with diameters > N^a and > N^b."""
    out = []
    for c in clusters:
        s = c.sample
        N = s.box.N
        ds = [(int(s.diameters[li]), int(li)) for li in c.loop_ids]
        ds.sort(reverse=True)
        if len(ds) >= 2 and ds[0][0] > N ** cfg.a and ds[1][0] > N ** cfg.b:
            out.append((c.id, ds[0][1], ds[1][1]))
    return out


def _components_without(s: SoupSample, removed: int) -> dict:
    """vertex -> component id over the loops with one loop removed."""
    comp: dict = {}
    parent: dict = {}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    def union(x, y):
        rx, ry = find(x), find(y)
        if rx != ry:
            parent[rx] = ry

    for li in range(s.n_loops):
        if li == removed:
            continue
        vs = s.visits_lin[s.offsets[li]:s.offsets[li + 1]]
        first = int(vs[0])
        for v in vs:
            v = int(v)
            if v not in parent:
                parent[v] = v
            union(v, first)
    return {v: find(v) for v in parent}


def detect_distant_connection(s: SoupSample, clusters, cfg: ExponentConfig) -> list:
    """Witnesses (loop id, x, y): distant same-loop points whose neighbours
    are connected by the soup without that loop."""
    N = s.box.N
    ra, rc = N ** cfg.a, N ** cfg.c
    out = []
    from .lattice import neighbors as box_neighbors

    for li in range(s.n_loops):
        if s.diameters[li] < ra:
            continue
        comp = _components_without(s, li)
        pos = _loop_positions(s, li)
        pts = {tuple(int(x) for x in row) for row in pos}
        pts = sorted(pts)
        hit = None
        for x, y in combinations(pts, 2):
            if math.dist(x, y) < rc:
                continue
            cx = {comp.get(s.box.index_of(p)) for p in box_neighbors(x, s.box)}
            cy = {comp.get(s.box.index_of(p)) for p in box_neighbors(y, s.box)}
            cx.discard(None)
            cy.discard(None)
            if cx & cy:
                hit = (li, x, y)
                break
        if hit:
            out.append(hit)
    return out


def witnesses_to_csv(path, event: str, seed: int, box, witnesses) -> None:
    with open(path, "a") as fh:
        for w in witnesses:
            fields = [event, str(seed), str(box.N), str(box.d)]
            fields.append(str(w[0]))
            for p in w[1:]:
                fields.append("(" + " ".join(str(c) for c in p) + ")")
            fh.write(",".join(fields) + "\n")
