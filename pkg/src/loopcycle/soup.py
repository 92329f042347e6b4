"""Exact Poisson sampling of the critical random-walk loop soup.

Sampling factorises through the coordinate decomposition described in
``greens``:

1. the number of loops of each even length L is Poisson with the exact mass
   Lambda_L = alpha * trace(P^L) / L,
2. given L, the per-coordinate step counts (l_1..l_d) are drawn from the
   exact conditional chain using prefix powers of the 1-D generating
   function,
3. given the counts, root coordinates are independent with weight
   diag(T^{l_k}), and each coordinate path is an exact 1-D closed killed
   bridge sampled stepwise from transfer-matrix ratios,
4. the coordinate labels of the L step slots are a uniformly shuffled
   multiset, which is exactly the conditional law of the slot assignment.

Everything is vectorised over the loops of one length block; no rejection
is used anywhere, and a fixed draw order makes samples bit-reproducible
from the seed.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConsistencyError, DomainError, ResourceError
from .greens import LoopIntensityTable, loop_intensity, suggest_Lmax
from .lattice import BoxConfig, Tube, steps_winding

# letter pairs for NDJSON step encoding, positive direction first
_AXIS_LETTERS = ["RL", "UD", "FB", "GH", "IJ", "KM", "NP", "QS", "TV", "WX", "YZ", "AC"]


@dataclass
class RWLoop:
    """A rooted closed nearest-neighbour lattice loop."""

    id: int
    root: tuple
    steps: np.ndarray  # signed axis codes, +-(axis+1), length L
    diameter: int

    @property
    def L(self) -> int:
        return len(self.steps)

    def positions(self) -> np.ndarray:
        """(L+1, d) vertex positions, first == last == root."""
        d = len(self.root)
        delta = np.zeros((self.L, d), dtype=np.int16)
        axes = np.abs(self.steps).astype(np.int64) - 1
        delta[np.arange(self.L), axes] = np.sign(self.steps)
        pos = np.empty((self.L + 1, d), dtype=np.int16)
        pos[0] = self.root
        np.cumsum(delta, axis=0, out=pos[1:], dtype=np.int16)
        pos[1:] += np.asarray(self.root, dtype=np.int16)
        return pos

    def vertex_cycle(self) -> list:
        return [tuple(int(c) for c in row) for row in self.positions()]

    def visit_multiset(self) -> dict:
        out: dict = {}
        for row in self.positions()[:-1]:
            key = tuple(int(c) for c in row)
            out[key] = out.get(key, 0) + 1
        return out

    def steps_string(self) -> str:
        out = []
        for s in self.steps:
            pair = _AXIS_LETTERS[abs(int(s)) - 1]
            out.append(pair[0] if s > 0 else pair[1])
        return "".join(out)

    def to_json(self) -> dict:
        return {"id": self.id, "root": [int(c) for c in self.root],
                "steps": self.steps_string(), "L": self.L,
                "diam": float(self.diameter)}


@dataclass
class SoupSample:
    """One Poisson realisation of the loop soup, stored in flat arrays.

    Loop i occupies ``steps[offsets[i]:offsets[i+1]]`` and its L visited
    vertices (times 0..L-1) are ``visits_lin`` over the same slice, encoded
    as linear box indices.
    """

    box: BoxConfig
    seed: int
    mode: str
    roots: np.ndarray      # (n, d) int16
    lengths: np.ndarray    # (n,) int32
    offsets: np.ndarray    # (n+1,) int64
    steps: np.ndarray      # (total,) int8
    visits_lin: np.ndarray  # (total,) int64
    diameters: np.ndarray  # (n,) int32
    table_digest: str = ""
    tail_mass: float = 0.0

    @property
    def n_loops(self) -> int:
        return len(self.lengths)

    def loop(self, i: int) -> RWLoop:
        sl = slice(self.offsets[i], self.offsets[i + 1])
        return RWLoop(id=i, root=tuple(int(c) for c in self.roots[i]),
                      steps=self.steps[sl].copy(), diameter=int(self.diameters[i]))

    @property
    def loops(self) -> list:
        return [self.loop(i) for i in range(self.n_loops)]

    def loop_visit_slices(self):
        for i in range(self.n_loops):
            yield i, self.visits_lin[self.offsets[i]:self.offsets[i + 1]]

    def dump_ndjson(self, path) -> None:
        with open(path, "w") as fh:
            for lp in self.loops:
                fh.write(json.dumps(lp.to_json(), sort_keys=True) + "\n")


def _table_digest(table: LoopIntensityTable) -> str:
    key = f"d={table.box.d},N={table.box.N},Lmax={table.Lmax},alpha={table.alpha}"
    return hashlib.sha256(key.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# block sampling internals
# ---------------------------------------------------------------------------

def _sample_compositions(table: LoopIntensityTable, L: int, n: int, rng) -> np.ndarray:
    """(n, d) even per-coordinate step counts with the exact conditional law."""
    d = table.box.d
    lvals = np.arange(L + 1)
    comps = np.zeros((n, d), dtype=np.int32)
    budget = np.full(n, L, dtype=np.int64)
    for k in range(d):
        rem_pow = table.log_Upow[d - 1 - k]  # coefficients of U^(d-1-k)
        idx = budget[:, None] - lvals[None, :]
        valid = idx >= 0
        logp = np.where(valid, table.log_u[None, : L + 1], -np.inf)
        logp = logp + np.where(valid, rem_pow[np.clip(idx, 0, None)], -np.inf)
        gumb = rng.gumbel(size=(n, L + 1))
        choice = np.argmax(logp + gumb, axis=1)
        comps[:, k] = choice
        budget -= choice
    if (budget != 0).any():
        raise ConsistencyError("composition sampling left a nonzero budget")
    return comps


def _sample_root_coords(table: LoopIntensityTable, comps: np.ndarray, rng) -> np.ndarray:
    """(n, d) root coordinates, coordinate k weighted by diag(T^{l_k})."""
    side = table.box.side
    diag = table.T_powers.diagonal(axis1=1, axis2=2)  # (Lmax+1, side)
    n, d = comps.shape
    roots = np.empty((n, d), dtype=np.int16)
    for k in range(d):
        w = diag[comps[:, k]]  # (n, side)
        cum = np.cumsum(w, axis=1)
        u = rng.random((n, 1)) * cum[:, -1:]
        roots[:, k] = (cum < u).sum(axis=1) - table.box.N
    return roots


def _sample_axis_paths(table: LoopIntensityTable, ls: np.ndarray, roots_k: np.ndarray,
                       rng) -> np.ndarray:
    """Closed 1-D killed bridges: (n, max_l) signed unit steps (0-padded).

    At remaining length r and position w with target c the up-probability is
    T^{r-1}[w+1, c] / (T^{r-1}[w+1, c] + T^{r-1}[w-1, c]).
    """
    N, side = table.box.N, table.box.side
    Tpow = table.T_powers
    n = len(ls)
    max_l = int(ls.max()) if n else 0
    out = np.zeros((n, max_l), dtype=np.int8)
    w = roots_k.astype(np.int64).copy()
    c = roots_k.astype(np.int64) + N
    for t in range(max_l):
        active = ls > t
        if not active.any():
            break
        r = ls[active] - t
        wa = w[active]
        ca = c[active]
        up_ok = wa + 1 <= N
        dn_ok = wa - 1 >= -N
        nup = np.where(up_ok, Tpow[r - 1, np.clip(wa + 1 + N, 0, side - 1), ca], 0.0)
        ndn = np.where(dn_ok, Tpow[r - 1, np.clip(wa - 1 + N, 0, side - 1), ca], 0.0)
        tot = nup + ndn
        if (tot <= 0).any():
            raise ConsistencyError("1-D bridge reached a dead end")
        u = rng.random(len(wa))
        step = np.where(u < nup / tot, 1, -1).astype(np.int8)
        out[active, t] = step
        w[active] = wa + step
    return out


def _sample_block(table: LoopIntensityTable, L: int, n: int, rng):
    """Sample n loops of length L; returns (roots, codes) arrays."""
    d = table.box.d
    comps = _sample_compositions(table, L, n, rng)
    roots = _sample_root_coords(table, comps, rng)

    # per-coordinate 1-D bridge steps
    axis_steps = []
    for k in range(d):
        axis_steps.append(_sample_axis_paths(table, comps[:, k].astype(np.int64),
                                             roots[:, k].astype(np.int64), rng))

    # label-sorted buffer: per row the axis-0 steps, then axis-1 steps, ...
    cum = np.cumsum(comps, axis=1)
    cumprev = cum - comps
    buffer = np.zeros((n, L), dtype=np.int8)
    rows = np.arange(n)
    for k in range(d):
        lk = comps[:, k]
        max_l = axis_steps[k].shape[1]
        if max_l == 0:
            continue
        cols = cumprev[:, k, None] + np.arange(max_l)[None, :]
        valid = np.arange(max_l)[None, :] < lk[:, None]
        buffer[rows[:, None].repeat(max_l, 1)[valid], cols[valid]] = (
            (k + 1) * axis_steps[k][valid])

    # uniform interleaving: labels of slots, shuffled, then inverse-placed
    labels = (np.arange(L)[None, :, None] >= cum[:, None, :]).sum(axis=2)
    perm = np.argsort(rng.random((n, L)), axis=1)
    labels = np.take_along_axis(labels, perm, axis=1)
    sorted_slots = np.argsort(labels, axis=1, kind="stable")
    codes = np.empty((n, L), dtype=np.int8)
    np.put_along_axis(codes, sorted_slots, buffer, axis=1)
    return roots, codes


def _positions_of_block(box: BoxConfig, roots: np.ndarray, codes: np.ndarray):
    """(n, L+1, d) positions; asserts closure and containment."""
    n, L = codes.shape
    d = box.d
    delta = np.zeros((n, L, d), dtype=np.int16)
    axes = np.abs(codes).astype(np.int64) - 1
    np.put_along_axis(delta, axes[:, :, None], np.sign(codes)[:, :, None].astype(np.int16),
                      axis=2)
    pos = np.empty((n, L + 1, d), dtype=np.int16)
    pos[:, 0, :] = roots
    np.cumsum(delta, axis=1, out=pos[:, 1:, :], dtype=np.int16)
    pos[:, 1:, :] += roots[:, None, :]
    if not (pos[:, -1, :] == roots).all():
        raise ConsistencyError("sampled loop is not closed")
    if pos.max() > box.N or pos.min() < -box.N:
        raise ConsistencyError("sampled loop exits the box")
    return pos


def sample_soup(table: LoopIntensityTable, seed: int, min_L: int = 2,
                mode: str = "full") -> SoupSample:
    """Draw one Poisson realisation of the soup restricted to L in [min_L, Lmax].

    Deterministic given (table parameters, seed).  Refuses to sample when the
    table's certified tail mass exceeds its configured threshold.
    """
    if table.tail_mass > table.tail_threshold:
        raise ResourceError(
            f"certified tail mass {table.tail_mass:.3e} exceeds threshold "
            f"{table.tail_threshold:.3e}; increase Lmax")
    rng = np.random.default_rng(np.random.PCG64(seed))
    box = table.box
    strides = box.strides()

    roots_all, lengths_all, steps_all, visits_all, diam_all = [], [], [], [], []
    for L in range(2, table.Lmax + 1, 2):
        mass = table.mass_of_length(L)
        n = int(rng.poisson(mass)) if mass > 0 else 0
        if n == 0 or L < min_L:
            # draw order must not depend on min_L, so the Poisson draw above
            # happens for every L; skipped lengths just discard their count
            if n > 0 and L < min_L:
                pass
            continue
        roots, codes = _sample_block(table, L, n, rng)
        pos = _positions_of_block(box, roots, codes)
        visits = pos[:, :-1, :]
        lin = ((visits.astype(np.int64) + box.N) * strides[None, None, :]).sum(axis=2)
        diam = (visits.max(axis=1) - visits.min(axis=1)).max(axis=1)
        roots_all.append(roots)
        lengths_all.append(np.full(n, L, dtype=np.int32))
        steps_all.append(codes.reshape(-1))
        visits_all.append(lin.reshape(-1))
        diam_all.append(diam.astype(np.int32))

    if roots_all:
        roots = np.concatenate(roots_all, axis=0)
        lengths = np.concatenate(lengths_all)
        steps = np.concatenate(steps_all)
        visits = np.concatenate(visits_all)
        diams = np.concatenate(diam_all)
    else:
        roots = np.zeros((0, box.d), dtype=np.int16)
        lengths = np.zeros(0, dtype=np.int32)
        steps = np.zeros(0, dtype=np.int8)
        visits = np.zeros(0, dtype=np.int64)
        diams = np.zeros(0, dtype=np.int32)
    offsets = np.zeros(len(lengths) + 1, dtype=np.int64)
    np.cumsum(lengths, out=offsets[1:])
    return SoupSample(box=box, seed=seed, mode=mode, roots=roots, lengths=lengths,
                      offsets=offsets, steps=steps, visits_lin=visits, diameters=diams,
                      table_digest=_table_digest(table), tail_mass=table.tail_mass)


_TABLE_CACHE: dict = {}


def cached_intensity(box: BoxConfig, Lmax: int | None = None,
                     tail_threshold: float = 1e-2,
                     alpha: float = 0.5) -> LoopIntensityTable:
    """Memoised table builder (tables are immutable after construction)."""
    if Lmax is None:
        Lmax = suggest_Lmax(box, tail_threshold)
    key = (box.d, box.N, Lmax, alpha, tail_threshold)
    if key not in _TABLE_CACHE:
        _TABLE_CACHE[key] = loop_intensity(box, Lmax, alpha=alpha,
                                           tail_threshold=tail_threshold)
    return _TABLE_CACHE[key]


def sample_large_loops(box: BoxConfig, diam_cutoff: float, seed: int,
                       Lmax: int | None = None,
                       tail_threshold: float = 1e-2) -> SoupSample:
    """Sample only the loops of diameter >= diam_cutoff.

    Lengths below 2*diam_cutoff cannot reach the cutoff (the spanning
    coordinate must go out and come back), so only longer loops are drawn;
    the remaining small-diameter loops are discarded, which is exactly the
    restriction of the full soup.
    """
    table = cached_intensity(box, Lmax, tail_threshold)
    min_L = 2 * math.ceil(diam_cutoff)
    s = sample_soup(table, seed, min_L=min_L, mode=f"large-only({diam_cutoff})")
    return filter_by_diameter(s, diam_cutoff)


def filter_by_diameter(s: SoupSample, diam_cutoff: float) -> SoupSample:
    """Restriction of a sample to loops with diameter >= cutoff (ids re-packed)."""
    keep = np.where(s.diameters >= diam_cutoff)[0]
    mask = np.zeros(len(s.steps), dtype=bool)
    for i in keep:
        mask[s.offsets[i]:s.offsets[i + 1]] = True
    lengths = s.lengths[keep]
    offsets = np.zeros(len(keep) + 1, dtype=np.int64)
    np.cumsum(lengths, out=offsets[1:])
    return SoupSample(box=s.box, seed=s.seed, mode=s.mode, roots=s.roots[keep],
                      lengths=lengths, offsets=offsets, steps=s.steps[mask],
                      visits_lin=s.visits_lin[mask], diameters=s.diameters[keep],
                      table_digest=s.table_digest, tail_mass=s.tail_mass)


def loop_winding(loop: RWLoop, t: Tube) -> int:
    """Signed winding index of the loop's vertex cycle around the tube.

    The unoriented index used in cluster statistics is the absolute value.
    """
    i, j = t.axes
    pos = loop.positions()
    return steps_winding(pos[:, [i, j]].astype(float), t.anchor)


def soup_from_loops(box: BoxConfig, loops, seed: int = 0,
                    mode: str = "planted") -> SoupSample:
    """Build a SoupSample from explicit (root, step-code list) pairs.

    Intended for planted configurations in tests and experiments; the same
    closure/containment assertions as the sampler apply.
    """
    roots, lengths, steps, visits, diams = [], [], [], [], []
    strides = box.strides()
    for root, codes in loops:
        codes = np.asarray(codes, dtype=np.int8)
        r = np.asarray(root, dtype=np.int16)[None, :]
        pos = _positions_of_block(box, r, codes[None, :])
        vis = pos[0, :-1, :]
        roots.append(r[0])
        lengths.append(len(codes))
        steps.append(codes)
        visits.append(((vis.astype(np.int64) + box.N) * strides[None, :]).sum(axis=1))
        diams.append(int((vis.max(axis=0) - vis.min(axis=0)).max()))
    n = len(lengths)
    lengths = np.asarray(lengths, dtype=np.int32)
    offsets = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(lengths, out=offsets[1:])
    return SoupSample(
        box=box, seed=seed, mode=mode,
        roots=np.stack(roots) if n else np.zeros((0, box.d), dtype=np.int16),
        lengths=lengths, offsets=offsets,
        steps=np.concatenate(steps) if n else np.zeros(0, dtype=np.int8),
        visits_lin=np.concatenate(visits) if n else np.zeros(0, dtype=np.int64),
        diameters=np.asarray(diams, dtype=np.int32),
        table_digest="planted", tail_mass=0.0)


def square_loop_codes(axis_a: int, axis_b: int, side: int = 1):
    """Step codes of the counterclockwise square ring in the (a,b)-plane."""
    a, b = axis_a + 1, axis_b + 1
    return [a] * side + [b] * side + [-a] * side + [-b] * side


class OccupationField:
    """Per-vertex occupation (local time) of a sample; map Point -> real."""

    def __init__(self, box: BoxConfig, idx: np.ndarray, values: np.ndarray):
        self.box = box
        self.idx = idx
        self.values = values
        self._lookup = None

    def __getitem__(self, p) -> float:
        if self._lookup is None:
            self._lookup = {int(i): float(v) for i, v in zip(self.idx, self.values)}
        return self._lookup.get(self.box.index_of(p), 0.0)

    def total(self) -> float:
        return float(self.values.sum())


def occupation_field(s: SoupSample, seed: int | None = None) -> OccupationField:
    """Sum over visits of independent unit-mean exponential holding times.

    A vertex visited n times gets a Gamma(n,1) local time; unvisited
    vertices get zero (the trivial-loop decoration used by the cluster
    bridging machinery is drawn separately there).  Deterministic given the
    sample and seed (default seed derives from the sample seed).
    """
    if seed is None:
        seed = s.seed
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(0x0CC,)))
    if len(s.visits_lin) == 0:
        return OccupationField(s.box, np.zeros(0, dtype=np.int64), np.zeros(0))
    uniq, inv = np.unique(s.visits_lin, return_inverse=True)
    draws = rng.standard_exponential(len(s.visits_lin))
    vals = np.bincount(inv, weights=draws, minlength=len(uniq))
    return OccupationField(s.box, uniq, vals)
