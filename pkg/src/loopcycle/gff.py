"""Discrete GFF sampling plus cable-edge zero-crossing bits.

The field has covariance equal to the expected-visits Green's function
g = (I - P)^{-1}, so it is sampled by solving R phi = xi with R the upper
Cholesky factor of the sparse precision I - P (banded after reverse
Cuthill-McKee reordering; one factorisation per box, reused across
replicas).

An edge between same-sign endpoints opens with probability
1 - exp(-kappa * phi_a * phi_b); opposite signs never open (the cable
bridge crosses zero by continuity).  kappa is the single calibration
constant of the backend; the unit-conductance cable value in this
normalisation is 1/d, which the calibration experiment confirms.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cholesky_banded, solve_banded
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components, reverse_cuthill_mckee

from .errors import NumericError, ResourceError
from .lattice import BoxConfig

KAPPA_BY_DIM = {}


def default_kappa(d: int) -> float:
    return KAPPA_BY_DIM.get(d, 1.0 / d)


_FACTOR_LIMIT = 300_000


def _precision_matrix(box: BoxConfig):
    """Sparse I - P for the killed walk."""
    n = box.n_vertices
    strides = box.strides()
    side = box.side
    rows = [np.arange(n, dtype=np.int64)]
    cols = [np.arange(n, dtype=np.int64)]
    vals = [np.ones(n)]
    idx = np.arange(n, dtype=np.int64)
    for k in range(box.d):
        c = (idx // strides[k]) % side
        u = idx[c < side - 1]
        rows.append(u)
        cols.append(u + strides[k])
        vals.append(np.full(len(u), -1.0 / (2 * box.d)))
        rows.append(u + strides[k])
        cols.append(u)
        vals.append(np.full(len(u), -1.0 / (2 * box.d)))
    A = coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                   shape=(n, n)).tocsr()
    return A


class GFFSampler:
    """Banded-Cholesky factorisation of the precision of one box."""

    def __init__(self, box: BoxConfig):
        if box.n_vertices > _FACTOR_LIMIT:
            raise NumericError(
                f"box too large for dense/banded factorisation (|Lambda|={box.n_vertices})")
        self.box = box
        A = _precision_matrix(box)
        perm = np.asarray(reverse_cuthill_mckee(A, symmetric_mode=True))
        Ap = A[perm][:, perm].tocoo()
        bw = int(np.abs(Ap.row - Ap.col).max()) if Ap.nnz else 0
        n = box.n_vertices
        ab = np.zeros((bw + 1, n))
        upper = Ap.col >= Ap.row
        ab[bw + Ap.row[upper] - Ap.col[upper], Ap.col[upper]] = Ap.data[upper]
        try:
            self._factor = cholesky_banded(ab, lower=False)
        except Exception as exc:  # noqa: BLE001
            raise NumericError(f"banded Cholesky factorisation failed: {exc}") from exc
        self._bw = bw
        self._perm = perm

    def sample(self, rng, batch: int = 1) -> np.ndarray:
        """(n, batch) field samples with covariance g."""
        n = self.box.n_vertices
        xi = rng.standard_normal((n, batch))
        y = solve_banded((0, self._bw), self._factor, xi)
        out = np.empty_like(y)
        out[self._perm] = y
        return out


_SAMPLER_CACHE: dict = {}


def cached_sampler(box: BoxConfig) -> GFFSampler:
    key = (box.d, box.N)
    if key not in _SAMPLER_CACHE:
        _SAMPLER_CACHE[key] = GFFSampler(box)
    return _SAMPLER_CACHE[key]


def box_edges(box: BoxConfig) -> np.ndarray:
    """(E, 2) linear indices of all nearest-neighbour edges of the box."""
    n = box.n_vertices
    strides = box.strides()
    side = box.side
    idx = np.arange(n, dtype=np.int64)
    pieces = []
    for k in range(box.d):
        c = (idx // strides[k]) % side
        u = idx[c < side - 1]
        pieces.append(np.stack([u, u + strides[k]], axis=1))
    return np.concatenate(pieces, axis=0)


@dataclass
class GFFSample:
    """One field realisation, optionally with its open-edge bits."""

    box: BoxConfig
    seed: int
    phi: np.ndarray                       # (n,) field in g-normalisation
    kappa: float | None = None
    edges: np.ndarray | None = None       # (E, 2) linear endpoints
    edge_open: np.ndarray | None = None   # (E,) bool

    def phi_at(self, p) -> float:
        return float(self.phi[self.box.index_of(p)])


def sample_gff(box_or_table, seed: int) -> GFFSample:
    """Centered Gaussian field with covariance g; deterministic per seed.

    Accepts a BoxConfig or a GreenTable (the table only contributes its box;
    covariance is realised through the precision factorisation).
    """
    box = getattr(box_or_table, "box", box_or_table)
    sampler = cached_sampler(box)
    rng = np.random.default_rng(np.random.PCG64(seed))
    phi = sampler.sample(rng, batch=1)[:, 0]
    return GFFSample(box=box, seed=seed, phi=phi)


def open_edges(sample: GFFSample, seed: int | None = None,
               kappa: float | None = None) -> GFFSample:
    """Draw the cable-edge bits: same-sign endpoints open with
    1 - exp(-kappa*phi_a*phi_b), opposite signs are always closed."""
    if kappa is None:
        kappa = default_kappa(sample.box.d)
    if seed is None:
        seed = sample.seed
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(0xED6E,)))
    edges = box_edges(sample.box)
    pa = sample.phi[edges[:, 0]]
    pb = sample.phi[edges[:, 1]]
    prod = pa * pb
    p = np.where(prod > 0.0, -np.expm1(-kappa * np.clip(prod, 0.0, None)), 0.0)
    bits = rng.random(len(edges)) < p
    sample.kappa = kappa
    sample.edges = edges
    sample.edge_open = bits
    return sample


def sign_cluster_labels(sample: GFFSample) -> np.ndarray:
    """Component label per vertex of the same-sign open-edge graph."""
    if sample.edge_open is None:
        raise NumericError("edge bits not sampled; call open_edges first")
    n = sample.box.n_vertices
    e = sample.edges[sample.edge_open]
    adj = coo_matrix((np.ones(len(e), dtype=np.int8), (e[:, 0], e[:, 1])), shape=(n, n))
    _, labels = connected_components(adj, directed=False)
    return labels


def sign_clusters(sample: GFFSample) -> list:
    """Connected components as vertex-index arrays (per-sign by construction)."""
    labels = sign_cluster_labels(sample)
    order = np.argsort(labels, kind="stable")
    bounds = np.searchsorted(labels[order], np.arange(labels.max() + 2))
    return [order[bounds[k]:bounds[k + 1]] for k in range(labels.max() + 1)]


def dump_sign_clusters(sample: GFFSample, path) -> None:
    import json

    labels = sign_cluster_labels(sample)
    with open(path, "w") as fh:
        for cid, verts in enumerate(sign_clusters(sample)):
            sign = 1 if sample.phi[verts[0]] > 0 else -1
            rec = {"cluster_id": cid,
                   "sign": sign,
                   "vertices": [list(map(int, sample.box.point_of(int(v))))
                                for v in verts]}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    del labels
