"""Loop clusters, cable-edge bridges, winding certificates, minimal chains.

Cluster connectivity has two ingredients:

* two loops sharing a vertex are connected (their traces intersect),
* neighbouring vertices can also be joined through the interior of the
  cable edge between them.  Given the decorated local times the edge opens
  with probability 1 - exp(-kappa * sqrt(Gamma_u * Gamma_v)), where
  Gamma_x is the occupation of x (one unit-mean exponential per visit) plus
  an independent Gamma(1/2) contribution that every vertex -- visited or
  not -- receives from the point-loop part of the soup.

Unvisited vertices therefore percolate a little as well; this subcritical
background is explored lazily outward from the visited set, which keeps the
cost proportional to the soup size instead of the box volume while sampling
exactly the same connectivity among soup vertices as the full-volume field.

The winding certificate of a cluster against a tube comes from a BFS in the
universal cover: each vertex carries the accumulated winding offset of its
BFS tree path, and a non-tree edge whose offset mismatch is a nonzero
integer w certifies a cycle of index w.  The index generator i is the gcd
of all such mismatches, and the witness cycle is reconstructed from the BFS
tree (tree branches are disjoint, so witnesses are always vertex-simple).
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .errors import ConsistencyError, ResourceError
from .lattice import BoxConfig, Tube, TubeFamily
from .soup import SoupSample

# Bridge-opening constant in the expected-visits Green normalisation; the
# unit-conductance cable-graph value is 1/d, and the arcsine calibration
# experiment (see experiments.calibrate) confirms it.
KAPPA_BY_DIM = {}


def default_kappa(d: int) -> float:
    return KAPPA_BY_DIM.get(d, 1.0 / d)


# ---------------------------------------------------------------------------
# bridge bits
# ---------------------------------------------------------------------------

@dataclass
class BridgeSet:
    """Open cable-edge bridges and the decorated occupation behind them."""

    kappa: float
    edges: np.ndarray           # (B, 2) linear vertex ids, open bridges only
    gamma_idx: np.ndarray       # vertices whose Gamma was materialised (sorted)
    gamma_val: np.ndarray
    n_candidates: int = 0


def sample_bridges(s: SoupSample, kappa: float | None = None,
                   seed: int | None = None,
                   extra_sources: np.ndarray | None = None,
                   full_background: bool = False) -> BridgeSet:
    """Sample every bridge bit that can influence soup connectivity.

    Starts from the visited set with Gamma(n_x + 1/2) decorations and
    explores the Gamma(1/2) background lazily: edges are decided once their
    outcome can matter, all Gammas and bits are memoised, and the whole
    construction is deterministic given (sample, seed, sources).

    Connectivity queries involving vertices outside the visited set must
    list them in ``extra_sources`` so their background clusters get
    explored too; ``full_background=True`` decides every edge of the box
    (exact full-volume field, small boxes only).
    """
    box = s.box
    if kappa is None:
        kappa = default_kappa(box.d)
    if seed is None:
        seed = s.seed
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(0xB21D6E,)))

    strides = box.strides()
    side = box.side
    d = box.d

    if len(s.visits_lin):
        uniq, counts = np.unique(s.visits_lin, return_counts=True)
    else:
        uniq = np.zeros(0, dtype=np.int64)
        counts = np.zeros(0, dtype=np.int64)
    if full_background:
        if box.n_vertices > 1 << 22:
            raise ResourceError(f"full background field too large (|Lambda|={box.n_vertices})")
        extra = np.setdiff1d(np.arange(box.n_vertices, dtype=np.int64), uniq)
    elif extra_sources is not None and len(extra_sources):
        extra = np.setdiff1d(np.asarray(extra_sources, dtype=np.int64), uniq)
    else:
        extra = np.zeros(0, dtype=np.int64)
    if len(extra):
        merged = np.concatenate([uniq, extra])
        merged_counts = np.concatenate([counts, np.zeros(len(extra), dtype=np.int64)])
        order = np.argsort(merged, kind="stable")
        uniq, counts = merged[order], merged_counts[order]

    known = uniq.copy()                       # vertices with materialised Gamma
    known_gamma = rng.gamma(counts + 0.5) if len(uniq) else np.zeros(0)
    reached = uniq.copy()                     # open-closure of the source set
    frontier = uniq
    done_keys = np.zeros(0, dtype=np.int64)   # canonical edge key: lower*d + axis
    open_edges = []
    n_candidates = 0

    while len(frontier):
        cand_u, cand_v, cand_key = [], [], []
        for k in range(d):
            c = (frontier // strides[k]) % side
            up = frontier[c < side - 1]
            dn = frontier[c > 0]
            cand_u.append(up)
            cand_v.append(up + strides[k])
            cand_key.append(up * d + k)
            cand_u.append(dn)
            cand_v.append(dn - strides[k])
            cand_key.append((dn - strides[k]) * d + k)
        cu = np.concatenate(cand_u)
        cv = np.concatenate(cand_v)
        ck = np.concatenate(cand_key)
        ck, order = np.unique(ck, return_index=True)
        cu, cv = cu[order], cv[order]
        fresh = ~np.isin(ck, done_keys)
        cu, cv, ck = cu[fresh], cv[fresh], ck[fresh]
        if len(ck) == 0:
            break
        n_candidates += len(ck)
        done_keys = np.union1d(done_keys, ck)

        touched = np.union1d(cu, cv)
        new_vertices = touched[~np.isin(touched, known)]
        if len(new_vertices):
            new_gam = rng.gamma(np.full(len(new_vertices), 0.5))
            merged = np.concatenate([known, new_vertices])
            merged_gam = np.concatenate([known_gamma, new_gam])
            sort = np.argsort(merged, kind="stable")
            known = merged[sort]
            known_gamma = merged_gam[sort]

        gu = known_gamma[np.searchsorted(known, cu)]
        gv = known_gamma[np.searchsorted(known, cv)]
        p_open = -np.expm1(-kappa * np.sqrt(gu * gv))
        bits = rng.random(len(ck)) < p_open
        if bits.any():
            open_edges.append(np.stack([cu[bits], cv[bits]], axis=1))
            endpoints = np.unique(np.concatenate([cu[bits], cv[bits]]))
            newly = endpoints[~np.isin(endpoints, reached)]
        else:
            newly = np.zeros(0, dtype=np.int64)
        reached = np.union1d(reached, newly)
        frontier = newly

    edges = np.concatenate(open_edges, axis=0) if open_edges else \
        np.zeros((0, 2), dtype=np.int64)
    return BridgeSet(kappa=kappa, edges=edges, gamma_idx=known,
                     gamma_val=known_gamma, n_candidates=n_candidates)


# ---------------------------------------------------------------------------
# cluster construction
# ---------------------------------------------------------------------------

@dataclass
class WindingCertificate:
    """Evidence about the winding subgroup of a cluster around one tube."""

    tube: Tube
    offsets: tuple = ()          # distinct nonzero cycle indices discovered
    index: int = 0               # i(C, tube): gcd of offsets (0 = no winding)
    sigma: int = 0               # sum over member loops of |winding|
    witness: list = field(default_factory=list)  # closed vertex path (coords)
    witness_winding: int = 0
    clearance: float = 0.0       # min distance of the witness to the tube

    def to_json(self) -> dict:
        return {"tube": self.tube.to_json(), "offsets": list(self.offsets),
                "i": self.index, "sigma": self.sigma,
                "witness": [list(p) for p in self.witness],
                "witness_winding": self.witness_winding,
                "clearance": self.clearance}


@dataclass
class ClusterRecord:
    """One loop cluster: member loops, vertex set, edges, certificates."""

    id: int
    loop_ids: np.ndarray
    vertices: np.ndarray         # sorted linear indices (visits + bridge vertices)
    coords: np.ndarray           # (m, d) int16
    edges: np.ndarray            # (e, 2) local vertex indices
    edge_owner: np.ndarray       # (e,) loop id of a step edge, -1 for bridges
    diameter: float
    sample: SoupSample = None
    certificates: dict = field(default_factory=dict)
    tag: str = "unclassified"
    _adj: tuple = None           # cached directed CSR (indptr, src, dst)
    _bbox: dict = None

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def proj_bbox(self, i: int, j: int):
        if self._bbox is None:
            self._bbox = {}
        box = self._bbox.get((i, j))
        if box is None:
            pi = self.coords[:, i]
            pj = self.coords[:, j]
            box = (pi.min(), pi.max(), pj.min(), pj.max())
            self._bbox[(i, j)] = box
        return box

    def adjacency(self):
        """Directed CSR of the cluster graph (both edge orientations)."""
        if self._adj is None:
            e = self.edges
            both = np.concatenate([e, e[:, ::-1]], axis=0)
            order = np.lexsort((both[:, 1], both[:, 0]))
            both = both[order]
            keep = np.ones(len(both), dtype=bool)
            keep[1:] = (both[1:] != both[:-1]).any(axis=1)
            both = both[keep]
            src, dst = both[:, 0], both[:, 1]
            indptr = np.searchsorted(src, np.arange(self.n_vertices + 1))
            self._adj = (indptr, src, dst)
        return self._adj

    def to_json(self) -> dict:
        return {"cluster_id": self.id, "n_vertices": int(self.n_vertices),
                "loop_ids": [int(x) for x in self.loop_ids],
                "diameter": self.diameter, "tag": self.tag,
                "certificates": [c.to_json() for c in self.certificates.values()
                                 if c.index > 0]}


def _decode_coords(box: BoxConfig, lin: np.ndarray) -> np.ndarray:
    out = np.empty((len(lin), box.d), dtype=np.int16)
    rem = lin.copy()
    for k in range(box.d - 1, -1, -1):
        out[:, k] = rem % box.side - box.N
        rem //= box.side
    return out


def _step_edges(s: SoupSample):
    """Consecutive-visit edges of all loops (closing step included) + owners."""
    u = s.visits_lin
    if len(u) == 0:
        return np.zeros((0, 2), dtype=np.int64), np.zeros(0, dtype=np.int32)
    v = np.empty_like(u)
    v[:-1] = u[1:]
    v[s.offsets[1:] - 1] = u[s.offsets[:-1]]
    owner = np.repeat(np.arange(s.n_loops, dtype=np.int32), s.lengths)
    return np.stack([u, v], axis=1), owner


def build_clusters(s: SoupSample, bridges: BridgeSet | None = None,
                   min_diameter: float = 0.0,
                   always_loops=()) -> list:
    """Connected loop clusters, sorted by decreasing diameter.

    With ``bridges=None`` only shared vertices merge loops (pure trace
    overlap); with bridge bits the open edges also merge across cable edges
    and pull bridge-path vertices into the cluster vertex sets.

    ``min_diameter`` skips materialising records for smaller clusters
    (detection pipelines only need the macroscopic ones); components
    containing a loop listed in ``always_loops`` are kept regardless.
    """
    step_edges, step_owner = _step_edges(s)
    if bridges is not None and len(bridges.edges):
        all_edges = np.concatenate([step_edges, bridges.edges], axis=0)
        owners = np.concatenate([step_owner,
                                 np.full(len(bridges.edges), -1, dtype=np.int32)])
    else:
        all_edges = step_edges
        owners = step_owner
    if len(all_edges) == 0:
        return []
    verts = np.unique(all_edges)
    eu = np.searchsorted(verts, all_edges[:, 0])
    ev = np.searchsorted(verts, all_edges[:, 1])
    m = len(verts)
    adj = coo_matrix((np.ones(len(eu), dtype=np.int8), (eu, ev)), shape=(m, m))
    n_comp, labels = connected_components(adj, directed=False)

    loop_first = s.visits_lin[s.offsets[:-1]] if s.n_loops else np.zeros(0, dtype=np.int64)
    loop_comp = labels[np.searchsorted(verts, loop_first)]
    coords = _decode_coords(s.box, verts)

    vert_order = np.argsort(labels, kind="stable")
    vert_bounds = np.searchsorted(labels[vert_order], np.arange(n_comp + 1))
    sorted_coords = coords[vert_order]
    lo = np.minimum.reduceat(sorted_coords, vert_bounds[:-1], axis=0)
    hi = np.maximum.reduceat(sorted_coords, vert_bounds[:-1], axis=0)
    comp_diam = (hi - lo).max(axis=1).astype(float)

    wanted = np.unique(loop_comp)
    if min_diameter > 0.0:
        keep_mask = comp_diam[wanted] >= min_diameter
        if len(always_loops):
            forced = np.unique(loop_comp[np.asarray(always_loops, dtype=np.int64)])
            keep_mask |= np.isin(wanted, forced)
        wanted = wanted[keep_mask]
    if len(wanted) == 0:
        return []

    edge_comp = labels[eu]
    edge_order = np.argsort(edge_comp, kind="stable")
    edge_sorted = np.stack([eu, ev], axis=1)[edge_order]
    owner_sorted = owners[edge_order]
    edge_bounds = np.searchsorted(edge_comp[edge_order], np.arange(n_comp + 1))

    loop_order = np.argsort(loop_comp, kind="stable")
    loop_bounds = np.searchsorted(loop_comp[loop_order], np.arange(n_comp + 1))

    records = []
    for comp in wanted:
        vsel = np.sort(vert_order[vert_bounds[comp]:vert_bounds[comp + 1]])
        cluster_verts = verts[vsel]
        esel = edge_sorted[edge_bounds[comp]:edge_bounds[comp + 1]]
        local = np.searchsorted(cluster_verts, verts[esel]).astype(np.int32)
        records.append(ClusterRecord(
            id=-1, loop_ids=np.sort(loop_order[loop_bounds[comp]:loop_bounds[comp + 1]]),
            vertices=cluster_verts, coords=coords[vsel], edges=local,
            edge_owner=owner_sorted[edge_bounds[comp]:edge_bounds[comp + 1]],
            diameter=float(comp_diam[comp]), sample=s))

    records.sort(key=lambda c: (-c.diameter, int(c.vertices[0])))
    for i, c in enumerate(records):
        c.id = i
    return records


# ---------------------------------------------------------------------------
# winding machinery
# ---------------------------------------------------------------------------

def member_windings(c: ClusterRecord, t: Tube) -> np.ndarray:
    """Signed winding of every member loop around the tube (vectorised)."""
    s = c.sample
    if s is None or len(c.loop_ids) == 0:
        return np.zeros(0, dtype=np.int64)
    i, j = t.axes
    box = s.box
    strides = box.strides()
    sublens = s.lengths[c.loop_ids].astype(np.int64)
    u = np.concatenate([s.visits_lin[s.offsets[li]:s.offsets[li + 1]]
                        for li in c.loop_ids])
    offs = np.zeros(len(c.loop_ids) + 1, dtype=np.int64)
    np.cumsum(sublens, out=offs[1:])
    v = np.empty_like(u)
    v[:-1] = u[1:]
    v[offs[1:] - 1] = u[offs[:-1]]
    xu = (u // strides[i]) % box.side - box.N - t.anchor[0]
    yu = (u // strides[j]) % box.side - box.N - t.anchor[1]
    xv = (v // strides[i]) % box.side - box.N - t.anchor[0]
    yv = (v // strides[j]) % box.side - box.N - t.anchor[1]
    inc = np.arctan2(xu * yv - yu * xv, xu * xv + yu * yv) / (2 * np.pi)
    sums = np.add.reduceat(inc, offs[:-1]) if len(inc) else np.zeros(0)
    w = np.rint(sums).astype(np.int64)
    if len(sums) and np.abs(sums - w).max() > 1e-6:
        raise ConsistencyError("member loop winding did not round to an integer")
    return w


def _adjacency_of_edges(m: int, edges: np.ndarray):
    both = np.concatenate([edges, edges[:, ::-1]], axis=0)
    order = np.lexsort((both[:, 1], both[:, 0]))
    both = both[order]
    keep = np.ones(len(both), dtype=bool)
    keep[1:] = (both[1:] != both[:-1]).any(axis=1)
    both = both[keep]
    src, dst = both[:, 0], both[:, 1]
    indptr = np.searchsorted(src, np.arange(m + 1))
    return indptr, src, dst


def _certificate_from_graph(coords, edges, t: Tube, clearance_min: float,
                            sigma: int, adj=None) -> WindingCertificate:
    """Universal-cover BFS over an explicit local graph."""
    ax_i, ax_j = t.axes
    px = coords[:, ax_i].astype(float) - t.anchor[0]
    py = coords[:, ax_j].astype(float) - t.anchor[1]
    dist = np.hypot(px, py)
    keep = dist >= clearance_min

    cert = WindingCertificate(tube=t, sigma=sigma)
    if not keep.any():
        return cert
    m = len(coords)
    if adj is None:
        if len(edges) == 0:
            return cert
        adj = _adjacency_of_edges(m, edges)
    indptr, src, dst = adj
    if len(src) == 0:
        return cert
    cross = px[src] * py[dst] - py[src] * px[dst]
    dot = px[src] * px[dst] + py[src] * py[dst]
    inc = np.arctan2(cross, dot) / (2 * np.pi)

    # pure-python BFS over list views (faster than numpy scalar indexing)
    indptr_l = indptr.tolist()
    dst_l = dst.tolist()
    inc_l = inc.tolist()
    keep_l = keep.tolist()
    offset = [None] * m
    parent = [-1] * m
    depth = [0] * m
    found = []
    for root in np.where(keep)[0]:
        root = int(root)
        if offset[root] is not None:
            continue
        offset[root] = 0.0
        depth[root] = 0
        dq = deque([root])
        while dq:
            u = dq.popleft()
            ou = offset[u]
            pu = parent[u]
            for eidx in range(indptr_l[u], indptr_l[u + 1]):
                v = dst_l[eidx]
                if not keep_l[v]:
                    continue
                ov = offset[v]
                if ov is None:
                    offset[v] = ou + inc_l[eidx]
                    parent[v] = u
                    depth[v] = depth[u] + 1
                    dq.append(v)
                elif v != pu and u != parent[v]:
                    delta = ou + inc_l[eidx] - ov
                    w = round(delta)
                    if abs(delta - w) > 1e-6:
                        raise ConsistencyError(f"non-integer cover offset {delta}")
                    if w != 0 and u < v:
                        found.append((abs(w), depth[u] + depth[v], u, v, int(w)))
    if not found:
        return cert

    ws = sorted({f[4] for f in found})
    g = 0
    for w in ws:
        g = math.gcd(g, abs(w))
    cert.offsets = tuple(ws)
    cert.index = g

    exact = [f for f in found if f[0] == g]
    pool = exact if exact else found
    pool.sort()
    _, _, u, v, w = pool[0]
    path_u, x = [], u
    while x != -1:
        path_u.append(x)
        x = int(parent[x])
    path_v, x = [], v
    while x != -1:
        path_v.append(x)
        x = int(parent[x])
    while len(path_u) > 1 and len(path_v) > 1 and path_u[-2] == path_v[-2]:
        path_u.pop()
        path_v.pop()
    # cycle lca -> ... -> u -> v -> ... -> lca; tree branches are disjoint
    cyc = path_u[::-1] + path_v[:-1]
    if w < 0:
        cyc = [cyc[0]] + cyc[1:][::-1]
        w = -w
    k = int(np.argmin(cyc))
    cyc = cyc[k:] + cyc[:k]
    cyc.append(cyc[0])
    cert.witness = [tuple(int(x) for x in coords[p]) for p in cyc]
    cert.witness_winding = w
    cert.clearance = float(dist[cyc[:-1]].min())
    return cert


def winding_bfs(c: ClusterRecord, t: Tube, clearance_min: float = 0.0,
                with_sigma: bool = True) -> WindingCertificate:
    """Winding certificate of the cluster against one tube.

    BFS runs over the cluster subgraph restricted to vertices at distance
    >= clearance_min from the tube; sigma sums over all member loops
    regardless of the restriction (skipped when ``with_sigma=False``,
    detection pipelines only need the index).
    """
    sigma = 0
    if with_sigma and c.sample is not None:
        sigma = int(np.abs(member_windings(c, t)).sum())
    return _certificate_from_graph(c.coords, c.edges, t, clearance_min, sigma,
                                   adj=c.adjacency())


def _family_by_pair(family: TubeFamily) -> dict:
    """Tubes grouped by axis pair; product grids get (u_vals, v_vals, grid)."""
    cache = getattr(family, "_by_pair", None)
    if cache is None:
        cache = {}
        for t in family.tubes:
            cache.setdefault(t.axes, []).append(t)
        packed = {}
        for axes, ts in cache.items():
            u_vals = np.unique([t.anchor[0] for t in ts])
            v_vals = np.unique([t.anchor[1] for t in ts])
            grid = None
            if len(ts) == len(u_vals) * len(v_vals):
                grid = {}
                for t in ts:
                    ku = int(np.searchsorted(u_vals, t.anchor[0]))
                    kv = int(np.searchsorted(v_vals, t.anchor[1]))
                    grid[(ku, kv)] = t
            packed[axes] = (u_vals, v_vals, ts, grid)
        family._by_pair = packed
        cache = packed
    return cache


def candidate_tubes(c: ClusterRecord, family: TubeFamily, clearance: float):
    """Family tubes the cluster could possibly wind around at the clearance.

    Necessary conditions checked: the anchor sits at least ``clearance``
    inside the projected bounding box, and the projection occupies all four
    open quadrants around the anchor (every winding cycle crosses the four
    axis rays).  Both are evaluated on the whole anchor grid at once.
    """
    for (i, j), (u_vals, v_vals, ts, grid) in _family_by_pair(family).items():
        mi, ma, mj, mb = c.proj_bbox(i, j)
        if grid is None:
            for t in ts:
                if (mi + clearance <= t.anchor[0] <= ma - clearance
                        and mj + clearance <= t.anchor[1] <= mb - clearance):
                    yield t
            continue
        oku = np.where((u_vals >= mi + clearance) & (u_vals <= ma - clearance))[0]
        okv = np.where((v_vals >= mj + clearance) & (v_vals <= mb - clearance))[0]
        if len(oku) == 0 or len(okv) == 0:
            continue
        xs = c.coords[:, i]
        ys = c.coords[:, j]
        gu, gv = len(u_vals), len(v_vals)
        H = np.zeros((gu + 1, gv + 1))
        np.add.at(H, (np.searchsorted(u_vals, xs), np.searchsorted(v_vals, ys)), 1.0)
        P = H.cumsum(axis=0).cumsum(axis=1)                    # x<u_k & y<v_l at [k,l]
        S = H[::-1, ::-1].cumsum(axis=0).cumsum(axis=1)[::-1, ::-1]  # x>u_k & y>v_l at [k+1,l+1]
        A = H.cumsum(axis=1)
        M1 = A[::-1, :].cumsum(axis=0)[::-1, :]                # x>u_k & y<v_l at [k+1,l]
        B = H.cumsum(axis=0)
        M2 = B[:, ::-1].cumsum(axis=1)[:, ::-1]                # x<u_k & y>v_l at [k,l+1]
        for ku in oku:
            for kv in okv:
                if (S[ku + 1, kv + 1] > 0 and P[ku, kv] > 0
                        and M1[ku + 1, kv] > 0 and M2[ku, kv + 1] > 0):
                    t = grid.get((int(ku), int(kv)))
                    if t is not None:
                        yield t


def detect_C_eps(clusters: list, family: TubeFamily, N: int,
                 relax: float = 0.5) -> list:
    """Clusters with a winding certificate at clearance >= eps*N*relax.

    Only clusters of diameter >= 2*eps*N can qualify (a cycle at distance
    eps*N from a tube has at least that diameter); the returned records
    carry their certificates and the length of the list is K_eps.
    """
    eps = family.eps
    clearance = eps * N * relax
    out = []
    for c in clusters:
        if c.diameter < 2 * eps * N:
            continue
        hit = False
        for t in candidate_tubes(c, family, clearance):
            cert = c.certificates.get((t, clearance))
            if cert is None:
                cert = winding_bfs(c, t, clearance_min=clearance, with_sigma=False)
                c.certificates[(t, clearance)] = cert
            if cert.index > 0:
                hit = True
                break
        if hit:
            out.append(c)
    return out


def _loop_as_record(s: SoupSample, loop_id: int) -> ClusterRecord:
    """A single loop's trace as a throwaway cluster record."""
    sl = slice(s.offsets[loop_id], s.offsets[loop_id + 1])
    u = s.visits_lin[sl]
    v = np.empty_like(u)
    v[:-1] = u[1:]
    v[-1] = u[0]
    verts = np.unique(u)
    e = np.stack([np.searchsorted(verts, u), np.searchsorted(verts, v)], axis=1)
    coords = _decode_coords(s.box, verts)
    diam = float((coords.max(axis=0) - coords.min(axis=0)).max())
    return ClusterRecord(id=-1, loop_ids=np.array([loop_id]), vertices=verts,
                         coords=coords, edges=e.astype(np.int32),
                         edge_owner=np.full(len(e), loop_id, dtype=np.int32),
                         diameter=diam, sample=s)


def detect_B_eps(s: SoupSample, family: TubeFamily, N: int,
                 clearance: float | None = None) -> list:
    """Loop ids whose own trace certifies winding at clearance >= eps*N."""
    eps = family.eps
    if clearance is None:
        clearance = eps * N
    out = []
    for li in range(s.n_loops):
        if s.diameters[li] < 2 * clearance:
            continue
        rec = _loop_as_record(s, li)
        for t in candidate_tubes(rec, family, clearance):
            cert = winding_bfs(rec, t, clearance_min=clearance, with_sigma=False)
            if cert.index > 0:
                out.append(li)
                break
    return out


# ---------------------------------------------------------------------------
# minimal chains
# ---------------------------------------------------------------------------

def _subunion_certifies(c: ClusterRecord, kept, t: Tube, clearance_min: float) -> bool:
    """Does the cluster graph restricted to the kept member loops still wind?

    Bridge edges and bridge-path vertices stay available, but every vertex
    visited only by removed loops disappears together with its edges.
    """
    s = c.sample
    kept = set(int(x) for x in kept)
    removed = [int(li) for li in c.loop_ids if int(li) not in kept]
    if removed:
        rem_verts = np.unique(np.concatenate(
            [s.visits_lin[s.offsets[li]:s.offsets[li + 1]] for li in removed]))
        if kept:
            keep_verts = np.unique(np.concatenate(
                [s.visits_lin[s.offsets[li]:s.offsets[li + 1]] for li in kept]))
            rem_verts = rem_verts[~np.isin(rem_verts, keep_verts)]
        vertex_gone = np.isin(c.vertices, rem_verts)
    else:
        vertex_gone = np.zeros(len(c.vertices), dtype=bool)
    owner_ok = (c.edge_owner < 0) | np.isin(c.edge_owner, sorted(kept) if kept else [-2])
    e = c.edges[owner_ok]
    e = e[~vertex_gone[e[:, 0]] & ~vertex_gone[e[:, 1]]]
    if len(e) == 0:
        return False
    cert = _certificate_from_graph(c.coords, e, t, clearance_min, sigma=0)
    return cert.index > 0


def _loops_adjacent(s: SoupSample, bridge_edges: np.ndarray, a: int, b: int) -> bool:
    ua = s.visits_lin[s.offsets[a]:s.offsets[a + 1]]
    ub = s.visits_lin[s.offsets[b]:s.offsets[b + 1]]
    if np.isin(ua, ub).any():
        return True
    if len(bridge_edges):
        eu = np.isin(bridge_edges[:, 0], ua) & np.isin(bridge_edges[:, 1], ub)
        ev = np.isin(bridge_edges[:, 0], ub) & np.isin(bridge_edges[:, 1], ua)
        return bool(eu.any() or ev.any())
    return False


def minimal_chain(c: ClusterRecord, t: Tube, clearance_min: float):
    """A minimal circular chain of member loops carrying a winding cycle.

    Greedy removal from the full member set: a loop is dropped whenever the
    remaining union (with the cluster's bridge decorations) still certifies
    a nonzero index at the clearance.  Returns (ordered loop ids, max loop
    diameter), or None when the cluster has no certificate for t.
    """
    cert = c.certificates.get((t, clearance_min))
    if cert is None:
        cert = winding_bfs(c, t, clearance_min=clearance_min)
        c.certificates[(t, clearance_min)] = cert
    if cert.index == 0:
        return None
    s = c.sample
    cand = [int(li) for li in c.loop_ids]
    if not _subunion_certifies(c, cand, t, clearance_min):
        raise ConsistencyError("certificate exists but full member union does not wind")

    order = sorted(cand, key=lambda li: (-int(s.diameters[li]), li))
    chain = list(cand)
    changed = True
    while changed:
        changed = False
        for li in order:
            if li not in chain or len(chain) == 1:
                continue
            trial = [x for x in chain if x != li]
            if _subunion_certifies(c, trial, t, clearance_min):
                chain = trial
                changed = True

    bridge_edges = c.vertices[c.edges[c.edge_owner < 0]] if len(c.edges) else \
        np.zeros((0, 2), dtype=np.int64)
    if len(chain) == 1:
        ordered = chain
    else:
        adj = {li: [] for li in chain}
        for ia, a in enumerate(chain):
            for b in chain[ia + 1:]:
                if _loops_adjacent(s, bridge_edges, a, b):
                    adj[a].append(b)
                    adj[b].append(a)
        start = min(chain)
        ordered, prev, cur = [start], None, start
        while True:
            nxt = [x for x in adj[cur] if x != prev and x not in ordered]
            if not nxt:
                break
            ordered.append(min(nxt))
            prev, cur = cur, min(nxt)
        if len(ordered) != len(chain):
            ordered = sorted(chain)  # adjacency not a clean single cycle
    max_diam = float(max(int(s.diameters[li]) for li in chain))
    return ordered, max_diam
