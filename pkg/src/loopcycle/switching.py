"""Switching statistics and the parity-switch surgery on loop configurations.

The experiment measures, over clusters with winding index i > 0 around a
tube, the frequency of even Sigma/i (Sigma = sum of the member loops'
unoriented winding indices); the cable-graph switching property predicts
exactly 1/2.

``parity_switch`` realises the crossing-parity flip along a witness cycle:
every edge of the cycle changes its crossing count by one (a crossing is
removed when at least two are present, otherwise one is inserted), and the
loose strand ends created at each cycle vertex are re-paired with the
gamma-adjacent ends.  The surgery preserves the cluster vertex set and all
off-cycle crossing counts exactly, flips every on-cycle crossing parity,
and flips the parity of Sigma/i.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConsistencyError, DomainError
from .lattice import BoxConfig, Tube
from .soup import SoupSample, soup_from_loops
from .clusters import (ClusterRecord, build_clusters, member_windings,
                       sample_bridges, winding_bfs)


def wilson_interval(successes: int, n: int, z: float = 1.96):
    """Wilson score interval for a binomial proportion."""
    if n == 0:
        return 0.0, 1.0
    p = successes / n
    den = 1 + z * z / n
    mid = (p + z * z / (2 * n)) / den
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / den
    return mid - half, mid + half


@dataclass
class SwitchStat:
    """Aggregated parity statistics of winding clusters against one tube."""

    tube: Tube
    records: list = field(default_factory=list)  # (i, sigma, parity)
    n_even: int = 0
    n_odd: int = 0

    @property
    def n(self) -> int:
        return self.n_even + self.n_odd

    @property
    def even_frequency(self) -> float:
        return self.n_even / self.n if self.n else float("nan")

    def confidence_interval(self, z: float = 1.96):
        return wilson_interval(self.n_even, self.n, z)

    def add(self, i: int, sigma: int):
        if sigma % i != 0:
            raise ConsistencyError(f"sigma={sigma} not a multiple of i={i}")
        parity = (sigma // i) % 2
        self.records.append((i, sigma, parity))
        if parity == 0:
            self.n_even += 1
        else:
            self.n_odd += 1

    def to_json(self) -> dict:
        lo, hi = self.confidence_interval()
        return {"tube": self.tube.to_json(), "n": self.n, "n_even": self.n_even,
                "n_odd": self.n_odd, "even_frequency": self.even_frequency,
                "wilson_95": [lo, hi]}


def _winding_candidates(clusters, tube: Tube):
    """Clusters whose projected bounding box surrounds the tube anchor."""
    i, j = tube.axes
    for c in clusters:
        mi, ma, mj, mb = c.proj_bbox(i, j)
        if mi + 0.5 <= tube.anchor[0] <= ma - 0.5 and \
           mj + 0.5 <= tube.anchor[1] <= mb - 0.5:
            yield c


def collect_switch_stats(clusters, tube: Tube, stat: SwitchStat | None = None) -> SwitchStat:
    """Record (i, Sigma) for every cluster that winds around the tube."""
    if stat is None:
        stat = SwitchStat(tube=tube)
    for c in _winding_candidates(clusters, tube):
        cert = winding_bfs(c, tube, clearance_min=0.0)
        if cert.index > 0:
            stat.add(cert.index, cert.sigma)
    return stat


def switching_experiment(box: BoxConfig, tube: Tube, eps: float, replicas: int,
                         seed: int, kappa: float | None = None,
                         Lmax: int | None = None,
                         tail_threshold: float = 1e-2) -> SwitchStat:
    """Even-frequency of Sigma/i over winding clusters of many replicas.

    The tube must avoid the cable graph (guaranteed by half-integer
    anchors); certificates use the whole cluster (no clearance), which is
    the setting of the cable-graph switching property.
    """
    from .soup import cached_intensity, sample_soup

    table = cached_intensity(box, Lmax, tail_threshold)
    stat = SwitchStat(tube=tube)
    ss = np.random.SeedSequence(entropy=seed)
    child_seeds = ss.generate_state(replicas, dtype=np.uint64)
    for r in range(replicas):
        s = sample_soup(table, seed=int(child_seeds[r]))
        bridges = sample_bridges(s, kappa=kappa)
        clusters = build_clusters(s, bridges)
        collect_switch_stats(clusters, tube, stat)
    return stat


# ---------------------------------------------------------------------------
# parity switch surgery
# ---------------------------------------------------------------------------

class _Strand:
    __slots__ = ("sid", "u", "v")

    def __init__(self, sid, u, v):
        self.sid = sid  # deterministic tie-break id
        self.u = u      # end 0 vertex (linear index)
        self.v = v      # end 1 vertex


def _edge_key(a: int, b: int) -> tuple:
    return (a, b) if a <= b else (b, a)


def parity_switch(c: ClusterRecord, s: SoupSample, t: Tube) -> SoupSample:
    """Flip the crossing parity of every edge along the cluster's witness
    cycle and re-pair strands; returns the modified sample.

    Requires a certificate with index > 0 (computed at zero clearance).
    The surgery removes a crossing where at least two are present (so no
    vertex can lose its last visit) and inserts one otherwise; freed or new
    strand ends at each cycle vertex are paired with each other.
    """
    cert = c.certificates.get((t, 0.0))
    if cert is None:
        cert = winding_bfs(c, t, clearance_min=0.0)
        c.certificates[(t, 0.0)] = cert
    if cert.index == 0 or not cert.witness:
        raise DomainError("parity_switch requires a winding certificate with i > 0")

    box = s.box
    member = [int(x) for x in c.loop_ids]
    member_set = set(member)

    # strand pool: every traversal of every member loop
    strands = {}
    partner = {}      # (sid, end) -> (sid, end)
    sid = 0
    loop_first_strand = {}
    for li in member:
        L = int(s.lengths[li])
        base = sid
        vis = s.visits_lin[s.offsets[li]:s.offsets[li + 1]]
        for tstep in range(L):
            u = int(vis[tstep])
            v = int(vis[(tstep + 1) % L])
            strands[sid] = _Strand(sid, u, v)
            sid += 1
        for tstep in range(L):
            a = base + tstep
            b = base + (tstep + 1) % L
            partner[(a, 1)] = (b, 0)
            partner[(b, 0)] = (a, 1)
        loop_first_strand[li] = base

    # index strands by undirected edge
    by_edge = {}
    for st in strands.values():
        by_edge.setdefault(_edge_key(st.u, st.v), []).append(st.sid)
    for lst in by_edge.values():
        lst.sort()

    witness = [box.index_of(p) for p in cert.witness]
    m = len(witness) - 1  # closed: first == last
    stub_vertex = {}      # strand end -> vertex where it awaits re-pairing

    removed = set()
    for tstep in range(m):
        a, b = witness[tstep], witness[tstep + 1]
        key = _edge_key(a, b)
        lst = [x for x in by_edge.get(key, []) if x not in removed]
        if len(lst) >= 2:
            # remove the lowest-id crossing; each endpoint keeps ends from
            # the remaining crossings, so no vertex loses its last visit
            rid = lst[0]
            removed.add(rid)
            st = strands[rid]
            for e, vert in ((0, st.u), (1, st.v)):
                ke = (rid, e)
                if ke in partner:
                    mate = partner.pop(ke)
                    partner.pop(mate, None)
                    stub_vertex[mate] = vert
                else:
                    # this end was already freed by an adjacent removal;
                    # deleting the strand cancels that stub
                    stub_vertex.pop(ke, None)
        else:
            # insert a fresh crossing a -> b; its own ends are the stubs
            strands[sid] = _Strand(sid, a, b)
            by_edge.setdefault(key, []).append(sid)
            stub_vertex[(sid, 0)] = a
            stub_vertex[(sid, 1)] = b
            sid += 1

    # pair the stubs at every witness vertex (gamma-adjacent matching,
    # deterministic tie-break by strand id)
    stubs_at = {}
    for end, v in stub_vertex.items():
        stubs_at.setdefault(v, []).append(end)
    for v, stubs in stubs_at.items():
        if len(stubs) % 2 != 0:
            raise ConsistencyError(f"odd number of loose strand ends at vertex {v}")
        stubs.sort()
        for k in range(0, len(stubs), 2):
            e1, e2 = stubs[k], stubs[k + 1]
            partner[e1] = e2
            partner[e2] = e1

    # reconstruct loops: orbits of (cross strand) o (partner)
    alive = [x for x in sorted(strands) if x not in removed]
    seen = set()
    new_loops = []
    for start in alive:
        if start in seen:
            continue
        seq = []
        cur, end_in = start, 0
        while True:
            seen.add(cur)
            st = strands[cur]
            a, b = (st.u, st.v) if end_in == 0 else (st.v, st.u)
            seq.append((a, b))
            nxt, nxt_end = partner[(cur, 1 - end_in)]
            cur, end_in = nxt, nxt_end
            if cur == start and end_in == 0:
                break
        new_loops.append(seq)

    # verify the surgery contract
    old_verts = set()
    for li in member:
        old_verts.update(int(x) for x in s.visits_lin[s.offsets[li]:s.offsets[li + 1]])
    new_verts = {a for seq in new_loops for a, _ in seq}
    if new_verts != old_verts:
        raise ConsistencyError("parity_switch changed the cluster vertex set")

    # rebuild the full sample: untouched loops + surgered cluster loops
    def codes_of(seq):
        strides = box.strides()
        codes = []
        for a, b in seq:
            diff = b - a
            for k in range(box.d):
                if diff == strides[k]:
                    codes.append(k + 1)
                    break
                if diff == -strides[k]:
                    codes.append(-(k + 1))
                    break
            else:
                raise ConsistencyError("non-adjacent strand endpoints")
        return codes

    entries = []
    for li in range(s.n_loops):
        if li in member_set:
            continue
        lp = s.loop(li)
        entries.append((lp.root, lp.steps.tolist()))
    for seq in new_loops:
        root = box.point_of(seq[0][0])
        entries.append((root, codes_of(seq)))
    return soup_from_loops(box, entries, seed=s.seed, mode="switched")
