"""Green's functions of the killed walk, loop-mass intensity tables, and the
arcsine two-point oracle.

The killed walk is simple random walk on Z^d that dies when it attempts to
step outside [-N,N]^d.  Its Green's function here is normalised as expected
visit counts, g = (I - P)^{-1} with P(x,y) = 1/(2d) for neighbours inside the
box, so g(x,x) >= 1 and g is symmetric.

The loop-intensity machinery exploits that the L-infinity box makes the d
coordinates of a closed killed walk independent 1-D closed killed walks tied
together by a multinomial slot assignment:

    p_L(x,x) = (2d)^{-L} * sum over even (l_1..l_d), sum l_i = L, of
               L!/(l_1!..l_d!) * prod_i R_{l_i}(x_i)

where R_l(c) is the number of closed l-step +-1 walks from c staying in
[-N,N].  Summing the identity over x turns products of R into traces of the
1-D transfer matrix, so per-length soup masses come from d-th powers of a
1-D exponential generating function.  All series work is done in log space
(coefficients are nonnegative, so there is no cancellation).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.linalg import LinearOperator, cg
from scipy.special import logsumexp

from .errors import DomainError, NumericError, ResourceError
from .lattice import BoxConfig

ALPHA_CRITICAL = 0.5


# ---------------------------------------------------------------------------
# killed-walk operator and Green columns
# ---------------------------------------------------------------------------

def _apply_killed_minus(box: BoxConfig, v: np.ndarray) -> np.ndarray:
    """(I - P) v without materialising the sparse matrix."""
    shape = (box.side,) * box.d
    phi = v.reshape(shape)
    acc = np.zeros_like(phi)
    for axis in range(box.d):
        lo = [slice(None)] * box.d
        hi = [slice(None)] * box.d
        lo[axis] = slice(0, -1)
        hi[axis] = slice(1, None)
        acc[tuple(lo)] += phi[tuple(hi)]
        acc[tuple(hi)] += phi[tuple(lo)]
    return (phi - acc / (2.0 * box.d)).reshape(-1)


class GreenColumn:
    """One column g(., y) of the Green table; behaves as a map Point -> real."""

    def __init__(self, box: BoxConfig, y, values: np.ndarray):
        self.box = box
        self.y = tuple(y)
        self.values = values

    def __getitem__(self, p) -> float:
        return float(self.values[self.box.index_of(p)])

    def as_dict(self) -> dict:
        return {self.box.point_of(i): float(v) for i, v in enumerate(self.values)}

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            cols = ",".join(f"x{k}" for k in range(self.box.d))
            fh.write(f"{cols},value\n")
            for i, v in enumerate(self.values):
                p = self.box.point_of(i)
                fh.write(",".join(str(c) for c in p) + f",{v!r}\n")


def green_column(box: BoxConfig, y, rtol: float = 1e-12) -> GreenColumn:
    """Solve (I - P) u = delta_y by conjugate gradient.

    The final relative residual is checked against 1e-10; failure raises a
    NumericError carrying the residual.
    """
    if not box.contains(y):
        raise DomainError(f"{y} outside box")
    n = box.n_vertices
    rhs = np.zeros(n)
    rhs[box.index_of(y)] = 1.0
    if n == 1:
        return GreenColumn(box, y, np.ones(1))
    op = LinearOperator((n, n), matvec=lambda v: _apply_killed_minus(box, v))
    u, info = cg(op, rhs, rtol=rtol, atol=0.0, maxiter=20 * box.side**2)
    res = np.linalg.norm(_apply_killed_minus(box, u) - rhs) / np.linalg.norm(rhs)
    if info != 0 or res > 1e-10:
        raise NumericError(f"green_column CG did not converge: residual={res:.3e}")
    return GreenColumn(box, y, u)


class GreenTable:
    """Lazy column-on-demand Green's function table."""

    def __init__(self, box: BoxConfig):
        self.box = box
        self._cols: dict = {}

    def column(self, y) -> GreenColumn:
        key = tuple(y)
        if key not in self._cols:
            self._cols[key] = green_column(self.box, key)
        return self._cols[key]

    def g(self, x, y) -> float:
        return self.column(y)[tuple(x)]


def two_point_arcsine(g: GreenTable, x, y) -> float:
    """P(x <-> y) oracle: (2/pi) arcsin(g(x,y)/sqrt(g(x,x) g(y,y)))."""
    gxy = g.g(x, y)
    gxx = g.g(x, x)
    gyy = g.g(y, y)
    r = gxy / math.sqrt(gxx * gyy)
    if r > 1.0 + 1e-12 or r < -1.0 - 1e-12:
        raise NumericError(f"arcsine argument {r} outside [-1,1]")
    r = min(1.0, max(-1.0, r))
    return (2.0 / math.pi) * math.asin(r)


# ---------------------------------------------------------------------------
# 1-D transfer machinery
# ---------------------------------------------------------------------------

def path_transfer_powers(N: int, Lmax: int) -> np.ndarray:
    """T^l for l = 0..Lmax where T is the path-graph adjacency on [-N, N].

    Entries count l-step +-1 walks staying in the interval; exact in float64
    for l up to ~1000 (values are sums of nonnegative terms).
    """
    side = 2 * N + 1
    T = np.zeros((side, side))
    for i in range(side - 1):
        T[i, i + 1] = T[i + 1, i] = 1.0
    out = np.empty((Lmax + 1, side, side))
    out[0] = np.eye(side)
    for l in range(1, Lmax + 1):
        out[l] = out[l - 1] @ T
    return out


def _log_path_traces(N: int, Lmax: int) -> np.ndarray:
    """log trace(T^l) for l = 0..Lmax via the closed-form path spectrum."""
    side = 2 * N + 1
    theta = np.pi * np.arange(1, side + 1) / (side + 1)
    lam = 2.0 * np.cos(theta)
    out = np.full(Lmax + 1, -np.inf)
    ls = np.arange(0, Lmax + 1, 2)
    with np.errstate(divide="ignore"):
        loglam = np.log(np.abs(lam))
    # odd powers cancel exactly (spectrum symmetric); even powers all positive
    for l in ls:
        out[l] = logsumexp(l * loglam)
    return out


def _log_convolve(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Log-space polynomial product truncated to len(a)."""
    n = len(a)
    out = np.full(n, -np.inf)
    for m in range(n):
        terms = a[: m + 1] + b[m::-1]
        finite = terms[np.isfinite(terms)]
        if finite.size:
            out[m] = logsumexp(finite)
    return out


@dataclass
class LoopIntensityTable:
    """Per-root-per-length Poisson means of the rooted loop soup.

    lambda(x, L) = alpha * p_L(x,x) / L for even L in [2, Lmax]; the mass of
    longer loops is certified by ``tail_mass`` (a guaranteed upper bound on
    sum_x sum_{L>Lmax} lambda computed from the exact box spectral radius).
    """

    box: BoxConfig
    Lmax: int
    alpha: float = ALPHA_CRITICAL
    tail_threshold: float = 1e-2
    # derived, filled by loop_intensity
    T_powers: np.ndarray = field(default=None, repr=False)
    log_u: np.ndarray = field(default=None, repr=False)
    log_Upow: np.ndarray = field(default=None, repr=False)  # (d+1, Lmax+1)
    log_mass_by_L: np.ndarray = field(default=None, repr=False)
    tail_mass: float = 0.0
    tail_mass_per_vertex: float = 0.0

    # -- scalar queries ----------------------------------------------------
    def total_mass(self) -> float:
        """Sum over roots and lengths of lambda; mean loop count of the soup."""
        return float(np.exp(self.log_mass_by_L[2:]).sum())

    def mass_of_length(self, L: int) -> float:
        if L < 2 or L > self.Lmax:
            return 0.0
        return float(np.exp(self.log_mass_by_L[L]))

    def return_prob(self, x, L: int) -> float:
        """Exact p_L(x,x) for a single vertex via d small convolutions."""
        if L == 0:
            return 1.0
        if L % 2 or L > self.Lmax:
            return 0.0
        d, N = self.box.d, self.box.N
        diag = self.T_powers[: L + 1, :, :].diagonal(axis1=1, axis2=2)  # (L+1, side)
        lg = np.arange(L + 1)
        poly = None
        for k in range(d):
            c = x[k] + N
            with np.errstate(divide="ignore"):
                w = np.log(diag[:, c]) - _lgamma(lg)
            poly = w if poly is None else _log_convolve(poly, w)
        logp = _lgamma(np.array([L]))[0] - L * math.log(2 * d) + poly[L]
        return float(np.exp(logp))

    def lam(self, x, L: int) -> float:
        if L % 2 or L < 2:
            return 0.0
        return self.alpha * self.return_prob(x, L) / L

    def lam_array(self, L: int) -> np.ndarray:
        """lambda(., L) over all vertices (guarded dense materialisation).

        The coordinate fold runs in log space; coefficients are nonnegative
        so the only error source is logsumexp rounding.
        """
        n = self.box.n_vertices
        if n * (L + 1) * 8 > 1 << 31:
            raise ResourceError(
                f"dense intensity column too large (|Lambda|={n}, Lmax={self.Lmax})"
            )
        if L % 2 or L < 2 or L > self.Lmax:
            return np.zeros(n)
        d, side = self.box.d, self.box.side
        diag = self.T_powers[: L + 1, :, :].diagonal(axis1=1, axis2=2)
        lg = _lgamma(np.arange(L + 1))
        with np.errstate(divide="ignore"):
            logW = np.log(diag) - lg[:, None]  # (L+1, side)
        acc = logW.copy()
        for _ in range(1, d):
            new = np.full((L + 1, acc.shape[1] * side), -np.inf)
            for m in range(L + 1):
                stack = (acc[m::-1, :, None] + logW[: m + 1, None, :]).reshape(m + 1, -1)
                new[m] = logsumexp(stack, axis=0)
            acc = new
        logpL = acc[L] + _lgamma(np.array([L]))[0] - L * math.log(2 * d)
        return self.alpha * np.exp(logpL) / L

    def to_binary(self, path_prefix: str) -> None:
        """Dump dense lambda table as raw float64 + JSON header."""
        import json

        n_L = [self.mass_of_length(L) for L in range(self.Lmax + 1)]
        cols = [self.lam_array(L) for L in range(2, self.Lmax + 1, 2)]
        arr = np.stack(cols, axis=0)
        arr.tofile(path_prefix + ".bin")
        hdr = {
            "dims": self.box.d,
            "N": self.box.N,
            "Lmax": self.Lmax,
            "alpha": self.alpha,
            "shape": list(arr.shape),
            "lengths": list(range(2, self.Lmax + 1, 2)),
            "mass_by_length": n_L,
            "tail_mass": self.tail_mass,
        }
        with open(path_prefix + ".json", "w") as fh:
            json.dump(hdr, fh, sort_keys=True)


def _lgamma(arr: np.ndarray) -> np.ndarray:
    from scipy.special import gammaln

    return gammaln(np.asarray(arr, dtype=float) + 1.0)


_EIGEN_ENUM_LIMIT = 1 << 21  # enumerate box spectrum exactly up to ~2M vertices


def box_eigenvalues(box: BoxConfig) -> np.ndarray:
    """All eigenvalues of the killed transition matrix P (product spectrum)."""
    if box.n_vertices > _EIGEN_ENUM_LIMIT:
        raise ResourceError(f"spectrum enumeration too large (|Lambda|={box.n_vertices})")
    theta = np.pi * np.arange(1, box.side + 1) / (box.side + 1)
    lam1 = np.cos(theta)
    acc = lam1
    for _ in range(1, box.d):
        acc = (acc[:, None] + lam1[None, :]).reshape(-1)
    return acc / box.d


def _certified_tail(box: BoxConfig, Lmax: int, alpha: float, abs_mu=None):
    """Guaranteed upper bound on sum_x sum_{L>Lmax} lambda(x,L).

    Uses the exact product spectrum when it is small enough to enumerate,
    otherwise the spectral-radius bound p_L(x,x) <= rho^L.  Returns
    (total, per_vertex) bounds.
    """
    if box.N == 0:
        return 0.0, 0.0
    rho = math.cos(math.pi / (2 * box.N + 2))
    per_vertex = alpha * rho ** (Lmax + 2) / ((Lmax + 2) * (1.0 - rho * rho))
    if abs_mu is None and box.n_vertices <= _EIGEN_ENUM_LIMIT:
        abs_mu = np.abs(box_eigenvalues(box))
    if abs_mu is not None:
        total = alpha / (Lmax + 2) * float((abs_mu ** (Lmax + 2) / (1.0 - abs_mu**2)).sum())
        total = min(total, per_vertex * box.n_vertices)
    else:
        total = per_vertex * box.n_vertices
    return total, per_vertex


def loop_intensity(box: BoxConfig, Lmax: int, alpha: float = ALPHA_CRITICAL,
                   tail_threshold: float = 1e-2) -> LoopIntensityTable:
    """Build the exact per-(root,length) intensity table for L <= Lmax."""
    if Lmax < 2 or Lmax % 2:
        raise DomainError(f"Lmax must be even and >= 2, got {Lmax}")
    if Lmax > 1000:
        raise ResourceError(f"transfer powers overflow float64 beyond L~1000 (Lmax={Lmax})")
    d, N = box.d, box.N
    tab = LoopIntensityTable(box=box, Lmax=Lmax, alpha=alpha, tail_threshold=tail_threshold)
    tab.T_powers = path_transfer_powers(N, Lmax)

    logq = _log_path_traces(N, Lmax)
    ls = np.arange(Lmax + 1)
    tab.log_u = logq - _lgamma(ls) - ls * math.log(2 * d)
    # powers of the EGF: log_Upow[k] are the log-coefficients of U(z)^k
    tab.log_Upow = np.full((d + 1, Lmax + 1), -np.inf)
    tab.log_Upow[0, 0] = 0.0
    for k in range(1, d + 1):
        tab.log_Upow[k] = _log_convolve(tab.log_Upow[k - 1], tab.log_u)

    # per-length soup masses: Lambda_L = alpha * L! [z^L] U^d / L
    tab.log_mass_by_L = np.full(Lmax + 1, -np.inf)
    for L in range(2, Lmax + 1, 2):
        tab.log_mass_by_L[L] = (math.log(alpha) + _lgamma(np.array([L]))[0]
                                + tab.log_Upow[d, L] - math.log(L))

    tab.tail_mass, tab.tail_mass_per_vertex = _certified_tail(box, Lmax, alpha)
    return tab


def suggest_Lmax(box: BoxConfig, tail_threshold: float = 1e-2) -> int:
    """Smallest even Lmax whose certified tail bound is below the threshold."""
    if box.N == 0:
        return 2
    abs_mu = None
    if box.n_vertices <= _EIGEN_ENUM_LIMIT:
        abs_mu = np.abs(box_eigenvalues(box))
    for Lmax in range(2, 1001, 2):
        total, _ = _certified_tail(box, Lmax, ALPHA_CRITICAL, abs_mu=abs_mu)
        if total <= tail_threshold:
            return Lmax
    raise ResourceError(f"no Lmax <= 1000 reaches tail threshold {tail_threshold} "
                        f"(|Lambda|={box.n_vertices})")


def mass_large_loops(box: BoxConfig, diam_cutoff: float, replicas: int = 200,
                     seed: int = 0, Lmax: int | None = None):
    """Monte Carlo estimate (mean, stderr) of the soup mass of loops with
    L-infinity diameter >= diam_cutoff."""
    if diam_cutoff < 1:
        raise DomainError("diam_cutoff must be >= 1")
    from .soup import sample_large_loops

    counts = np.empty(replicas)
    for r in range(replicas):
        s = sample_large_loops(box, diam_cutoff, seed=seed + r, Lmax=Lmax)
        counts[r] = s.n_loops
    mean = float(counts.mean())
    stderr = float(counts.std(ddof=1) / math.sqrt(replicas)) if replicas > 1 else 0.0
    return mean, stderr
