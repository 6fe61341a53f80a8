"""Secondary-control communication graphs and consensus diagnostics.

The defender's action set is the list of labelled spanning trees over the
DGs (all pinned at the same leader). Helpers here build Laplacians, compute
the eigenvalue that bounds the consensus gain, enumerate trees in a stable
order, and evaluate the consensus update rates and the Lyapunov diagnostic.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import numpy as np

from .dynamics import ConfigError


class InvalidTopology(ValueError):
    """Adjacency matrix or pinning vector that cannot drive consensus."""


class NumericalError(ArithmeticError):
    pass


def _as_adjacency(S) -> np.ndarray:
    S = np.asarray(S, dtype=float)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise InvalidTopology(f"adjacency must be square, got shape {S.shape}")
    return S


def build_laplacian(S) -> np.ndarray:
    """Graph Laplacian ``D - S`` of a symmetric adjacency matrix."""
    S = _as_adjacency(S)
    if not np.array_equal(S, S.T):
        raise InvalidTopology("adjacency matrix is not symmetric")
    if np.any(np.diag(S) != 0):
        raise InvalidTopology("adjacency matrix has self-loops")
    return np.diag(S.sum(axis=1)) - S


def lambda2(L, G) -> float:
    """Smallest eigenvalue of ``L + G``.

    With at least one pinned node in a connected graph this is strictly
    positive; it is the quantity entering the consensus gain bound.
    """
    M = np.asarray(L, dtype=float) + np.asarray(G, dtype=float)
    if not np.allclose(M, M.T, atol=0.0):
        raise InvalidTopology("L + G is not symmetric")
    try:
        w, v = np.linalg.eigh(M)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"eigensolver failed: {exc}") from exc
    res = np.linalg.norm(M @ v[:, 0] - w[0] * v[:, 0])
    if not res < 1e-9:
        raise NumericalError(f"eigenpair residual {res:.3e} too large")
    return float(w[0])


def is_connected(S) -> bool:
    S = _as_adjacency(S)
    n = S.shape[0]
    if n == 0:
        return False
    seen = {0}
    stack = [0]
    while stack:
        k = stack.pop()
        for l in np.flatnonzero(S[k]):
            if l not in seen:
                seen.add(int(l))
                stack.append(int(l))
    return len(seen) == n


def validate_topology(S, G) -> bool:
    """True iff the graph is connected, symmetric and has a pinned node."""
    S = np.asarray(S, dtype=float)
    G = np.asarray(G, dtype=float)
    if S.ndim != 2 or S.shape[0] != S.shape[1] or S.shape[0] < 1:
        return False
    if not np.array_equal(S, S.T) or np.any(np.diag(S) != 0):
        return False
    g = np.diag(G) if G.ndim == 2 else G
    if g.shape != (S.shape[0],) or np.any(g < 0) or not np.any(g > 0):
        return False
    return is_connected(S)


@dataclass(frozen=True)
class CommTopology:
    """One secondary-control communication graph of the defender's action set."""

    id: int
    edges: tuple
    n: int
    pinning: tuple
    S: np.ndarray = field(compare=False, repr=False)
    G: np.ndarray = field(compare=False, repr=False)
    L: np.ndarray = field(compare=False, repr=False)
    lambda2: float = field(compare=False)

    @classmethod
    def from_edges(cls, id, edges, n, pinning):
        S = np.zeros((n, n))
        for a, b in edges:
            S[a, b] = S[b, a] = 1.0
        G = np.diag(np.asarray(pinning, dtype=float))
        L = build_laplacian(S)
        return cls(id=id, edges=tuple(tuple(e) for e in edges), n=n,
                   pinning=tuple(float(x) for x in pinning), S=S, G=G, L=L,
                   lambda2=lambda2(L, G))

    @property
    def n_links(self) -> int:
        """Directed links in use (each undirected edge is a pair of links)."""
        return 2 * len(self.edges)

    def degree(self, k) -> int:
        return int(self.S[k].sum())

    def to_dict(self) -> dict:
        return {"id": self.id, "edges": [list(e) for e in self.edges],
                "lambda2": self.lambda2, "K_min": min_consensus_gain(self)}


def min_consensus_gain(topology: CommTopology) -> float:
    """Lower bound ``1 / (2 lambda2)`` on ``K1 = K2``."""
    lam = topology.lambda2
    if not lam > 1e-12:
        raise InvalidTopology(f"lambda2 = {lam:.3e}: graph disconnected or unpinned")
    return 1.0 / (2.0 * lam)


def enumerate_topologies(N, pinning=None):
    """All labelled spanning trees on ``N`` nodes, pinned at DG1 by default.

    Trees are produced in lexicographic order of their sorted edge lists, so
    the index of each tree is stable and can serve as an action id.
    """
    if not (isinstance(N, (int, np.integer)) and 2 <= N <= 8):
        raise ConfigError(f"N must be an integer in [2, 8], got {N!r}")
    if pinning is None:
        pinning = [1.0] + [0.0] * (N - 1)
    pinning = list(pinning)
    if len(pinning) != N:
        raise ConfigError("pinning vector length does not match N")
    all_edges = list(itertools.combinations(range(N), 2))
    out = []
    # Cayley's formula keeps this tractable up to N = 8 (262 144 trees),
    # but edge-subset search is C(28, 7); use Pruefer sequences instead.
    trees = sorted(tuple(sorted(t)) for t in _pruefer_trees(N))
    for tid, edges in enumerate(trees):
        out.append(CommTopology.from_edges(tid, edges, N, pinning))
    assert all(e in all_edges for t in trees for e in t)
    return out


def _pruefer_trees(N):
    if N == 2:
        yield ((0, 1),)
        return
    for seq in itertools.product(range(N), repeat=N - 2):
        degree = [1] * N
        for x in seq:
            degree[x] += 1
        edges = []
        for x in seq:
            leaf = min(i for i in range(N) if degree[i] == 1)
            edges.append((min(leaf, x), max(leaf, x)))
            degree[leaf] -= 1
            degree[x] -= 1
        u, v = (i for i in range(N) if degree[i] == 1)
        edges.append((u, v))
        yield tuple(edges)


def topologies_to_json(topologies, path=None) -> str:
    text = json.dumps({"topologies": [t.to_dict() for t in topologies]}, indent=2)
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text + "\n")
    return text


def design_consensus_gain(topologies, margin=4.0) -> float:
    """Common ``K1 = K2`` satisfying the gain bound for every topology in the set.

    The gain has to hold across topology switches, so it is sized on the
    worst (largest) lower bound of the set.
    """
    if not margin >= 1.0:
        raise ConfigError("gain margin must be >= 1")
    return margin * max(min_consensus_gain(t) for t in topologies)


def consensus_rates(k, received, own, S, G, K1, K2, omega_n):
    """Secondary-control rates ``(d delta_omega / dt, d delta_v / dt)`` of DG ``k``.

    ``received[l]`` is the ``(omega, m_P*P, n_Q*Q)`` tuple DG ``k`` got from
    DG ``l`` (possibly tampered); ``own`` is DG ``k``'s own tuple.
    """
    received = np.asarray(received, dtype=float)
    S = np.asarray(S, dtype=float)
    g = np.diag(G) if np.ndim(G) == 2 else np.asarray(G, dtype=float)
    w_k, p_k, q_k = (float(x) for x in own)
    s_w = s_v = 0.0
    for l in range(S.shape[1]):
        s = S[k, l]
        if l == k or s == 0.0:
            continue
        s_w += s * (received[l, 0] - w_k) + s * (received[l, 1] - p_k)
        s_v += s * (received[l, 2] - q_k)
    return K1 * (s_w + g[k] * (omega_n - w_k)), K2 * s_v


@dataclass
class ConvergenceReport:
    max_freq_dev: float
    max_p_mismatch: float
    max_q_mismatch: float
    y: np.ndarray
    V: np.ndarray
    V_dot: np.ndarray

    @property
    def non_increasing(self) -> bool:
        return bool(np.all(np.diff(self.V) <= 1e-6))


def lyapunov_value(y) -> float:
    """``0.5 * sum(y_k^2)``."""
    y = np.asarray(y, dtype=float)
    return 0.5 * float(np.sum(y * y))


def lyapunov_diagnostic(t, omega, mpP, nqQ, omega_n, delta_omega=None,
                        y_ref=None) -> ConvergenceReport:
    """Numerical Lyapunov and objective check over a trajectory window.

    ``omega``, ``mpP`` and ``nqQ`` are ``(T, N)`` samples at times ``t``.
    The consensus state is ``y_k = omega_k + m_P P_k`` (equivalently
    ``omega_n + delta_omega_k``). ``V`` is taken in error coordinates,
    ``y - y_ref``, where ``y_ref`` defaults to the last sample of the window
    and should be the settled equilibrium.
    """
    t = np.asarray(t, dtype=float)
    omega = np.atleast_2d(np.asarray(omega, dtype=float))
    mpP = np.atleast_2d(np.asarray(mpP, dtype=float))
    nqQ = np.atleast_2d(np.asarray(nqQ, dtype=float))
    if t.shape[0] < 2 or omega.shape[0] != t.shape[0]:
        raise ValueError("window needs at least two samples with matching times")
    if delta_omega is None:
        Y = omega + mpP
    else:
        Y = omega_n + np.atleast_2d(np.asarray(delta_omega, dtype=float))
    ref = Y[-1] if y_ref is None else np.asarray(y_ref, dtype=float)
    e = Y - ref
    V = 0.5 * np.sum(e * e, axis=1)
    V_dot = np.gradient(V, t)
    err = omega - omega_n
    y = Y[-1]
    return ConvergenceReport(
        max_freq_dev=float(np.max(np.abs(err[-1]))),
        max_p_mismatch=float(np.ptp(mpP[-1])),
        max_q_mismatch=float(np.ptp(nqQ[-1])),
        y=y,
        V=V,
        V_dot=V_dot,
    )
