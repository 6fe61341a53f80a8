"""Independent reference implementations used to check the library.

Nothing here imports the code under test beyond plain data types, so a bug
in the library cannot hide behind a shared helper.
"""
from __future__ import annotations

import itertools

import numpy as np


def brute_force_spanning_trees(n):
    """Every (n-1)-edge subset of K_n that connects all nodes, as sorted edge tuples."""
    edges = list(itertools.combinations(range(n), 2))
    out = []
    for subset in itertools.combinations(edges, n - 1):
        parent = list(range(n))

        def find(a):
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        ok = True
        for a, b in subset:
            ra, rb = find(a), find(b)
            if ra == rb:
                ok = False
                break
            parent[ra] = rb
        if ok:
            out.append(tuple(sorted(subset)))
    return sorted(out)


def dense_laplacian(edges, n):
    L = np.zeros((n, n))
    for a, b in edges:
        L[a, a] += 1
        L[b, b] += 1
        L[a, b] -= 1
        L[b, a] -= 1
    return L


def smallest_eig_power(M, iters=20000):
    """Smallest eigenvalue of a symmetric PSD matrix by shifted power iteration."""
    M = np.asarray(M, dtype=float)
    shift = np.abs(M).sum(axis=1).max() + 1.0
    A = shift * np.eye(M.shape[0]) - M
    v = np.arange(1.0, M.shape[0] + 1.0)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = A @ v
        lam_new = float(v @ w)
        v = w / np.linalg.norm(w)
        if abs(lam_new - lam) < 1e-15 * max(1.0, abs(lam_new)):
            break
        lam = lam_new
    return shift - lam


def mlp_forward(layers, acts, x):
    h = np.asarray(x, dtype=float)
    for (W, b), a in zip(layers, acts):
        h = h @ W + b
        if a == "relu":
            h = np.maximum(h, 0.0)
    return h


def finite_difference_grads(layers, acts, x, grad_out, eps=1e-6):
    """Central differences of ``sum(grad_out * f(x))`` w.r.t. every parameter."""
    layers = [(W.copy(), b.copy()) for W, b in layers]
    out = []
    for i, (W, b) in enumerate(layers):
        gs = []
        for P in (W, b):
            G = np.zeros_like(P)
            it = np.nditer(P, flags=["multi_index"])
            for _ in it:
                idx = it.multi_index
                orig = P[idx]
                P[idx] = orig + eps
                fp = float(np.sum(grad_out * mlp_forward(layers, acts, x)))
                P[idx] = orig - eps
                fm = float(np.sum(grad_out * mlp_forward(layers, acts, x)))
                P[idx] = orig
                G[idx] = (fp - fm) / (2 * eps)
            gs.append(G)
        out.append(tuple(gs))
    return out


def tabular_q_iteration(states, actions, reward, step, gamma, sweeps=3000):
    """Plain synchronous Bellman optimality iteration over an explicit table."""
    Q = {s: np.zeros(len(actions)) for s in states}
    for _ in range(sweeps):
        Q = {s: np.array([reward(s, a) + gamma * Q[step(s, a)].max() for a in actions])
             for s in states}
    return Q


def surrogate_reward(topology_edges, theta, current, action, switch_cost):
    """Reduced-game reward written from the definition: exposed compromised links."""
    exposed = 0
    for a, b in topology_edges[action]:
        exposed += int(theta[a]) + int(theta[b])
    return -float(exposed) - (switch_cost if action != current else 0.0)


def rk4_step(f, y, dt):
    k1 = f(y)
    k2 = f(y + 0.5 * dt * k1)
    k3 = f(y + 0.5 * dt * k2)
    k4 = f(y + dt * k3)
    return y + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
