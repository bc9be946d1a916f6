"""Independent reference implementations used as test oracles.

Written without reusing package internals: plain loops and numpy only.
"""
from __future__ import annotations

import itertools
import math
from collections import Counter
from fractions import Fraction

import numpy as np

FD_STEP = 1e-5


def fd_gradient(f, arrays, eps: float = FD_STEP) -> list[np.ndarray]:
    """Central finite differences of scalar ``f(*arrays)`` w.r.t. every array."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + eps
            hi = f(*arrays)
            a[i] = old - eps
            lo = f(*arrays)
            a[i] = old
            g[i] = (hi - lo) / (2 * eps)
        grads.append(g)
    return grads


def fd_entries(f, array: np.ndarray, index_list, eps: float = FD_STEP) -> np.ndarray:
    """Central differences for selected flat indices of one array."""
    out = np.zeros(len(index_list))
    flat = array.reshape(-1)
    for j, i in enumerate(index_list):
        old = flat[i]
        flat[i] = old + eps
        hi = f()
        flat[i] = old - eps
        lo = f()
        flat[i] = old
        out[j] = (hi - lo) / (2 * eps)
    return out


def rel_error(a, b, floor: float = 1e-8) -> float:
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


def chamfer_bruteforce(X, Y) -> float:
    """Mean over frames of both directed sums of squared NN distances, by loops."""
    total = 0.0
    for A, B in zip(X, Y):
        s = 0.0
        for a in A:
            s += min(sum((ai - bi) ** 2 for ai, bi in zip(a, b)) for b in B)
        for b in B:
            s += min(sum((ai - bi) ** 2 for ai, bi in zip(a, b)) for a in A)
        total += s
    return total / len(X)


def algorithm1(scores, preds, tau):
    """Literal k-sample detection: count scores above tau; strict majority gives
    the most frequent prediction (ties: larger summed score, then smaller id)."""
    k = len(scores)
    above = 0
    for s in scores:
        if s > tau:
            above += 1
    if not above > k / 2:
        return None
    counts = Counter(int(p) for p in preds)
    best = max(counts.values())
    tied = [p for p, c in counts.items() if c == best]
    if len(tied) == 1:
        return tied[0]
    mass = {p: sum(s for s, q in zip(scores, preds) if int(q) == p) for p in tied}
    top = max(mass.values())
    return min(p for p in tied if mass[p] == top)


def youden_bruteforce(known, unknown) -> tuple[float, float]:
    """(best J, largest threshold attaining it) over all midpoint thresholds."""
    vals = sorted(set(list(known) + list(unknown)))
    best_j, best_t = -math.inf, None
    for lo, hi in zip(vals, vals[1:]):
        t = (lo + hi) / 2
        tpr = Fraction(sum(1 for s in known if s > t), len(known))
        fpr = Fraction(sum(1 for s in unknown if s > t), len(unknown))
        j = tpr - fpr
        if j > best_j or (j == best_j and t > best_t):
            best_j, best_t = j, t
    return float(best_j), best_t


def youden_j(known, unknown, t) -> float:
    return float(np.mean(np.asarray(known) > t) - np.mean(np.asarray(unknown) > t))


def mixture_loglik_direct(mu, z) -> float:
    """log of (1/M) sum_i N(z; mu_i, I) by a direct sum of densities."""
    M, K = mu.shape
    dens = 0.0
    for m in mu:
        dens += (2 * math.pi) ** (-K / 2) * math.exp(-0.5 * float(((z - m) ** 2).sum()))
    return math.log(dens / M)


def macro_f1_loops(cm) -> float:
    cm = np.asarray(cm)
    n = cm.shape[0]
    f1 = 0.0
    for i in range(n):
        tp = cm[i, i]
        fp = cm[:, i].sum() - tp
        fn = cm[i, :].sum() - tp
        d = 2 * tp + fp + fn
        f1 += 0.0 if d == 0 else 2 * tp / d
    return f1 / n


def all_patterns(k: int, alphabet=(1, 2, 3)):
    """Every above/below mask and every prediction assignment over ``alphabet``."""
    for mask in itertools.product((False, True), repeat=k):
        for preds in itertools.product(alphabet, repeat=k):
            yield mask, preds
