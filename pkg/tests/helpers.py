"""Shared test oracles: finite differences, rigid motions, brute-force
clustering and ranking references. These stay independent of the library
code paths they are used to check.
"""

from __future__ import annotations

import numpy as np

from conglude.numcore import Tensor


def finite_difference_grads(fn, params: dict[str, Tensor], h: float = 1e-5) -> dict[str, np.ndarray]:
    """Central-difference gradient of scalar ``fn()`` w.r.t. each tensor.

    ``fn`` must recompute the loss from the tensors' current ``.data``.
    """
    grads = {}
    for name, p in params.items():
        g = np.zeros_like(p.data)
        flat = p.data.ravel()
        gflat = g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(fn().data)
            flat[i] = orig - h
            down = float(fn().data)
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * h)
        grads[name] = g
    return grads


def analytic_grads(fn, params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    """Run the tape once and collect per-parameter gradients (zeros if absent)."""
    for p in params.values():
        p.zero_grad()
    loss = fn()
    loss.backward()
    return {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }


def max_rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """max |a-b| / max(1, |a|, |b|), elementwise."""
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
    return float(np.max(np.abs(a - b) / denom))


def assert_gradcheck(fn, params: dict[str, Tensor], h: float = 1e-5, tol: float = 1e-4) -> None:
    ana = analytic_grads(fn, params)
    num = finite_difference_grads(fn, params, h=h)
    for name in params:
        err = max_rel_error(ana[name], num[name])
        assert err < tol, f"gradcheck failed for {name}: rel err {err:.3e}"


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform-ish random proper rotation via QR of a Gaussian matrix."""
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1.0
    return q


def random_rigid_motion(rng: np.random.Generator, translation_scale: float = 20.0):
    rot = random_rotation(rng)
    shift = rng.normal(scale=translation_scale, size=3)
    return rot, shift


def eps_components_oracle(points: np.ndarray, eps: float) -> list[int]:
    """Brute-force transitive closure of the <=eps neighborhood relation.

    Returns per-point component labels, numbered by first appearance.
    """
    n = len(points)
    adj = np.linalg.norm(points[:, None, :] - points[None, :, :], axis=-1) <= eps
    labels = [-1] * n
    current = 0
    for start in range(n):
        if labels[start] != -1:
            continue
        frontier = [start]
        labels[start] = current
        while frontier:
            i = frontier.pop()
            for j in range(n):
                if adj[i, j] and labels[j] == -1:
                    labels[j] = current
                    frontier.append(j)
        current += 1
    return labels


def auroc_pairwise_oracle(scores, labels) -> float:
    """Count concordant positive/negative pairs; ties count one half."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=int)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    total = 0.0
    for sp in pos:
        for sn in neg:
            if sp > sn:
                total += 1.0
            elif sp == sn:
                total += 0.5
    return total / (len(pos) * len(neg))


def bedroc_definition_oracle(scores, labels, ids, alpha: float) -> float:
    """Exponential rank-sum definition, min-max normalized by explicit
    enumeration of the best and worst possible rank assignments.
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=int)
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], ids[i]))
    n = len(scores)
    n_act = int(labels.sum())
    observed = 0.0
    for rank0, idx in enumerate(order):
        if labels[idx] == 1:
            observed += np.exp(-alpha * (rank0 + 1) / n)
    best = sum(np.exp(-alpha * r / n) for r in range(1, n_act + 1))
    worst = sum(np.exp(-alpha * r / n) for r in range(n - n_act + 1, n + 1))
    return (observed - worst) / (best - worst)
