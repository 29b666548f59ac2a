"""Over-smoothing diagnostics, parameter counts and feature export.

Two per-layer smoothing metrics are tracked. ``rank_projection_loss`` is
the distance from the node-feature matrix to its best rank-M approximation;
``consensus_distance`` is the distance to the matrix whose rows all equal
the mean row. Both are Frobenius norms and fall to zero as node features
collapse onto a low-dimensional subspace.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .attention import ModelParams

DEFAULT_EPSILON = 1e-2


def _as_array(X) -> np.ndarray:
    data = getattr(X, "data", X)
    a = np.asarray(data, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"expected a 2-D feature matrix, got shape {a.shape}")
    return a


def rank_projection_loss(X, M: int) -> float:
    """Residual norm after projecting onto the best rank-``M`` subspace: sqrt(sum_{i>M} s_i^2)."""
    a = _as_array(X)
    limit = min(a.shape)
    if not 1 <= M <= limit:
        raise ValueError(f"rank M must lie in [1, {limit}], got {M}")
    s = np.linalg.svd(a, compute_uv=False)
    return float(np.sqrt(np.sum(s[M:] ** 2)))


def consensus_distance(X) -> float:
    """Frobenius distance from ``X`` to the matrix whose rows all equal the mean row."""
    a = _as_array(X)
    return float(np.linalg.norm(a - a.mean(axis=0, keepdims=True)))


def numerical_rank(X, tol: float) -> int:
    s = np.linalg.svd(_as_array(X), compute_uv=False)
    return int(np.sum(s > tol))


@dataclass
class SmoothingProfile:
    rank_losses: list
    consensus: list
    epsilon: float
    rank: int
    smoothing_layer: Optional[int]
    theta: int
    dims: list

    def records(self) -> list[dict]:
        """One report line per layer; ``flagged`` marks rank loss below epsilon."""
        return [
            {"layer": k, "rank_loss": r, "consensus": c, "flagged": bool(r < self.epsilon)}
            for k, (r, c) in enumerate(zip(self.rank_losses, self.consensus))
        ]


def smoothing_profile(layer_features: Sequence, epsilon: float = DEFAULT_EPSILON, M: int = 5) -> SmoothingProfile:
    """Per-layer metrics plus the first epsilon-smoothing layer.

    ``theta`` is the feature width minus the numerical rank (singular values
    above ``epsilon``) at the smoothing layer, or at the last layer when no
    layer is smoothed.
    """
    if len(layer_features) == 0:
        raise ValueError("need at least one layer")
    if not epsilon > 0:
        raise ValueError(f"epsilon must be > 0, got {epsilon}")
    mats = [_as_array(x) for x in layer_features]
    losses = [rank_projection_loss(a, M) for a in mats]
    cons = [consensus_distance(a) for a in mats]
    smoothed = next((k for k, r in enumerate(losses) if r < epsilon), None)
    at = mats[-1] if smoothed is None else mats[smoothed]
    theta = at.shape[1] - numerical_rank(at, epsilon)
    return SmoothingProfile(losses, cons, epsilon, M, smoothed, theta, [a.shape[1] for a in mats])


def _mlp_count(weights, biases) -> int:
    return sum(w.data.size + b.data.size for w, b in zip(weights, biases))


def count_trainable_params(params: ModelParams, component: str = "total") -> int:
    """Number of scalar trainables in ``component``.

    Components are ``fusion``, ``readout``, ``total``, and for layer k
    (1-based) ``gnn_layer_k`` (W plus its adjacency MLP) and
    ``adjacency_mlp_k``.
    """
    if component == "fusion":
        return params.fusion_w1.data.size + params.fusion_w2.data.size
    if component == "readout":
        return params.readout_w.data.size + params.readout_b.data.size
    if component == "total":
        return (count_trainable_params(params, "fusion") + count_trainable_params(params, "readout")
                + sum(count_trainable_params(params, f"gnn_layer_{k}")
                      for k in range(1, len(params.layers) + 1)))
    for prefix in ("gnn_layer_", "adjacency_mlp_"):
        if component.startswith(prefix):
            try:
                k = int(component[len(prefix):])
            except ValueError:
                break
            if not 1 <= k <= len(params.layers):
                raise ValueError(f"layer index {k} outside 1..{len(params.layers)}")
            lp = params.layers[k - 1]
            mlp = _mlp_count(lp.mlp_weights, lp.mlp_biases)
            return mlp + lp.W.data.size if prefix == "gnn_layer_" else mlp
    raise ValueError(f"unknown component {component!r}")


def export_features(layer_features: Sequence, task, path) -> list[str]:
    """Write one CSV per layer (``layer_<k>.csv``) under directory ``path``.

    Columns: node index, split tag, true class position, then features.
    """
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create export directory {path}: {exc}") from exc
    support = set(np.asarray(task.support_indices).tolist())
    classes = np.asarray(task.node_classes)
    written = []
    for k, X in enumerate(layer_features):
        a = _as_array(X)
        fname = os.path.join(path, f"layer_{k}.csv")
        try:
            with open(fname, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["node", "split", "class"] + [f"f{j}" for j in range(a.shape[1])])
                for i, row in enumerate(a):
                    tag = "support" if i in support else "query"
                    w.writerow([i, tag, int(classes[i])] + [repr(float(v)) for v in row])
        except OSError as exc:
            raise OSError(f"cannot write {fname}: {exc}") from exc
        written.append(fname)
    return written
