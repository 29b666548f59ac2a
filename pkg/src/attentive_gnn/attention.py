"""Node self-attention, sparse neighbour attention and layer memory.

The forward pass for one task graph is::

    C^x = softmax(cos(X, X))        C^y = softmax(Y Y^T)
    C^f = w1 C^x + w2 C^y
    X~  = C^f X                     Y1 = alpha Y + (1 - alpha) C^f Y
    H   = [X~, Y1]
    for each layer k:
        U   = rowsoftmax_offdiag(MLP_k(|h_i - h_j|))
        A   = top-ceil(beta V) magnitude entries of each row of U
        F   = leaky_relu([A H, H] W_k)
        H   = memory(H, F, Y1)
    logits = H[queries] R + r
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .autodiff import (
    Tensor,
    add,
    concat_features,
    leaky_relu,
    mask_entries,
    matmul,
    normalized_gram,
    pairwise_absdiff,
    reshape,
    row_normalize,
    row_softmax,
    scale,
    take_cols,
    take_rows,
    transpose,
)

MEMORY_MODES = ("dense", "label_concat", "none")
QUERY_INITS = ("uniform", "zero")
NORM_EPS = 1e-12


@dataclass(frozen=True)
class AttentionConfig:
    """Hyper-parameters of the attentive GNN.

    ``mlp_widths=None`` selects ``(2*d_k, d_k, 1)`` for every layer, where
    ``d_k`` is that layer's input width. An explicit tuple is used as-is for
    every layer and must end in 1. ``self_attention=False`` skips the node
    self-attention stage and feeds ``[X, Y]`` straight into the first layer.
    """

    alpha: float = 0.5
    beta: float = 0.7
    layers: int = 3
    hidden_m: int = 16
    mlp_widths: Optional[tuple[int, ...]] = None
    memory_mode: str = "dense"
    query_init: str = "uniform"
    leaky_slope: float = 0.2
    row_renormalize_adjacency: bool = False
    normalize_fusion: bool = False
    self_attention: bool = True

    def __post_init__(self):
        if self.mlp_widths is not None:
            object.__setattr__(self, "mlp_widths", tuple(int(w) for w in self.mlp_widths))
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not 0.0 < self.beta <= 1.0:
            raise ValueError(f"beta must lie in (0, 1], got {self.beta}")
        if self.layers < 1:
            raise ValueError(f"layers must be >= 1, got {self.layers}")
        if self.hidden_m < 1:
            raise ValueError(f"hidden_m must be >= 1, got {self.hidden_m}")
        if self.mlp_widths is not None:
            if len(self.mlp_widths) == 0 or self.mlp_widths[-1] != 1:
                raise ValueError(f"mlp_widths must be non-empty and end in 1, got {self.mlp_widths}")
            if min(self.mlp_widths) < 1:
                raise ValueError(f"mlp_widths must be positive, got {self.mlp_widths}")
        if self.memory_mode not in MEMORY_MODES:
            raise ValueError(f"memory_mode must be one of {MEMORY_MODES}, got {self.memory_mode!r}")
        if self.query_init not in QUERY_INITS:
            raise ValueError(f"query_init must be one of {QUERY_INITS}, got {self.query_init!r}")
        if not 0.0 < self.leaky_slope < 1.0:
            raise ValueError(f"leaky_slope must lie in (0, 1), got {self.leaky_slope}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mlp_widths"] = None if self.mlp_widths is None else list(self.mlp_widths)
        return d

    def widths_for(self, d_k: int) -> tuple[int, ...]:
        if self.mlp_widths is not None:
            return self.mlp_widths
        return (2 * d_k, d_k, 1)


def layer_input_dims(cfg: AttentionConfig, d: int, n_way: int) -> list[int]:
    """Feature widths ``[d_1, ..., d_{K+1}]`` seen by each layer and the readout."""
    dims = [d + n_way]
    for _ in range(cfg.layers):
        if cfg.memory_mode == "dense":
            dims.append(dims[-1] + cfg.hidden_m)
        elif cfg.memory_mode == "label_concat":
            dims.append(cfg.hidden_m + n_way)
        else:
            dims.append(cfg.hidden_m)
    return dims


@dataclass
class LayerParams:
    mlp_weights: list[Tensor]
    mlp_biases: list[Tensor]
    W: Tensor


@dataclass
class ModelParams:
    """All trainable tensors, with a stable naming order for optimisers and checkpoints."""

    fusion_w1: Tensor
    fusion_w2: Tensor
    layers: list[LayerParams] = field(default_factory=list)
    readout_w: Optional[Tensor] = None
    readout_b: Optional[Tensor] = None

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        out = [("fusion.w1", self.fusion_w1), ("fusion.w2", self.fusion_w2)]
        for k, lp in enumerate(self.layers, start=1):
            for i, (w, b) in enumerate(zip(lp.mlp_weights, lp.mlp_biases)):
                out.append((f"layer{k}.mlp{i}.weight", w))
                out.append((f"layer{k}.mlp{i}.bias", b))
            out.append((f"layer{k}.W", lp.W))
        out.append(("readout.weight", self.readout_w))
        out.append(("readout.bias", self.readout_b))
        return out

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named_tensors()]

    def zero_grad(self) -> None:
        for t in self.tensors():
            t.zero_grad()

    def copy(self) -> "ModelParams":
        def c(t: Tensor) -> Tensor:
            return Tensor(t.data.copy(), trainable=True)

        return ModelParams(
            fusion_w1=c(self.fusion_w1),
            fusion_w2=c(self.fusion_w2),
            layers=[LayerParams([c(w) for w in lp.mlp_weights], [c(b) for b in lp.mlp_biases], c(lp.W))
                    for lp in self.layers],
            readout_w=c(self.readout_w),
            readout_b=c(self.readout_b),
        )


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> Tensor:
    s = fan_in ** -0.5
    return Tensor(rng.uniform(-s, s, size=shape), trainable=True)


def init_params(cfg: AttentionConfig, d: int, n_way: int, rng: np.random.Generator) -> ModelParams:
    """Fusion weights start at 0.5; everything else is uniform in ``+-fan_in**-0.5``."""
    dims = layer_input_dims(cfg, d, n_way)
    layers = []
    for d_k in dims[:-1]:
        weights, biases = [], []
        fan_in = d_k
        for width in cfg.widths_for(d_k):
            weights.append(_uniform(rng, fan_in, (fan_in, width)))
            biases.append(_uniform(rng, fan_in, (1, width)))
            fan_in = width
        W = _uniform(rng, 2 * d_k, (2 * d_k, cfg.hidden_m))
        layers.append(LayerParams(weights, biases, W))
    return ModelParams(
        fusion_w1=Tensor([[0.5]], trainable=True),
        fusion_w2=Tensor([[0.5]], trainable=True),
        layers=layers,
        readout_w=_uniform(rng, dims[-1], (dims[-1], n_way)),
        readout_b=_uniform(rng, dims[-1], (1, n_way)),
    )


# ---------------------------------------------------------------------------
# node self-attention
# ---------------------------------------------------------------------------

def sample_correlation(X: Tensor) -> Tensor:
    """Row-softmax of cosine similarities over the complete graph."""
    if X.rows < 2:
        raise ValueError("sample correlation needs at least two nodes")
    return row_softmax(normalized_gram(X, NORM_EPS))


def label_correlation(Y: Tensor) -> Tensor:
    return row_softmax(matmul(Y, transpose(Y)))


def fusion_weights(params: ModelParams, normalize: bool = False) -> tuple[Tensor, Tensor]:
    if not normalize:
        return params.fusion_w1, params.fusion_w2
    sw = row_softmax(concat_features(params.fusion_w1, params.fusion_w2))
    return take_cols(sw, [0]), take_cols(sw, [1])


def fuse_attention(Cx: Tensor, Cy: Tensor, params: ModelParams, normalize: bool = False) -> Tensor:
    """``C^f = w1 C^x + w2 C^y`` with the two trainable fusion scalars."""
    if Cx.shape != Cy.shape:
        raise ValueError(f"correlation shapes differ: {Cx.shape} vs {Cy.shape}")
    w1, w2 = fusion_weights(params, normalize)
    return add(scale(Cx, w1), scale(Cy, w2))


def apply_node_self_attention(X: Tensor, Y: Tensor, alpha: float, params: ModelParams,
                              normalize_fusion: bool = False) -> tuple[Tensor, Tensor]:
    """Return the attended features ``C^f X`` and labels ``alpha Y + (1-alpha) C^f Y``."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    Cf = fuse_attention(sample_correlation(X), label_correlation(Y), params, normalize_fusion)
    X1 = matmul(Cf, X)
    if alpha == 1.0:
        return X1, Y
    Y1 = add(scale(Y, alpha), scale(matmul(Cf, Y), 1.0 - alpha))
    return X1, Y1


# ---------------------------------------------------------------------------
# neighbour attention
# ---------------------------------------------------------------------------

def _offdiag(v: int) -> np.ndarray:
    return ~np.eye(v, dtype=bool)


def raw_adjacency_scores(X: Tensor, mlp_weights: Sequence[Tensor], mlp_biases: Sequence[Tensor],
                         slope: float = 0.2) -> Tensor:
    """``MLP(|x_i - x_j|)`` for every node pair, with the diagonal set to zero."""
    v = X.rows
    h = pairwise_absdiff(X)
    last = len(mlp_weights) - 1
    for i, (w, b) in enumerate(zip(mlp_weights, mlp_biases)):
        h = add(matmul(h, w), b)
        if i < last:
            h = leaky_relu(h, slope)
    if h.cols != 1:
        raise ValueError(f"adjacency MLP must end in width 1, got {h.cols}")
    return mask_entries(reshape(h, v, v), _offdiag(v))


def adjacency_scores(X: Tensor, mlp_weights: Sequence[Tensor], mlp_biases: Sequence[Tensor],
                     slope: float = 0.2) -> Tensor:
    """Off-diagonal row-softmax of the pairwise MLP scores; the diagonal is 0."""
    if X.rows < 2:
        raise ValueError("adjacency scores need at least two nodes")
    raw = raw_adjacency_scores(X, mlp_weights, mlp_biases, slope)
    return row_softmax(raw, mask=_offdiag(X.rows))


def topk_count(beta: float, v: int) -> int:
    # round() guards against 0.7*10 = 7.000000000000001 style float noise
    return max(1, min(v, math.ceil(round(beta * v, 9))))


def topk_mask(values: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of the ``k`` largest-magnitude entries per row; ties go to the lower column."""
    order = np.argsort(-np.abs(values), axis=1, kind="stable")
    mask = np.zeros(values.shape, dtype=bool)
    np.put_along_axis(mask, order[:, :k], True, axis=1)
    return mask


def sparsify_topk(U: Tensor, beta: float, renormalize: bool = False) -> Tensor:
    """Project each row of ``U`` onto the set of vectors with at most ``ceil(beta V)`` nonzeros."""
    if not 0.0 < beta <= 1.0:
        raise ValueError(f"beta must lie in (0, 1], got {beta}")
    k = topk_count(beta, U.cols)
    out = U if k >= U.cols else mask_entries(U, topk_mask(U.data, k))
    return row_normalize(out) if renormalize else out


# ---------------------------------------------------------------------------
# GNN layer and memory
# ---------------------------------------------------------------------------

def gnn_layer(X: Tensor, A_hat: Tensor, W: Tensor, slope: float = 0.2) -> Tensor:
    """``leaky_relu([A X, X] W)``: aggregated neighbours next to the self features."""
    if A_hat.shape != (X.rows, X.rows):
        raise ValueError(f"adjacency {A_hat.shape} does not match {X.rows} nodes")
    if W.rows != 2 * X.cols:
        raise ValueError(f"W has {W.rows} rows, expected 2*{X.cols}")
    return leaky_relu(matmul(concat_features(matmul(A_hat, X), X), W), slope)


def memory_update(X_k: Tensor, F_k: Tensor, Y1: Tensor, mode: str) -> Tensor:
    if mode == "dense":
        return concat_features(X_k, F_k)
    if mode == "label_concat":
        return concat_features(F_k, Y1)
    if mode == "none":
        return F_k
    raise ValueError(f"memory_mode must be one of {MEMORY_MODES}, got {mode!r}")


def initial_node_features(task, params: ModelParams, cfg: AttentionConfig) -> tuple[Tensor, Tensor]:
    """Return ``(X^(1), Y^(1))`` for a task, before any GNN layer."""
    X = Tensor(task.X)
    Y = Tensor(task.Y0)
    if cfg.self_attention:
        X1, Y1 = apply_node_self_attention(X, Y, cfg.alpha, params, cfg.normalize_fusion)
    else:
        X1, Y1 = X, Y
    return concat_features(X1, Y1), Y1


def model_forward(task, params: ModelParams, cfg: AttentionConfig, return_layers: bool = False):
    """Query logits (``Q x N``) for one task graph.

    With ``return_layers=True`` also return the node-feature matrices
    ``[X^(1), ..., X^(K+1)]`` as numpy arrays.
    """
    if len(params.layers) != cfg.layers:
        raise ValueError(f"params hold {len(params.layers)} layers, config expects {cfg.layers}")
    H, Y1 = initial_node_features(task, params, cfg)
    recorded = [H.data] if return_layers else None
    for lp in params.layers:
        if lp.mlp_weights[0].rows != H.cols:
            raise ValueError(f"layer expects width {lp.mlp_weights[0].rows}, features have {H.cols}")
        U = adjacency_scores(H, lp.mlp_weights, lp.mlp_biases, cfg.leaky_slope)
        A = sparsify_topk(U, cfg.beta, cfg.row_renormalize_adjacency)
        F = gnn_layer(H, A, lp.W, cfg.leaky_slope)
        H = memory_update(H, F, Y1, cfg.memory_mode)
        if return_layers:
            recorded.append(H.data)
    logits = add(matmul(take_rows(H, task.query_indices), params.readout_w), params.readout_b)
    if return_layers:
        return logits, recorded
    return logits
