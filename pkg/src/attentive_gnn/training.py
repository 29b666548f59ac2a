"""Episodic training, evaluation and checkpoint I/O."""

from __future__ import annotations

import base64
import binascii
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from .attention import AttentionConfig, LayerParams, ModelParams, init_params, model_forward
from .autodiff import Tensor, backward, nll_log_softmax, scale
from .episodes import QUERY_DISTS, SETTINGS, FeatureDataset, TaskGraph, sample_task

CHECKPOINT_FORMAT = "attentive-gnn-checkpoint/1"

# independent PCG64 streams derived from the run seed
INIT_STREAM = 0
TRAIN_STREAM = 1
EVAL_STREAM = 2


class CheckpointError(ValueError):
    """Unreadable checkpoint, or one that does not fit the configured model."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 1e-6
    batch_tasks: int = 20
    total_episodes: int = 5000
    lr_halving_interval: int = 2000
    eval_interval: int = 500
    eval_episodes: int = 200
    seed: int = 0
    n_way: int = 5
    k_shot: int = 1
    q_query: int = 5
    setting: str = "transductive"
    query_dist: str = "uniform"

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        for name in ("batch_tasks", "total_episodes", "lr_halving_interval", "eval_interval",
                     "eval_episodes", "k_shot", "q_query"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.n_way < 2:
            raise ValueError(f"n_way must be >= 2, got {self.n_way}")
        if self.setting not in SETTINGS:
            raise ValueError(f"setting must be one of {SETTINGS}, got {self.setting!r}")
        if self.query_dist not in QUERY_DISTS:
            raise ValueError(f"query_dist must be one of {QUERY_DISTS}, got {self.query_dist!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    def lr_at(self, episode: int) -> float:
        return self.learning_rate * 0.5 ** (episode // self.lr_halving_interval)


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def query_cross_entropy(logits: Tensor, truth) -> Tensor:
    """Cross-entropy summed over the query rows of one task."""
    if logits.rows < 1:
        raise ValueError("need at least one query")
    return nll_log_softmax(logits, truth)


def adam_step(params: ModelParams, state: OptimizerState, lr: float, weight_decay: float = 0.0) -> None:
    """Bias-corrected Adam with decoupled weight decay, then clear gradients."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, t in params.named_tensors():
        g = t.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(t.data)
            state.v[name] = np.zeros_like(t.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if weight_decay:
            t.data *= 1.0 - lr * weight_decay
        t.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        t.zero_grad()


def frozen(params: ModelParams) -> ModelParams:
    """View of ``params`` as constants, so forward passes record no graph."""
    def c(t: Tensor) -> Tensor:
        return Tensor(t.data)

    return ModelParams(
        fusion_w1=c(params.fusion_w1),
        fusion_w2=c(params.fusion_w2),
        layers=[LayerParams([c(w) for w in lp.mlp_weights], [c(b) for b in lp.mlp_biases], c(lp.W))
                for lp in params.layers],
        readout_w=c(params.readout_w),
        readout_b=c(params.readout_b),
    )


def draw_task(ds: FeatureDataset, cfg: TrainConfig, acfg: AttentionConfig, rng) -> TaskGraph:
    return sample_task(ds, cfg.n_way, cfg.k_shot, cfg.q_query, cfg.setting, cfg.query_dist,
                       seed=rng, query_init=acfg.query_init)


def task_loss(task: TaskGraph, params: ModelParams, acfg: AttentionConfig) -> Tensor:
    return query_cross_entropy(model_forward(task, params, acfg), task.truth)


def evaluate(params: ModelParams, ds: FeatureDataset, cfg: TrainConfig, acfg: AttentionConfig,
             episodes: Optional[int] = None, seed: Optional[int] = None,
             forward: Callable = model_forward) -> tuple[float, Optional[float]]:
    """Mean query accuracy over sampled episodes and its 95% half-width.

    The half-width uses the normal approximation over per-episode
    accuracies and is ``None`` for a single episode.
    """
    episodes = cfg.eval_episodes if episodes is None else episodes
    seed = cfg.seed if seed is None else seed
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    fp = frozen(params)
    accs = np.empty(episodes)
    for i in range(episodes):
        task = draw_task(ds, cfg, acfg, np.random.default_rng([seed, EVAL_STREAM, i]))
        logits = forward(task, fp, acfg)
        pred = np.argmax(logits.data, axis=1)
        accs[i] = np.mean(pred == task.truth)
    mean = float(accs.mean())
    if episodes == 1:
        return mean, None
    return mean, float(1.96 * accs.std(ddof=1) / math.sqrt(episodes))


@dataclass
class TrainState:
    """Everything needed to resume training bit-for-bit."""

    params: ModelParams
    optimizer: OptimizerState
    episode: int = 0
    interval_losses: list = field(default_factory=list)


@dataclass
class TrainResult:
    state: TrainState
    log: list
    loss_curve: list

    @property
    def params(self) -> ModelParams:
        return self.state.params


def initial_state(d: int, cfg: TrainConfig, acfg: AttentionConfig) -> TrainState:
    rng = np.random.default_rng([cfg.seed, INIT_STREAM])
    return TrainState(init_params(acfg, d, cfg.n_way, rng), OptimizerState())


def train(ds: FeatureDataset, cfg: TrainConfig, acfg: AttentionConfig,
          eval_ds: Optional[FeatureDataset] = None, state: Optional[TrainState] = None,
          stop_after: Optional[int] = None, on_record: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Run (or resume) episodic training.

    Each episode samples ``batch_tasks`` tasks from a stream keyed on
    ``(seed, episode)``, averages their query losses, and takes one Adam
    step. Every ``eval_interval`` episodes, and after the last one, a record
    ``{episode, mean_loss, eval_accuracy, lr}`` is appended to the log;
    accuracy is measured on ``eval_ds`` (default: ``ds``).
    """
    eval_ds = ds if eval_ds is None else eval_ds
    if state is None:
        state = initial_state(ds.d, cfg, acfg)
    end = cfg.total_episodes if stop_after is None else min(stop_after, cfg.total_episodes)
    log, curve = [], []
    params = state.params
    for episode in range(state.episode, end):
        lr = cfg.lr_at(episode)
        rng = np.random.default_rng([cfg.seed, TRAIN_STREAM, episode])
        batch_loss = 0.0
        for _ in range(cfg.batch_tasks):
            task = draw_task(ds, cfg, acfg, rng)
            loss = scale(task_loss(task, params, acfg), 1.0 / cfg.batch_tasks)
            backward(loss)
            batch_loss += loss.item()
        adam_step(params, state.optimizer, lr, cfg.weight_decay)
        state.episode = episode + 1
        state.interval_losses.append(batch_loss)
        curve.append(batch_loss)
        if state.episode % cfg.eval_interval == 0 or state.episode == cfg.total_episodes:
            acc, _ = evaluate(params, eval_ds, cfg, acfg)
            record = {
                "episode": state.episode,
                "mean_loss": float(np.mean(state.interval_losses)),
                "eval_accuracy": acc,
                "lr": lr,
            }
            state.interval_losses = []
            log.append(record)
            if on_record is not None:
                on_record(record)
    return TrainResult(state, log, curve)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _encode(a: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(a, dtype="<f8").tobytes()).decode("ascii")


def _decode(text: str, rows: int, cols: int, what: str) -> np.ndarray:
    try:
        raw = base64.b64decode(text.encode("ascii"), validate=True)
    except (binascii.Error, ValueError, AttributeError) as exc:
        raise CheckpointError(f"{what}: bad base64 payload ({exc})") from None
    if len(raw) != rows * cols * 8:
        raise CheckpointError(f"{what}: expected {rows * cols * 8} bytes, got {len(raw)}")
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(rows, cols)


def _tensor_records(named: dict) -> list:
    return [{"name": k, "rows": int(a.shape[0]), "cols": int(a.shape[1]), "values": _encode(a)}
            for k, a in named.items()]


def checkpoint_document(state: TrainState, config: Optional[dict] = None) -> dict:
    opt = state.optimizer
    return {
        "format": CHECKPOINT_FORMAT,
        "episode": state.episode,
        "params": _tensor_records({n: t.data for n, t in state.params.named_tensors()}),
        "optimizer": {
            "step": opt.step,
            "beta1": opt.beta1,
            "beta2": opt.beta2,
            "eps": opt.eps,
            "m": _tensor_records(opt.m),
            "v": _tensor_records(opt.v),
        },
        "interval_losses": _encode(np.asarray(state.interval_losses, dtype=np.float64).reshape(1, -1)),
        "n_interval_losses": len(state.interval_losses),
        "config": config or {},
    }


def save_checkpoint(path, state: TrainState, config: Optional[dict] = None) -> None:
    with open(path, "w") as fh:
        json.dump(checkpoint_document(state, config), fh, indent=1, sort_keys=True)
        fh.write("\n")


def _records_to_arrays(records, what: str) -> dict:
    out = {}
    for rec in records:
        try:
            name, rows, cols, values = rec["name"], int(rec["rows"]), int(rec["cols"]), rec["values"]
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"{what}: malformed tensor record ({exc})") from None
        out[name] = _decode(values, rows, cols, f"{what} {name}")
    return out


def read_checkpoint(path) -> dict:
    """Parse and decode a checkpoint file without binding it to a model."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise
    except (OSError, json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: not a readable checkpoint ({exc})") from None
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: missing or unknown checkpoint format")
    try:
        opt = doc["optimizer"]
        n_loss = int(doc["n_interval_losses"])
        return {
            "episode": int(doc["episode"]),
            "params": _records_to_arrays(doc["params"], "param"),
            "m": _records_to_arrays(opt["m"], "optimizer m"),
            "v": _records_to_arrays(opt["v"], "optimizer v"),
            "step": int(opt["step"]),
            "betas": (float(opt["beta1"]), float(opt["beta2"]), float(opt["eps"])),
            "interval_losses": _decode(doc["interval_losses"], 1, n_loss, "interval_losses")[0].tolist(),
            "config": doc.get("config", {}),
        }
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: malformed checkpoint ({exc})") from None


def bind_params(template: ModelParams, arrays: dict) -> ModelParams:
    """Copy checkpoint arrays into a freshly initialised parameter set, checking shapes."""
    named = template.named_tensors()
    expected = {n for n, _ in named}
    missing = sorted(expected - arrays.keys())
    extra = sorted(arrays.keys() - expected)
    if missing or extra:
        raise CheckpointError(f"checkpoint does not match model: missing {missing}, unexpected {extra}")
    for name, t in named:
        a = arrays[name]
        if a.shape != t.shape:
            raise CheckpointError(f"parameter {name}: checkpoint shape {a.shape}, model expects {t.shape}")
        t.data = a.copy()
        t.zero_grad()
    return template


def load_checkpoint(path, d: int, cfg: TrainConfig, acfg: AttentionConfig) -> TrainState:
    """Rebuild a resumable :class:`TrainState` for the given model configuration."""
    doc = read_checkpoint(path)
    params = bind_params(init_params(acfg, d, cfg.n_way, np.random.default_rng(0)), doc["params"])
    b1, b2, eps = doc["betas"]
    opt = OptimizerState(m=doc["m"], v=doc["v"], step=doc["step"], beta1=b1, beta2=b2, eps=eps)
    return TrainState(params, opt, doc["episode"], doc["interval_losses"])
