"""Label-smoothed losses, optimizers, schedule, clipping, parameter averaging and the training loop."""

from __future__ import annotations

import contextlib
import csv
import io
import math
import time
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from . import nnops
from .blocks import ArchSpec, build_network
from .data import Dataset
from .graph import Graph
from .tensor import Prng


class DivergenceError(FloatingPointError):
    """Non-finite loss or activation during training."""


# -- label smoothing ------------------------------------------------------------

@dataclass(frozen=True)
class SmoothingConfig:
    epsilon: float = 0.0
    K: int = 10
    prior: tuple | None = None  # explicit u(k); uniform when None

    def __post_init__(self):
        if not 0.0 <= self.epsilon < 1.0:
            raise ValueError("epsilon must lie in [0, 1)")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.prior is not None:
            p = np.asarray(self.prior, np.float64)
            if p.shape != (self.K,) or (p < 0).any() or abs(p.sum() - 1.0) > 1e-12:
                raise ValueError("prior must be K non-negative values summing to 1")

    def u(self) -> np.ndarray:
        if self.prior is None:
            return np.full(self.K, 1.0 / self.K)
        return np.asarray(self.prior, np.float64)


def _check_labels(labels, K):
    labels = np.asarray(labels)
    if labels.dtype.kind not in "iu" or (labels < 0).any() or (labels >= K).any():
        raise ValueError(f"labels must be integers in [0, {K})")
    return labels.astype(np.int64)


def smoothed_targets(label, cfg: SmoothingConfig) -> np.ndarray:
    """q'(k) = (1 - eps) delta_{k,y} + eps u(k); accepts a label or an array of labels."""
    labels = _check_labels(np.atleast_1d(label), cfg.K)
    q = np.tile(cfg.epsilon * cfg.u(), (len(labels), 1))
    q[np.arange(len(labels)), labels] += 1.0 - cfg.epsilon
    # last entry absorbs rounding so rows sum to one
    q[:, -1] = 1.0 - q[:, :-1].sum(axis=1)
    return q[0] if np.ndim(label) == 0 else q


def cross_entropy(q: np.ndarray, logp: np.ndarray) -> np.ndarray:
    """Per-row H(q, p) given log-probabilities."""
    return -(q * logp).sum(axis=-1)


@dataclass
class LsrResult:
    loss: float  # batch mean of H(q', p)
    grad: np.ndarray  # per-example gradient p - q'; the mean loss has grad / B
    per_example: np.ndarray
    probs: np.ndarray
    targets: np.ndarray

    def __iter__(self):
        return iter((self.loss, self.grad))


def lsr_loss(logits, labels, cfg: SmoothingConfig) -> LsrResult:
    logits = np.asarray(logits, np.float64)
    if logits.ndim != 2 or logits.shape[1] != cfg.K:
        raise ValueError(f"logits must be [B, {cfg.K}], got {logits.shape}")
    q = smoothed_targets(np.asarray(labels).reshape(-1), cfg)
    if len(q) != len(logits):
        raise ValueError("one label per logit row required")
    logp = nnops.log_softmax(logits)
    per = cross_entropy(q, logp)
    probs = np.exp(logp)
    return LsrResult(float(per.mean()), probs - q, per, probs, q)


def lsr_floor(cfg: SmoothingConfig) -> float:
    """Entropy of q', the smallest loss any logits can reach."""
    q = smoothed_targets(0, cfg)
    q = q[q > 0]
    return float(-(q * np.log(q)).sum())


# -- optimisation -----------------------------------------------------------------

@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "momentum"  # momentum | rmsprop
    decay: float = 0.9
    epsilon: float = 1.0  # rmsprop only; added outside the square root

    def __post_init__(self):
        if self.kind not in ("momentum", "rmsprop"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if not 0.0 < self.decay < 1.0:
            raise ValueError("decay must lie in (0, 1)")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")


def optimizer_step(params: dict, grads: dict, state: dict, cfg: OptimizerConfig, lr: float):
    """Update ``params`` in place; ``state`` holds one zero-initialised slot per parameter."""
    for key, g in grads.items():
        p = params[key]
        if np.shape(g) != np.shape(p):
            raise ValueError(f"gradient shape {np.shape(g)} != parameter shape {np.shape(p)} for {key!r}")
        slot = state.get(key)
        if slot is None:
            slot = state[key] = np.zeros_like(p)
        if cfg.kind == "momentum":
            slot *= cfg.decay
            slot += g
            p -= lr * slot
        else:
            slot *= cfg.decay
            slot += (1.0 - cfg.decay) * np.square(g)
            p -= lr * g / (np.sqrt(slot) + cfg.epsilon)
    return params, state


@dataclass(frozen=True)
class ScheduleConfig:
    base_lr: float = 0.045
    decay_rate: float = 0.94
    decay_every_epochs: int = 2

    def __post_init__(self):
        if self.base_lr <= 0 or not 0 < self.decay_rate <= 1 or self.decay_every_epochs < 1:
            raise ValueError("invalid schedule")


def lr_at(schedule: ScheduleConfig, epoch: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return schedule.base_lr * schedule.decay_rate ** (epoch // schedule.decay_every_epochs)


@dataclass(frozen=True)
class ClipConfig:
    threshold: float = 2.0

    def __post_init__(self):
        if self.threshold <= 0:
            raise ValueError("threshold must be positive")


def global_norm(grads: dict) -> float:
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))


def clip_gradients(grads: dict, cfg: ClipConfig | None) -> dict:
    """Scale all gradients together when their global L2 norm exceeds the threshold."""
    if cfg is None:
        return grads
    norm = global_norm(grads)
    if norm <= cfg.threshold:
        return grads
    scale = cfg.threshold / norm
    return {k: g * scale for k, g in grads.items()}


@dataclass
class EmaState:
    decay: float
    shadow: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.decay < 1.0:
            raise ValueError("EMA decay must lie in [0, 1)")


def ema_update(state: EmaState, params: dict) -> EmaState:
    for k, p in params.items():
        s = state.shadow.get(k)
        if s is None:
            state.shadow[k] = np.array(p, copy=True)
            continue
        if s.shape != np.shape(p):
            raise ValueError(f"shadow shape mismatch for {k!r}")
        s *= state.decay
        s += (1.0 - state.decay) * p
    return state


@contextlib.contextmanager
def swapped_in(graph: Graph, ema: EmaState):
    """Evaluate with the shadow weights, then restore the training weights bitwise."""
    saved = {nid: graph.value(nid) for nid in ema.shadow}
    try:
        for nid, s in ema.shadow.items():
            graph._values[nid] = s.astype(graph.dtype)
        yield graph
    finally:
        graph._values.update(saved)


# -- history ----------------------------------------------------------------------

HISTORY_FIELDS = ("step", "epoch", "lr", "loss", "train_acc", "val_acc")


@dataclass
class TrainHistory:
    rows: list = field(default_factory=list)
    wall_time: float = 0.0

    @property
    def losses(self) -> list[float]:
        return [r["loss"] for r in self.rows]

    @property
    def epoch_rows(self) -> list[dict]:
        return [r for r in self.rows if r["train_acc"] is not None]

    @property
    def final_train_acc(self) -> float:
        return self.epoch_rows[-1]["train_acc"]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(HISTORY_FIELDS)
        for r in self.rows:
            w.writerow(["" if r[f] is None else repr(r[f]) if isinstance(r[f], float) else r[f] for f in HISTORY_FIELDS])
        return buf.getvalue()


# -- training loop ------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch: int = 32
    smoothing: float = 0.0
    optimizer: OptimizerConfig = OptimizerConfig()
    schedule: ScheduleConfig = ScheduleConfig(0.01, 0.94, 2)
    clip: ClipConfig | None = ClipConfig(2.0)
    ema_decay: float = 0.99
    aux_weight: float = 0.3
    main_weight: float = 1.0
    seed: int = 0
    precision: str = "f32"
    single_thread: bool = True


PRESETS = {
    # full-scale recipe, kept for reference runs
    "full": TrainConfig(epochs=100, batch=32, smoothing=0.1, optimizer=OptimizerConfig("rmsprop", 0.9, 1.0),
                         schedule=ScheduleConfig(0.045, 0.94, 2), clip=ClipConfig(2.0), ema_decay=0.9999),
    "tiny": TrainConfig(),
}


@dataclass
class TrainResult:
    history: TrainHistory
    graph: Graph
    ema: EmaState
    logits: int
    loss: int


def build_training_graph(arch: ArchSpec, cfg: TrainConfig, batch: int | None = None):
    """Network plus target input and the weighted main/aux loss. Returns (graph, logits id, loss id)."""
    batch = batch or cfg.batch
    graph, out = build_network(arch, batch=batch, precision=cfg.precision, seed=cfg.seed)
    targets = graph.input((batch, arch.classes), "targets", "loss")
    main = graph.softmax_xent(out["logits"], targets, 0.0, "loss/main", "loss")
    if out["aux_logits"] is not None:
        aux = graph.softmax_xent(out["aux_logits"], targets, 0.0, "loss/aux", "loss")
        loss = graph.add([main, aux], (cfg.main_weight, cfg.aux_weight), "loss/total", "loss")
    else:
        loss = graph.add([main], (cfg.main_weight,), "loss/total", "loss")
    return graph, out["logits"], loss


def predict(graph: Graph, logits: int, images: np.ndarray, chunk: int = 128) -> np.ndarray:
    outs = []
    for i in range(0, len(images), chunk):
        (y,), _ = graph.forward({"input": images[i:i + chunk]}, [logits], training=False, check_finite=False)
        outs.append(y)
    return np.concatenate(outs)


def evaluate(graph: Graph, logits: int, data: Dataset) -> tuple[float, float]:
    """(top-1 accuracy, mean cross-entropy) of the main head in inference mode."""
    z = predict(graph, logits, data.images).astype(np.float64)
    acc = float((z.argmax(axis=1) == data.labels).mean())
    logp = nnops.log_softmax(z)
    loss = float(-logp[np.arange(len(z)), data.labels].mean())
    return acc, loss


def train_loop(arch: ArchSpec, data: Dataset, cfg: TrainConfig = TrainConfig(), val: Dataset | None = None,
               log=None) -> TrainResult:
    """Minibatch training: forward, backward, clip, optimizer step, EMA update.

    Data order comes from its own PRNG stream so changing the init seed
    layout does not perturb it. Accuracy is measured at each epoch end in
    inference mode with the raw weights.
    """
    if len(data) and int(data.labels.max()) >= arch.classes:
        raise ValueError(f"labels reach {int(data.labels.max())} but the arch has {arch.classes} classes")
    limits = threadpool_limits(1) if cfg.single_thread else contextlib.nullcontext()
    # overflow shows up as a non-finite loss, reported as DivergenceError
    with limits, np.errstate(over="ignore", invalid="ignore"):
        return _train(arch, data, cfg, val, log)


def _train(arch, data, cfg, val, log):
    t0 = time.perf_counter()
    graph, logits, loss_id = build_training_graph(arch, cfg)
    smoothing = SmoothingConfig(cfg.smoothing, arch.classes)
    targets_all = smoothed_targets(data.labels, smoothing)
    images = data.images.astype(graph.dtype)
    params = {nid: graph.value(nid) for nid in graph.parameters()}
    opt_state: dict = {}
    ema = ema_update(EmaState(cfg.ema_decay), params)
    shuffle = Prng(cfg.seed, stream_id=1)
    history = TrainHistory()
    step = 0
    for epoch in range(cfg.epochs):
        lr = lr_at(cfg.schedule, epoch)
        order = shuffle.permutation(len(data))
        for start in range(0, len(order), cfg.batch):
            idx = order[start:start + cfg.batch]
            if len(idx) < 2:  # batch statistics need two examples
                continue
            feeds = {"input": images[idx], "targets": targets_all[idx]}
            try:
                (loss,), tape = graph.forward(feeds, [loss_id], training=True)
                if not np.isfinite(loss).all():
                    raise FloatingPointError("non-finite loss")
                grads = graph.backward(tape, loss_id)
            except FloatingPointError as e:
                raise DivergenceError(f"diverged at step {step} (epoch {epoch}, lr {lr:g}): {e}") from e
            grads = clip_gradients(grads, cfg.clip)
            optimizer_step(params, grads, opt_state, cfg.optimizer, lr)
            ema_update(ema, params)
            history.rows.append({"step": step, "epoch": epoch, "lr": lr, "loss": float(loss[0]),
                                 "train_acc": None, "val_acc": None})
            step += 1
        if history.rows:
            row = history.rows[-1]
            row["train_acc"] = evaluate(graph, logits, data)[0]
            if val is not None:
                row["val_acc"] = evaluate(graph, logits, val)[0]
            if log:
                log(f"epoch {epoch:3d} lr {lr:.5f} loss {row['loss']:.4f} train_acc {row['train_acc']:.4f}"
                    + (f" val_acc {row['val_acc']:.4f}" if val is not None else ""))
    history.wall_time = time.perf_counter() - t0
    return TrainResult(history, graph, ema, logits, loss_id)


def checkpoint_tensors(result: TrainResult) -> dict:
    """Raw state under "<name>@raw" and averaged parameters under "<name>@ema"."""
    g = result.graph
    out = {f"{k}@raw": v for k, v in g.state_dict().items()}
    for nid, s in result.ema.shadow.items():
        out[f"{g.nodes[nid].name}@ema"] = s
    return out


def expected_checkpoint(graph: Graph) -> dict:
    out = {f"{k}@raw": v for k, v in graph.state_dict().items()}
    for nid in graph.parameters():
        out[f"{graph.nodes[nid].name}@ema"] = graph.value(nid)
    return out


def load_into(graph: Graph, tensors: dict, use_ema: bool = False) -> None:
    state = {k[:-4]: v for k, v in tensors.items() if k.endswith("@raw")}
    if use_ema:
        for k, v in tensors.items():
            if k.endswith("@ema"):
                state[k[:-4]] = v
    graph.load_state_dict(state)
