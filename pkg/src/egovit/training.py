"""Loss, reverse-mode gradients, finite-difference oracle, optimizers and the training loop."""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .config import EgoViTConfig, TrainConfig
from .features import LabeledClip, atomic_write_bytes, stack_clips
from .model import EgoViTParams, forward
from .numerics import Tensor, named_parameters, no_grad
from .numerics import tensor as tt

FD_PARAM_LIMIT = 10_000


class NumericDivergenceError(FloatingPointError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss} at step {step}")
        self.step = step


class MissingGraphError(RuntimeError):
    pass


@dataclass
class TrainLog:
    step: list[int] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)
    acc: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)

    def append(self, step, loss, acc, seconds):
        self.step.append(step)
        self.loss.append(loss)
        self.acc.append(acc)
        self.seconds.append(seconds)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "loss", "acc", "seconds"])
        for row in zip(self.step, self.loss, self.acc, self.seconds):
            w.writerow([row[0], repr(row[1]), repr(row[2]), f"{row[3]:.6f}"])
        return buf.getvalue()


# ------------------------------------------------------------------------ loss

def cross_entropy_loss(logits, label) -> tuple[float, np.ndarray]:
    """Numpy reference: ``(-log softmax(logits)[label], softmax - onehot)``."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max()
    logp = z - np.log(np.exp(z).sum())
    grad = np.exp(logp)
    grad[label] -= 1.0
    return float(-logp[label]), grad


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy over a batch of logits [B, K] (graph-recording)."""
    labels = np.asarray(labels)
    B = logits.shape[0]
    z = logits - Tensor(logits.data.max(axis=-1, keepdims=True))
    lse = tt.log(tt.tsum(tt.exp(z), axis=-1))
    picked = z[np.arange(B), labels]
    return tt.mean(lse - picked)


# ------------------------------------------------------------------- gradients

def backward(output: Tensor, params, upstream=None) -> dict[str, np.ndarray]:
    """Gradients of ``output`` w.r.t. every tensor in ``params`` (zeros where unreached)."""
    if not isinstance(output, Tensor) or not output.has_graph:
        raise MissingGraphError("output carries no recorded graph; run forward with gradient recording on")
    named = list(named_parameters(params))
    for _, t in named:
        t.grad = None
    output.backward(upstream)
    grads = {}
    for name, t in named:
        grads[name] = t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
        t.grad = None
    return grads


def finite_diff_grad(f: Callable[[], float], arrays: Sequence[np.ndarray], step: float = 1e-5
                     ) -> list[np.ndarray]:
    """Central differences of ``f()`` w.r.t. every scalar of ``arrays`` (perturbed in place)."""
    out = []
    for arr in arrays:
        g = np.zeros_like(arr, dtype=np.float64)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = f()
            flat[i] = orig - step
            fm = f()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * step)
        out.append(g)
    return out


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """|a - b| / max(|a|, |b|, floor) elementwise."""
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


@dataclass
class GradCheckReport:
    n_params: int
    max_rel_error: float
    worst_param: str
    per_param: dict[str, float]
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < 1e-4


def loss_on_batch(cfg: EgoViTConfig, params: EgoViTParams, batch) -> Tensor:
    video, ho, mask, labels = batch
    logits, _ = forward(video, ho, mask, cfg, params)
    return cross_entropy(logits, labels)


def gradient_check(cfg: EgoViTConfig, params: EgoViTParams, batch, step: float = 1e-5,
                   limit: int = FD_PARAM_LIMIT) -> GradCheckReport:
    """Compare :func:`backward` against central differences on every parameter scalar."""
    named = list(named_parameters(params))
    n = sum(t.size for _, t in named)
    if n >= limit:
        raise ValueError(f"finite-difference check limited to < {limit} parameters, model has {n}")
    start = time.perf_counter()
    analytic = backward(loss_on_batch(cfg, params, batch), params)

    def f():
        with no_grad():
            return float(loss_on_batch(cfg, params, batch).data)

    numeric = finite_diff_grad(f, [t.data for _, t in named], step)
    per = {}
    for (name, _), num in zip(named, numeric):
        per[name] = float(relative_error(analytic[name], num).max())
    worst = max(per, key=per.get)
    return GradCheckReport(n, per[worst], worst, per, time.perf_counter() - start)


# ------------------------------------------------------------------ optimizers

class SGD:
    def __init__(self, tensors: Sequence[Tensor], lr: float):
        self.tensors = list(tensors)
        self.lr = lr

    def step(self, grads: Sequence[np.ndarray]) -> None:
        for t, g in zip(self.tensors, grads):
            t.data -= self.lr * g


class Adam:
    def __init__(self, tensors: Sequence[Tensor], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.tensors = list(tensors)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(t.data) for t in self.tensors]
        self.v = [np.zeros_like(t.data) for t in self.tensors]
        self.t = 0

    def step(self, grads: Sequence[np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.tensors, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(params, tc: TrainConfig):
    tensors = [t for _, t in named_parameters(params)]
    if tc.optimizer == "sgd":
        return SGD(tensors, tc.learning_rate)
    return Adam(tensors, tc.learning_rate, tc.beta1, tc.beta2, tc.adam_eps)


# ------------------------------------------------------------------- training

def batch_schedule(n: int, batch_size: int, steps: int, seed: int) -> list[np.ndarray]:
    """Fixed index batches: a fresh permutation per epoch, drawn from ``seed``."""
    rng = np.random.default_rng(seed)
    if batch_size >= n:
        return [np.arange(n)] * steps
    out: list[np.ndarray] = []
    perm = rng.permutation(n)
    pos = 0
    while len(out) < steps:
        if pos + batch_size > n:
            perm, pos = rng.permutation(n), 0
        out.append(perm[pos:pos + batch_size])
        pos += batch_size
    return out


def train(cfg: EgoViTConfig, params: EgoViTParams, dataset: Sequence[LabeledClip], tc: TrainConfig,
          on_step: Callable | None = None) -> TrainLog:
    """Optimize ``params`` in place on ``dataset``; returns per-step loss and batch accuracy."""
    if not dataset:
        raise ValueError("training dataset is empty")
    video, ho, mask, labels = stack_clips(dataset)
    names = [n for n, _ in named_parameters(params)]
    opt = make_optimizer(params, tc)
    log = TrainLog()
    start = time.perf_counter()
    for step, idx in enumerate(batch_schedule(len(dataset), tc.batch_size, tc.steps, tc.seed)):
        logits, _ = forward(video[idx], ho[idx], mask[idx], cfg, params)
        loss = cross_entropy(logits, labels[idx])
        value = float(loss.data)
        if not np.isfinite(value):
            raise NumericDivergenceError(step, value)
        acc = float(np.mean(logits.data.argmax(axis=-1) == labels[idx]))
        done = tc.stop_at_full_accuracy and acc == 1.0 and len(idx) == len(dataset)
        if not done:
            # a full-batch perfect fit stops before stepping, so the returned params are the ones that fit
            grads = backward(loss, params)
            opt.step([grads[n] for n in names])
        log.append(step, value, acc, time.perf_counter() - start)
        if on_step is not None:
            on_step(step, value, acc)
        if done:
            break
    return log


def predict(cfg: EgoViTConfig, params: EgoViTParams, dataset: Sequence[LabeledClip], batch_size: int = 64
            ) -> np.ndarray:
    video, ho, mask, _ = stack_clips(dataset)
    preds = []
    with no_grad():
        for s in range(0, len(dataset), batch_size):
            logits, _ = forward(video[s:s + batch_size], ho[s:s + batch_size], mask[s:s + batch_size], cfg, params)
            preds.append(logits.data.argmax(axis=-1))
    return np.concatenate(preds)


def accuracy(cfg: EgoViTConfig, params: EgoViTParams, dataset: Sequence[LabeledClip]) -> float:
    labels = np.array([c.label for c in dataset])
    return float(np.mean(predict(cfg, params, dataset) == labels))


# ------------------------------------------------------------------ persistence

def save_params(params: EgoViTParams, path) -> None:
    buf = io.BytesIO()
    np.savez(buf, **{name: t.data for name, t in named_parameters(params)})
    atomic_write_bytes(path, buf.getvalue())


def load_params(cfg: EgoViTConfig, path) -> EgoViTParams:
    from .model import init_params

    params = init_params(cfg, 0)
    with np.load(path, allow_pickle=False) as data:
        named = dict(named_parameters(params))
        missing = set(named) - set(data.files)
        extra = set(data.files) - set(named)
        if missing or extra:
            raise ValueError(f"parameter file does not match config: missing {sorted(missing)[:5]}, "
                             f"unexpected {sorted(extra)[:5]}")
        for name, t in named.items():
            if data[name].shape != t.shape:
                raise ValueError(f"{name}: shape {data[name].shape} != expected {t.shape}")
            t.data = data[name].astype(np.float64)
    return params
