"""Per-access cache-set classification: window encoding, rule denoiser, MLP."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Optional, Sequence

import numpy as np

SETS = 16
HALF_WINDOW = 8
WINDOW_ROWS = 2 * HALF_WINDOW + 1
INPUT_DIM = SETS * WINDOW_ROWS
OUTLIER_HOT = 8


def encode_window(traces: np.ndarray, index: int, half: int = HALF_WINDOW) -> np.ndarray:
    """Rows index-half .. index+half of a (n, 16) 0/1 trace sequence, zero padded."""
    traces = np.asarray(traces)
    n = len(traces)
    if not 0 <= index < n:
        raise IndexError("index outside the trace sequence")
    out = np.zeros((2 * half + 1, traces.shape[1]), dtype=np.float64)
    lo, hi = max(0, index - half), min(n, index + half + 1)
    out[lo - (index - half):hi - (index - half)] = traces[lo:hi]
    return out.reshape(-1)


def encode_sequence(traces: np.ndarray, half: int = HALF_WINDOW) -> np.ndarray:
    """All windows of one sequence at once, shape (n, (2*half+1)*16)."""
    traces = np.asarray(traces, dtype=np.float64)
    n, w = traces.shape
    padded = np.zeros((n + 2 * half, w))
    padded[half:half + n] = traces
    idx = np.arange(n)[:, None] + np.arange(2 * half + 1)[None, :]
    return padded[idx].reshape(n, -1)


def rule_denoise(traces: np.ndarray, window: int = 4) -> list[frozenset[int]]:
    """Candidate sets per access after peeling off trails of later accesses.

    Works backwards: the lines that accesses i+1..i+window are believed to
    touch are removed from the hot lines of access i.  If nothing is left
    the hot lines are kept; an all-cold row yields every set.
    """
    traces = np.asarray(traces, dtype=bool)
    n = len(traces)
    cands: list[frozenset[int]] = [frozenset()] * n
    everything = frozenset(range(traces.shape[1]))
    for i in range(n - 1, -1, -1):
        hot = frozenset(int(s) for s in np.flatnonzero(traces[i]))
        if not hot:
            cands[i] = everything
            continue
        trail = set()
        for j in range(i + 1, min(n, i + 1 + window)):
            if cands[j] is not everything and len(cands[j]) < len(everything):
                trail |= cands[j]
        rest = hot - trail
        cands[i] = rest if rest else hot
    return cands


@dataclass
class Prediction:
    probabilities: np.ndarray
    ranking: np.ndarray

    @classmethod
    def from_probs(cls, p: np.ndarray) -> "Prediction":
        return cls(p, np.argsort(-p, kind="stable"))

    def candidates(self, mass: float = 0.9, max_candidates: int = SETS) -> list[int]:
        """Smallest top-ranked prefix whose probability reaches ``mass``."""
        out = []
        acc = 0.0
        for s in self.ranking[:max_candidates]:
            out.append(int(s))
            acc += float(self.probabilities[s])
            if acc >= mass:
                break
        return out


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class MlpModel:
    """Dense ReLU network with dropout after each hidden layer and softmax output."""

    sizes: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    dropout: float = 0.2

    @classmethod
    def init(cls, sizes: Sequence[int] = (INPUT_DIM, 182, 64, SETS), dropout: float = 0.2,
             rng: Optional[np.random.Generator] = None, dtype=np.float64) -> "MlpModel":
        rng = rng or np.random.default_rng(0)
        ws, bs = [], []
        for a, b in zip(sizes[:-1], sizes[1:]):
            ws.append((rng.standard_normal((a, b)) * np.sqrt(2.0 / a)).astype(dtype))
            bs.append(np.zeros(b, dtype=dtype))
        return cls(tuple(sizes), ws, bs, dropout)

    def forward(self, x: np.ndarray, rng: Optional[np.random.Generator] = None, masks=None):
        """Returns (probabilities, cache).  Dropout is active iff rng or masks are given."""
        x = np.asarray(x, dtype=self.weights[0].dtype)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[1] != self.sizes[0]:
            raise ValueError(f"expected {self.sizes[0]} features, got {x.shape[1]}")
        acts = [x]
        used_masks = []
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            if i == last:
                probs = _softmax(z)
                break
            h = np.maximum(z, 0)
            m = None
            if masks is not None:
                m = masks[i]
            elif rng is not None and self.dropout > 0:
                keep = 1.0 - self.dropout
                m = (rng.random(h.shape) < keep).astype(h.dtype) / keep
            if m is not None:
                h = h * m
            used_masks.append(m)
            acts.append(h)
        return probs, (acts, used_masks)

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def loss_and_grads(self, x, y, rng=None, masks=None):
        """Mean cross-entropy and its gradients w.r.t. all parameters."""
        probs, (acts, used_masks) = self.forward(x, rng, masks)
        n = probs.shape[0]
        y = np.asarray(y)
        loss = -np.mean(np.log(probs[np.arange(n), y] + 1e-300))
        delta = probs.copy()
        delta[np.arange(n), y] -= 1.0
        delta /= n
        gw = [None] * len(self.weights)
        gb = [None] * len(self.weights)
        for i in range(len(self.weights) - 1, -1, -1):
            gw[i] = acts[i].T @ delta
            gb[i] = delta.sum(axis=0)
            if i == 0:
                break
            delta = delta @ self.weights[i].T
            m = used_masks[i - 1]
            if m is not None:
                delta = delta * m
            delta = delta * (acts[i] > 0)
        return loss, gw, gb

    # serialization ---------------------------------------------------
    MAGIC = b"CVMLP\x00"
    VERSION = 1

    def save(self, fh: BinaryIO) -> None:
        fh.write(self.MAGIC)
        fh.write(struct.pack("<II", self.VERSION, len(self.sizes)))
        fh.write(struct.pack(f"<{len(self.sizes)}I", *self.sizes))
        fh.write(struct.pack("<d", self.dropout))
        for w, b in zip(self.weights, self.biases):
            fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())

    @classmethod
    def load(cls, fh: BinaryIO) -> "MlpModel":
        if fh.read(len(cls.MAGIC)) != cls.MAGIC:
            raise ValueError("not a model file")
        version, n = struct.unpack("<II", fh.read(8))
        if version != cls.VERSION:
            raise ValueError(f"unsupported model version {version}")
        sizes = struct.unpack(f"<{n}I", fh.read(4 * n))
        (dropout,) = struct.unpack("<d", fh.read(8))
        ws, bs = [], []
        for a, b in zip(sizes[:-1], sizes[1:]):
            ws.append(np.frombuffer(fh.read(8 * a * b), dtype="<f8").reshape(a, b).astype(np.float64))
            bs.append(np.frombuffer(fh.read(8 * b), dtype="<f8").astype(np.float64))
        return cls(tuple(sizes), ws, bs, dropout)


def predict(model: MlpModel, window: np.ndarray) -> Prediction:
    return Prediction.from_probs(model.predict_proba(window)[0])


def predict_many(model: MlpModel, windows: np.ndarray) -> list[Prediction]:
    return [Prediction.from_probs(p) for p in model.predict_proba(windows)]


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 128
    learning_rate: float = 1e-3
    dropout: float = 0.2
    hidden: tuple[int, ...] = (182, 64)
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class TrainReport:
    epochs: int
    train_loss: list[float] = field(default_factory=list)


def train(x: np.ndarray, y: np.ndarray, cfg: Optional[TrainConfig] = None) -> tuple[MlpModel, TrainReport]:
    """Mini-batch Adam on cross-entropy.  ``epochs=0`` returns the untrained net."""
    cfg = cfg or TrainConfig()
    x = np.asarray(x, dtype=np.float32)
    y = np.asarray(y, dtype=np.int64)
    if len(x) == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(cfg.seed)
    model = MlpModel.init((x.shape[1], *cfg.hidden, SETS), cfg.dropout, rng, dtype=np.float32)
    params = model.weights + model.biases
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    report = TrainReport(cfg.epochs)
    t = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(len(x))
        total = 0.0
        for start in range(0, len(x), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, gw, gb = model.loss_and_grads(x[idx], y[idx], rng)
            total += float(loss) * len(idx)
            t += 1
            a = cfg.learning_rate * np.sqrt(1 - cfg.beta2 ** t) / (1 - cfg.beta1 ** t)
            for k, g in enumerate(gw + gb):
                m[k] *= cfg.beta1
                m[k] += (1 - cfg.beta1) * g
                v[k] *= cfg.beta2
                v[k] += (1 - cfg.beta2) * g * g
                params[k] -= (a * m[k] / (np.sqrt(v[k]) + cfg.eps)).astype(params[k].dtype)
        report.train_loss.append(total / len(x))
    model.weights = [w.astype(np.float64) for w in model.weights]
    model.biases = [b.astype(np.float64) for b in model.biases]
    return model, report


def accuracy(model: MlpModel, x: np.ndarray, y: np.ndarray) -> float:
    if len(x) == 0:
        return float("nan")
    return float(np.mean(np.argmax(model.predict_proba(x), axis=1) == np.asarray(y)))


def gradient_check(model: MlpModel, x: np.ndarray, y: np.ndarray, rng: np.random.Generator,
                   eps: float = 1e-5, samples: int = 40, floor: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients.

    Dropout masks are drawn once and held fixed so the loss is a
    deterministic function of the parameters.  The denominator is floored
    at ``floor``: roundoff in the difference quotient is about
    |loss| * 2e-16 / eps, so smaller gradients are compared absolutely.
    """
    probs, (acts, masks) = model.forward(x, rng)
    fixed = [m if m is not None else np.ones_like(a) for m, a in zip(masks, acts[1:])]
    _, gw, gb = model.loss_and_grads(x, y, masks=fixed)
    worst = 0.0
    params = [(p, g) for p, g in zip(model.weights + model.biases, gw + gb)]
    for _ in range(samples):
        p, g = params[int(rng.integers(len(params)))]
        flat = p.reshape(-1)
        k = int(rng.integers(flat.size))
        old = flat[k]
        flat[k] = old + eps
        lp = model.loss_and_grads(x, y, masks=fixed)[0]
        flat[k] = old - eps
        lm = model.loss_and_grads(x, y, masks=fixed)[0]
        flat[k] = old
        num = (lp - lm) / (2 * eps)
        ana = g.reshape(-1)[k]
        denom = max(abs(num), abs(ana), floor)
        worst = max(worst, abs(num - ana) / denom)
    return worst


@dataclass
class WindowDataset:
    x: np.ndarray
    y: np.ndarray
    op: np.ndarray  # block-operation id per row, for splitting without leakage


def build_dataset(hot: np.ndarray, labels: np.ndarray, drop_outliers: bool = True) -> WindowDataset:
    """Windows for every labelled access of (ops, n, 16) traces.

    Accesses whose trace has more than 8 hot sets are treated as outliers:
    they neither produce a sample nor serve as context (their row is zeroed).
    """
    hot = np.asarray(hot, dtype=bool).copy()
    labels = np.asarray(labels)
    if drop_outliers:
        out = hot.sum(axis=-1) > OUTLIER_HOT
        hot[out] = False
        labels = np.where(out, -1, labels)
    xs, ys, ops = [], [], []
    for j in range(len(hot)):
        win = encode_sequence(hot[j])
        keep = labels[j] >= 0
        xs.append(win[keep])
        ys.append(labels[j][keep])
        ops.append(np.full(int(keep.sum()), j))
    return WindowDataset(np.concatenate(xs).astype(np.float32), np.concatenate(ys).astype(np.int64),
                         np.concatenate(ops))


def split_by_op(ds: WindowDataset, test_fraction: float, rng: np.random.Generator):
    ops = np.unique(ds.op)
    test_ops = set(rng.choice(ops, size=max(1, int(round(len(ops) * test_fraction))), replace=False).tolist())
    mask = np.array([o in test_ops for o in ds.op])
    return (WindowDataset(ds.x[~mask], ds.y[~mask], ds.op[~mask]),
            WindowDataset(ds.x[mask], ds.y[mask], ds.op[mask]))
