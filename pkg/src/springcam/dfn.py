"""Deformation-force network: a small MLP from relative pose to specific acceleration."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import geometry as geo
from .dynamics import SimulatedSequence, spring_wrench

FORMAT = "dfn-v1"
PROFILES = {"tiny": (64, 64), "full": (384, 384, 384)}


class TrainingError(RuntimeError):
    pass


# ------------------------------------------------------------------ net --

@dataclass
class DeformationNet:
    """Fully connected ReLU network with an identity output layer.

    ``weights[i]`` has shape ``(out, in)``; the first layer takes the
    relative-pose log ``(rotation, translation)`` and the last produces
    ``(linear, angular)`` specific acceleration in camera axes.
    """

    weights: list
    biases: list
    activation: str = "relu"

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix")
        self.weights = [np.array(w, dtype=float) for w in self.weights]
        self.biases = [np.array(b, dtype=float) for b in self.biases]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ValueError(f"layer {i}: weight {w.shape} does not match bias {b.shape}")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ValueError(f"layer {i} input size does not match layer {i - 1} output")
        if self.activation != "relu":
            raise ValueError("only relu hidden activations are supported")

    @classmethod
    def init(cls, hidden: Sequence[int] = PROFILES["full"], n_in: int = 6, n_out: int = 6,
             seed: int | np.random.Generator = 0) -> "DeformationNet":
        """He-initialised weights, zero biases."""
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        sizes = [n_in, *hidden, n_out]
        weights = [rng.standard_normal((o, i)) * np.sqrt(2.0 / i) for i, o in zip(sizes, sizes[1:])]
        return cls(weights, [np.zeros(o) for o in sizes[1:]])

    @property
    def sizes(self) -> list:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def copy(self) -> "DeformationNet":
        return DeformationNet([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def forward(self, x: np.ndarray) -> np.ndarray:
        h = np.asarray(x, dtype=float)
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w.T + b
            if i < last:
                h = np.maximum(h, 0.0)
        return h

    __call__ = forward

    def input_jacobian(self, x: np.ndarray) -> np.ndarray:
        """d output / d input, shape ``(..., n_out, n_in)``; ReLU slope is 0 at exactly 0."""
        h = np.asarray(x, dtype=float)
        masks = []
        last = len(self.weights) - 1
        for w, b in zip(self.weights[:last], self.biases[:last]):
            z = h @ w.T + b
            masks.append((z > 0).astype(float))
            h = z * masks[-1]
        # accumulate from the output side: the running product stays (n_out, width)
        J = np.broadcast_to(self.weights[-1], h.shape[:-1] + self.weights[-1].shape)
        for w, m in zip(self.weights[last - 1::-1], masks[::-1]):
            J = (J * m[..., None, :]) @ w
        return np.array(J)

    def forward_jacobian(self, x: np.ndarray):
        return self.forward(x), self.input_jacobian(x)

    def _backprop(self, x: np.ndarray, grad_out_fn):
        """Forward pass, then parameter gradients of a loss given ``dL/d output``."""
        acts = [x]
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w.T + b
            if i < last:
                h = np.maximum(h, 0.0)
            acts.append(h)
        loss, g = grad_out_fn(acts[-1])
        gw, gb = [None] * len(self.weights), [None] * len(self.weights)
        for i in range(last, -1, -1):
            gw[i] = g.T @ acts[i]
            gb[i] = g.sum(axis=0)
            if i:
                g = (g @ self.weights[i]) * (acts[i] > 0)
        return loss, gw, gb

    def l1_gradients(self, x: np.ndarray, y: np.ndarray, scale: np.ndarray | None = None):
        """Mean (optionally per-output weighted) L1 loss and its parameter gradients."""
        x, y = np.asarray(x, float), np.asarray(y, float)
        w = np.ones(y.shape[-1]) if scale is None else np.asarray(scale, float)
        n = y.size

        def head(out):
            r = out - y
            return np.sum(np.abs(r) * w) / n, np.sign(r) * w / n
        return self._backprop(x, head)

    # serialisation
    def to_dict(self) -> dict:
        return {"format": FORMAT,
                "layers": [{"rows": int(w.shape[0]), "cols": int(w.shape[1]),
                            "weights": w.ravel().tolist(), "bias": b.tolist()}
                           for w, b in zip(self.weights, self.biases)],
                "activation": self.activation}

    @classmethod
    def from_dict(cls, d: dict) -> "DeformationNet":
        if d.get("format") != FORMAT:
            raise ValueError(f"unsupported network format {d.get('format')!r}")
        weights, biases = [], []
        for layer in d["layers"]:
            weights.append(np.asarray(layer["weights"], float).reshape(layer["rows"], layer["cols"]))
            biases.append(np.asarray(layer["bias"], float))
        net = cls(weights, biases, d.get("activation", "relu"))
        if not all(np.isfinite(w).all() for w in net.weights + net.biases):
            raise ValueError("network parameters must be finite")
        return net

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "DeformationNet":
        return cls.from_dict(json.loads(Path(path).read_text()))


def forward(net: DeformationNet, x: np.ndarray) -> np.ndarray:
    return net.forward(x)


def input_jacobian(net: DeformationNet, x: np.ndarray) -> np.ndarray:
    return net.input_jacobian(x)


# -------------------------------------------------------------- dataset --

@dataclass
class Dataset:
    """Inputs and labels stacked in (sequence, time) order."""

    inputs: np.ndarray
    labels: np.ndarray
    sequence: np.ndarray
    t: np.ndarray

    def __len__(self) -> int:
        return len(self.inputs)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.inputs[idx], self.labels[idx], self.sequence[idx], self.t[idx])

    @classmethod
    def concat(cls, parts: Sequence["Dataset"]) -> "Dataset":
        return cls(*(np.concatenate([getattr(p, f) for p in parts])
                     for f in ("inputs", "labels", "sequence", "t")))


def relative_inputs(base_T: np.ndarray, cam_T: np.ndarray) -> np.ndarray:
    return geo.se3_log(geo.se3_inv(base_T) @ cam_T)


def make_dataset(sequences: Sequence[SimulatedSequence] | SimulatedSequence,
                 g=None, *, normalize: bool = True) -> Dataset:
    """Network inputs and labels from ground-truth sequences.

    The input is ``se3_log(T_b^-1 T_c)``.  The label is the camera's
    specific acceleration ``(a - g, alpha)`` rotated into camera axes, which
    removes any dependence on the world frame.  ``normalize=False`` keeps
    the linear part in world axes and the angular part in body axes.
    """
    if isinstance(sequences, SimulatedSequence):
        sequences = [sequences]
    parts = []
    for i, seq in enumerate(sequences):
        g_i = np.asarray(seq.gravity if g is None else g, dtype=float)
        if seq.camera.acc is None or seq.camera.alpha is None:
            raise ValueError(f"sequence {i} has no camera accelerations")
        if len(seq.base) != len(seq.camera) or not np.allclose(seq.base.t, seq.camera.t, atol=1e-9):
            raise ValueError(f"sequence {i}: base and camera samples are not time-aligned")
        Rc = seq.camera.T[:, :3, :3]
        spec = seq.camera.acc - g_i
        if normalize:
            lin = np.einsum("nji,nj->ni", Rc, spec)
        else:
            lin = spec
        labels = np.concatenate([lin, seq.camera.alpha], axis=1)
        inputs = relative_inputs(seq.base.T, seq.camera.T)
        if not (np.isfinite(inputs).all() and np.isfinite(labels).all()):
            raise ValueError(f"sequence {i} contains non-finite samples")
        parts.append(Dataset(inputs, labels, np.full(len(inputs), i), seq.camera.t.copy()))
    return Dataset.concat(parts)


# ------------------------------------------------------------- training --

@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    epochs: int = 100
    batch: int = 1024
    split: tuple = (0.7, 0.2, 0.1)  # train, test, validation
    seed: int = 0
    block: int = 360  # samples per contiguous split block
    lr_final: float | None = None  # cosine decay target, None keeps lr constant

    def __post_init__(self):
        if not (self.lr > 0 and self.epochs >= 1 and self.batch >= 1 and self.block >= 1):
            raise ValueError("lr, epochs, batch and block must be positive")
        if len(self.split) != 3 or min(self.split) < 0 or not np.isclose(sum(self.split), 1.0):
            raise ValueError("split must be three non-negative fractions summing to 1")

    @classmethod
    def profile(cls, name: str, **overrides) -> "TrainConfig":
        if name == "full":
            return cls(**overrides)
        if name == "tiny":
            return cls(**{"lr": 3e-3, "lr_final": 3e-5, "epochs": 150, "batch": 256, **overrides})
        raise ValueError(f"unknown profile {name!r}")


@dataclass
class Split:
    train: np.ndarray
    test: np.ndarray
    val: np.ndarray


def split_indices(data: Dataset, cfg: TrainConfig) -> Split:
    """Seeded 7:2:1 assignment of contiguous blocks (neighbouring samples are nearly identical)."""
    n = len(data)
    key = data.sequence.astype(np.int64) * (n + 1) + np.arange(n) // cfg.block
    blocks, inverse = np.unique(key, return_inverse=True)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    order = rng.permutation(len(blocks))
    n_train = int(round(cfg.split[0] * len(blocks)))
    n_test = int(round(cfg.split[1] * len(blocks)))
    label = np.empty(len(blocks), dtype=int)
    label[order[:n_train]] = 0
    label[order[n_train:n_train + n_test]] = 1
    label[order[n_train + n_test:]] = 2
    which = label[inverse]
    return Split(*(np.flatnonzero(which == k) for k in range(3)))


@dataclass
class TrainResult:
    net: DeformationNet
    train_l1: list = field(default_factory=list)
    val_l1: list = field(default_factory=list)
    split: Split | None = None

    def loss_csv(self) -> str:
        rows = ["epoch,train_l1,val_l1"]
        rows += [f"{i + 1},{a!r},{b!r}" for i, (a, b) in enumerate(zip(self.train_l1, self.val_l1))]
        return "\n".join(rows) + "\n"


def _standardize(net: DeformationNet, mx, sx, my, sy) -> DeformationNet:
    """Reparameterise so the net acts on standardized inputs and outputs."""
    out = net.copy()
    out.biases[0] = out.biases[0] + out.weights[0] @ mx
    out.weights[0] = out.weights[0] * sx
    out.weights[-1] = out.weights[-1] / sy[:, None]
    out.biases[-1] = (out.biases[-1] - my) / sy
    return out


def _destandardize(net: DeformationNet, mx, sx, my, sy) -> DeformationNet:
    out = net.copy()
    out.weights[-1] = out.weights[-1] * sy[:, None]
    out.biases[-1] = out.biases[-1] * sy + my
    out.weights[0] = out.weights[0] / sx
    out.biases[0] = out.biases[0] - out.weights[0] @ mx
    return out


def mean_l1(net: DeformationNet, data: Dataset) -> float:
    if len(data) == 0:
        return float("nan")
    return float(np.mean(np.abs(net.forward(data.inputs) - data.labels)))


def train(net: DeformationNet | Sequence[int] | None, data: Dataset,
          cfg: TrainConfig = TrainConfig()) -> TrainResult:
    """Adam on the mean L1 loss.

    Optimisation runs on standardized inputs and outputs (training-split
    statistics); the affine maps are folded back into the first and last
    layers, so the returned net consumes raw inputs.  ``net`` may be an
    existing network to continue from, or hidden widths for a fresh one.
    """
    split = split_indices(data, cfg)
    if len(split.train) == 0:
        raise TrainingError("training split is empty")
    tr = data.subset(split.train)
    val = data.subset(split.val)
    mx, sx = tr.inputs.mean(0), tr.inputs.std(0)
    my, sy = tr.labels.mean(0), tr.labels.std(0)
    sx = np.where(sx > 1e-12, sx, 1.0)
    sy = np.where(sy > 1e-12, sy, 1.0)
    xs, ys = (tr.inputs - mx) / sx, (tr.labels - my) / sy

    seeds = np.random.SeedSequence([cfg.seed, 2]).spawn(2)
    if net is None or not isinstance(net, DeformationNet):
        hidden = PROFILES["full"] if net is None else tuple(net)
        work = DeformationNet.init(hidden, data.inputs.shape[1], data.labels.shape[1],
                                   np.random.Generator(np.random.Philox(seeds[0])))
    else:
        work = _standardize(net, mx, sx, my, sy)
    rng = np.random.Generator(np.random.Philox(seeds[1]))

    params = work.weights + work.biases
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    b1, b2, eps = 0.9, 0.999, 1e-8
    step = 0
    n = len(xs)
    n_batches = max(1, -(-n // cfg.batch))
    total = cfg.epochs * n_batches
    result = TrainResult(net, split=split)
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, cfg.batch):
            idx = perm[start:start + cfg.batch]
            loss, gw, gb = work.l1_gradients(xs[idx], ys[idx])
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch + 1}, step {step}")
            lr = cfg.lr
            if cfg.lr_final is not None:
                lr = cfg.lr_final + 0.5 * (cfg.lr - cfg.lr_final) * (1 + np.cos(np.pi * step / total))
            step += 1
            c1, c2 = 1 - b1**step, 1 - b2**step
            for p, g, mi, vi in zip(params, gw + gb, m, v):
                mi *= b1
                mi += (1 - b1) * g
                vi *= b2
                vi += (1 - b2) * g * g
                p -= lr * (mi / c1) / (np.sqrt(vi / c2) + eps)
        raw = _destandardize(work, mx, sx, my, sy)
        result.train_l1.append(mean_l1(raw, tr))
        result.val_l1.append(mean_l1(raw, val))
        if not np.isfinite(result.train_l1[-1]):
            raise TrainingError(f"non-finite loss after epoch {epoch + 1}")
    result.net = _destandardize(work, mx, sx, my, sy)
    return result


def axis_errors(net: DeformationNet, data: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Per-axis mean absolute error and label standard deviation."""
    err = np.abs(net.forward(data.inputs) - data.labels).mean(0)
    return err, data.labels.std(0)


# --------------------------------------------------------------- oracle --

class SpringLawNet:
    """The simulator's undamped mount law exposed with the network interface.

    Useful as a perfect model when checking the estimator; exact only when
    the simulated mount has no damping and an isotropic inertia (no
    gyroscopic term).
    """

    def __init__(self, params, h: float = 1e-6):
        self.params = params.undamped()
        self.h = h

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        rel = geo.se3_exp(x)
        w = spring_wrench(self.params, rel)
        R = rel[..., :3, :3]
        lin = np.einsum("...ji,...j->...i", R, w[..., :3]) / self.params.mass
        ang = w[..., 3:] / np.asarray(self.params.inertia)
        return np.concatenate([lin, ang], axis=-1)

    __call__ = forward

    def input_jacobian(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        cols = []
        for i in range(x.shape[-1]):
            e = np.zeros(x.shape[-1])
            e[i] = self.h
            cols.append((self.forward(x + e) - self.forward(x - e)) / (2 * self.h))
        return np.stack(cols, axis=-1)

    def forward_jacobian(self, x):
        return self.forward(x), self.input_jacobian(x)
