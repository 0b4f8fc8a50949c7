"""Shared-backbone MLP predicting (bgt0, k, streaming) from the 41 head features.

Plain numpy with hand-written backprop and Adam. Outputs 0 and 1 are
regressions, output 2 is the streaming logit; the three tasks share every
hidden layer and split only at the last linear map.
"""
import struct
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import FluxError
from .features import N_FEATURES, FeatureNorms, normalize

HIDDEN = (256, 384)
MODEL_MAGIC = b"FXP1"
MODEL_VERSION = 1
LABEL_MAGIC = b"FXL1"
LABEL_VERSION = 1


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class PredictorModel:
    def __init__(self, weights, norms=None, history=None):
        self.weights = [(np.asarray(W, dtype=np.float64), np.asarray(b, dtype=np.float64)) for W, b in weights]
        self.norms = norms
        self.history = history or []

    @classmethod
    def initialize(cls, seed=0, sizes=(N_FEATURES, *HIDDEN, 3)):
        rng = np.random.default_rng(seed)
        weights = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append((rng.uniform(-limit, limit, (fan_in, fan_out)), np.zeros(fan_out)))
        return cls(weights)

    @classmethod
    def zeros(cls, sizes=(N_FEATURES, *HIDDEN, 3)):
        return cls([(np.zeros((a, b)), np.zeros(b)) for a, b in zip(sizes[:-1], sizes[1:])])

    @property
    def sizes(self):
        return (self.weights[0][0].shape[0],) + tuple(W.shape[1] for W, _ in self.weights)

    def n_params(self):
        return sum(W.size + b.size for W, b in self.weights)

    def raw(self, X):
        """Pre-activation outputs [N, 3] for normalised inputs."""
        h = np.asarray(X, dtype=np.float64)
        for W, b in self.weights[:-1]:
            h = np.tanh(h @ W + b)
        W, b = self.weights[-1]
        return h @ W + b

    def predict(self, X, normalized=False):
        """(bgt0 in [0, 1], k, streaming probability) for each row."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if not np.isfinite(X).all():
            raise FluxError("non-finite", "feature input contains NaN or inf")
        if not normalized and self.norms is not None:
            X = normalize(X, self.norms)
        r = self.raw(X)
        return np.clip(r[:, 0], 0.0, 1.0), r[:, 1], _sigmoid(r[:, 2])

    def flat(self):
        return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in self.weights])

    def with_flat(self, theta):
        out, i = [], 0
        for W, b in self.weights:
            Wn = theta[i:i + W.size].reshape(W.shape)
            i += W.size
            out.append((Wn, theta[i:i + b.size].copy()))
            i += b.size
        return PredictorModel(out, self.norms)


def forward(model, fv):
    """Single normalised feature vector -> (bgt0_hat, k_hat, s_prob)."""
    b, k, s = model.predict(np.asarray(fv, dtype=np.float64)[None, :], normalized=True)
    return float(b[0]), float(k[0]), float(s[0])


@dataclass(frozen=True)
class TrainConfig:
    w_bgt: float = 1.0
    w_k: float = 1.0
    w_s: float = 1.0
    batch_size: int = 256
    steps: int = 3000
    lr: float = 1e-3
    lr_floor: float = 0.05
    seed: int = 0
    val_fraction: float = 0.2
    log_every: int = 100

    def __post_init__(self):
        if min(self.w_bgt, self.w_k, self.w_s) <= 0:
            raise FluxError("bad-config", "loss weights must be positive")


def loss_and_grads(model, X, Y, cfg=TrainConfig()):
    """Multi-task loss and its gradient with respect to every weight and bias."""
    acts = [np.asarray(X, dtype=np.float64)]
    for W, b in model.weights[:-1]:
        acts.append(np.tanh(acts[-1] @ W + b))
    W, b = model.weights[-1]
    r = acts[-1] @ W + b
    n = X.shape[0]
    e0 = r[:, 0] - Y[:, 0]
    e1 = r[:, 1] - Y[:, 1]
    z, y = r[:, 2], Y[:, 2]
    bce = np.logaddexp(0.0, z) - y * z
    loss = cfg.w_bgt * np.mean(e0 ** 2) + cfg.w_k * np.mean(e1 ** 2) + cfg.w_s * np.mean(bce)

    dr = np.stack([2 * cfg.w_bgt * e0, 2 * cfg.w_k * e1, cfg.w_s * (_sigmoid(z) - y)], axis=1) / n
    grads = []
    delta = dr
    for i in range(len(model.weights) - 1, -1, -1):
        W, _ = model.weights[i]
        grads.append((acts[i].T @ delta, delta.sum(axis=0)))
        if i:
            delta = (delta @ W.T) * (1.0 - acts[i] ** 2)
    return float(loss), grads[::-1]


@dataclass
class LabelDataset:
    """Rows of (sample, layer, head, step) with raw features and (bgt0, k, s) labels."""

    sample: np.ndarray
    layer: np.ndarray
    head: np.ndarray
    step: np.ndarray
    X: np.ndarray
    Y: np.ndarray

    def __len__(self):
        return self.X.shape[0]

    def subset(self, mask):
        return LabelDataset(*(getattr(self, f)[mask] for f in ("sample", "layer", "head", "step", "X", "Y")))

    @classmethod
    def concat(cls, parts):
        return cls(*(np.concatenate([getattr(p, f) for p in parts])
                     for f in ("sample", "layer", "head", "step", "X", "Y")))


def save_labels(dataset, path):
    """Label file: ``FXL1``, uint32 version/rows/features, then per row f32
    (sample, layer, head, step, features..., bgt0, k, s)."""
    n, d = dataset.X.shape
    ids = np.stack([dataset.sample, dataset.layer, dataset.head, dataset.step], axis=1)
    rows = np.concatenate([ids.astype(np.float64), dataset.X, dataset.Y], axis=1)
    with open(path, "wb") as f:
        f.write(LABEL_MAGIC + struct.pack("<III", LABEL_VERSION, n, d))
        f.write(rows.astype("<f4").tobytes())


def load_labels(path):
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 16 or raw[:4] != LABEL_MAGIC:
        raise FluxError("corrupt-labels", f"bad magic {raw[:4]!r}")
    version, n, d = struct.unpack_from("<III", raw, 4)
    if version != LABEL_VERSION:
        raise FluxError("version-mismatch", f"label version {version}, expected {LABEL_VERSION}")
    if d != N_FEATURES:
        raise FluxError("version-mismatch", f"label file has {d} features, expected {N_FEATURES}")
    width = 4 + d + 3
    if len(raw) != 16 + 4 * n * width:
        raise FluxError("corrupt-labels", f"expected {16 + 4 * n * width} bytes, got {len(raw)}")
    rows = np.frombuffer(raw, "<f4", offset=16).reshape(n, width).astype(np.float64)
    ids = rows[:, :4].astype(np.int64)
    return LabelDataset(ids[:, 0], ids[:, 1], ids[:, 2], ids[:, 3], rows[:, 4:4 + d], rows[:, 4 + d:])


def split_by_sample(dataset, val_fraction, seed=0):
    """Train/validation split on whole samples so no sample straddles both sides."""
    ids = np.unique(dataset.sample)
    rng = np.random.default_rng(seed)
    n_val = max(1, int(round(val_fraction * ids.size))) if ids.size > 1 else 0
    val_ids = rng.permutation(ids)[:n_val]
    is_val = np.isin(dataset.sample, val_ids)
    return dataset.subset(~is_val), dataset.subset(is_val)


def train(dataset, cfg=TrainConfig()):
    if len(dataset) == 0:
        raise FluxError("no-data")
    train_set, val_set = split_by_sample(dataset, cfg.val_fraction, cfg.seed)
    norms = FeatureNorms.fit(train_set.X)
    Xt = normalize(train_set.X, norms)
    # regression targets are standardised while training and the scale is folded
    # back into the last layer afterwards, so small-variance targets (k) still get gradient
    y_mu = np.zeros(3)
    y_sd = np.ones(3)
    y_mu[:2] = train_set.Y[:, :2].mean(axis=0)
    y_sd[:2] = np.where(train_set.Y[:, :2].std(axis=0) > 0, train_set.Y[:, :2].std(axis=0), 1.0)
    Yt = (train_set.Y.astype(np.float64) - y_mu) / y_sd
    Xv = normalize(val_set.X, norms) if len(val_set) else Xt
    Yv = (val_set.Y.astype(np.float64) - y_mu) / y_sd if len(val_set) else Yt

    rng = np.random.default_rng(cfg.seed)
    model = PredictorModel.initialize(cfg.seed)
    model.norms = norms
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    m = [np.zeros_like(p) for pair in model.weights for p in pair]
    v = [np.zeros_like(p) for pair in model.weights for p in pair]

    initial_val, _ = loss_and_grads(model, Xv, Yv, cfg)
    history = [(0, loss_and_grads(model, Xt, Yt, cfg)[0], initial_val)]
    order = rng.permutation(len(Xt))
    pos = 0
    for step in range(1, cfg.steps + 1):
        if pos + cfg.batch_size > len(order):
            order = rng.permutation(len(Xt))
            pos = 0
        idx = order[pos:pos + cfg.batch_size]
        pos += cfg.batch_size
        loss, grads = loss_and_grads(model, Xt[idx], Yt[idx], cfg)
        lr = cfg.lr * (cfg.lr_floor + (1 - cfg.lr_floor) * 0.5 * (1 + np.cos(np.pi * step / cfg.steps)))
        params = [p for pair in model.weights for p in pair]
        flat_grads = [g for pair in grads for g in pair]
        for i, g in enumerate(flat_grads):
            m[i] = beta1 * m[i] + (1 - beta1) * g
            v[i] = beta2 * v[i] + (1 - beta2) * g * g
            mhat = m[i] / (1 - beta1 ** step)
            vhat = v[i] / (1 - beta2 ** step)
            params[i] = params[i] - lr * mhat / (np.sqrt(vhat) + eps)
        model.weights = list(zip(params[::2], params[1::2]))
        if step % cfg.log_every == 0 or step == cfg.steps:
            history.append((step, loss, loss_and_grads(model, Xv, Yv, cfg)[0]))
    W, b = model.weights[-1]
    model.weights[-1] = (W * y_sd, b * y_sd + y_mu)
    model.history = history
    model.train_samples = np.unique(train_set.sample)
    model.val_samples = np.unique(val_set.sample)
    return model


def roc_auc(y, score):
    y = np.asarray(y).astype(bool)
    n_pos, n_neg = y.sum(), (~y).sum()
    if n_pos == 0 or n_neg == 0:
        return 0.5
    ranks = rankdata(score)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


class MeanPredictor:
    """Baseline that predicts label means (and the majority streaming class probability)."""

    def __init__(self, Y):
        Y = np.asarray(Y, dtype=np.float64)
        self.means = Y.mean(axis=0)

    def predict(self, X, normalized=False):
        n = np.atleast_2d(X).shape[0]
        return (np.full(n, self.means[0]), np.full(n, self.means[1]), np.full(n, self.means[2]))


def evaluate(model, X, Y):
    Y = np.asarray(Y, dtype=np.float64)
    bgt0, k, s = model.predict(X)
    return {
        "mse_bgt0": float(np.mean((bgt0 - Y[:, 0]) ** 2)),
        "mse_k": float(np.mean((k - Y[:, 1]) ** 2)),
        "s_accuracy": float(np.mean((s >= 0.5) == (Y[:, 2] >= 0.5))),
        "s_auc": roc_auc(Y[:, 2] >= 0.5, s),
    }


def save_model(model, path):
    """Binary model file: ``FXP1``, version, layer shapes, f32 parameters, f32 (mean, std) pairs."""
    with open(path, "wb") as f:
        f.write(MODEL_MAGIC + struct.pack("<II", MODEL_VERSION, len(model.weights)))
        for W, _ in model.weights:
            f.write(struct.pack("<II", *W.shape))
        for W, b in model.weights:
            f.write(W.astype("<f4").tobytes())
            f.write(b.astype("<f4").tobytes())
        n = len(model.norms) if model.norms is not None else 0
        f.write(struct.pack("<I", n))
        if n:
            f.write(np.stack([model.norms.mean, model.norms.std], axis=1).astype("<f4").tobytes())


def load_model(path):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != MODEL_MAGIC:
        raise FluxError("corrupt-model", f"bad magic {raw[:4]!r}")
    version, n_layers = struct.unpack_from("<II", raw, 4)
    if version != MODEL_VERSION:
        raise FluxError("version-mismatch", f"model version {version}, expected {MODEL_VERSION}")
    pos = 12
    shapes = []
    for _ in range(n_layers):
        shapes.append(struct.unpack_from("<II", raw, pos))
        pos += 8
    weights = []
    for a, b in shapes:
        W = np.frombuffer(raw, "<f4", a * b, pos).reshape(a, b)
        pos += 4 * a * b
        bias = np.frombuffer(raw, "<f4", b, pos)
        pos += 4 * b
        weights.append((W, bias))
    (n,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    norms = None
    if n:
        pairs = np.frombuffer(raw, "<f4", 2 * n, pos).reshape(n, 2).astype(np.float64)
        pos += 8 * n
        norms = FeatureNorms(pairs[:, 0], pairs[:, 1])
    if pos != len(raw):
        raise FluxError("corrupt-model", f"{len(raw) - pos} trailing bytes")
    return PredictorModel(weights, norms)
