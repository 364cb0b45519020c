"""Desk-scale model substrate and the semi-supervised local training loop.

The classifier is a one-hidden-layer tanh perceptron (or, with
``hidden_width=0``, plain multinomial logistic regression, which is convex
and therefore usable as a ground truth in gradient/descent tests) over
flattened H x W x ch grids.  On top of it sit the two training paths:

* supervised steps on labeled ground-station data (weak augmentation,
  cross-entropy), and
* the unlabeled client path: pseudo-label the local shard, keep
  predictions whose confidence clears the threshold, build an equal-size
  patch-mixed set, then descend on the weighted two-term loss.

Shards live on disk as little-endian binary files: magic ``SFSD``,
version u8, count u32, H u8, W u8, ch u8, num_classes u8, then per sample
the float32 features followed by a label byte (255 = unlabeled).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .domain import SeededRng, ensure_finite

SHARD_MAGIC = b"SFSD"
SHARD_VERSION = 1
_SHARD_HEADER_FMT = "<4sBIBBBB"
UNLABELED = 255


class ShardFormatError(ValueError):
    """Raised on malformed or truncated shard files."""


@dataclass(frozen=True)
class Sample:
    """One flattened grid with an optional class label."""

    grid: np.ndarray
    label: Optional[int] = None


@dataclass
class Shard:
    """A batch of samples stored as arrays; label -1 marks unlabeled rows."""

    features: np.ndarray   # (N, H*W*ch) float64, row-major flattened grids
    labels: np.ndarray     # (N,) int16, -1 = unlabeled
    height: int
    width: int
    channels: int
    num_classes: int

    def __len__(self) -> int:
        return int(self.features.shape[0])

    @property
    def n_features(self) -> int:
        return self.height * self.width * self.channels

    def grids(self) -> np.ndarray:
        return self.features.reshape(len(self), self.height, self.width, self.channels)

    def sample(self, i: int) -> Sample:
        label = int(self.labels[i])
        return Sample(grid=self.features[i].copy(), label=None if label < 0 else label)


def write_shard(shard: Shard, path: str) -> None:
    """Serialize a shard to the binary on-disk layout."""
    n = len(shard)
    header = struct.pack(_SHARD_HEADER_FMT, SHARD_MAGIC, SHARD_VERSION, n,
                         shard.height, shard.width, shard.channels,
                         shard.num_classes)
    record = np.dtype([("f", "<f4", (shard.n_features,)), ("l", "u1")])
    body = np.zeros(n, dtype=record)
    body["f"] = shard.features.astype("<f4")
    labels = shard.labels.astype(np.int64)
    body["l"] = np.where(labels < 0, UNLABELED, labels).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(body.tobytes())


def read_shard(path: str) -> Shard:
    """Parse a shard file; raises ShardFormatError rather than partially loading."""
    with open(path, "rb") as fh:
        data = fh.read()
    header_size = struct.calcsize(_SHARD_HEADER_FMT)
    if len(data) < header_size:
        raise ShardFormatError("truncated header")
    magic, version, count, height, width, channels, num_classes = \
        struct.unpack_from(_SHARD_HEADER_FMT, data)
    if magic != SHARD_MAGIC:
        raise ShardFormatError(f"bad magic {magic!r}")
    if version != SHARD_VERSION:
        raise ShardFormatError(f"unsupported version {version}")
    n_features = height * width * channels
    record = np.dtype([("f", "<f4", (n_features,)), ("l", "u1")])
    expected = header_size + count * record.itemsize
    if len(data) != expected:
        raise ShardFormatError(f"file length {len(data)} != expected {expected}")
    body = np.frombuffer(data, dtype=record, offset=header_size)
    labels = body["l"].astype(np.int16)
    labels = np.where(labels == UNLABELED, np.int16(-1), labels)
    return Shard(features=body["f"].astype(np.float64), labels=labels,
                 height=height, width=width, channels=channels,
                 num_classes=num_classes)


# --------------------------------------------------------------------------
# Augmentations
# --------------------------------------------------------------------------

def hflip(grid: np.ndarray) -> np.ndarray:
    """Mirror a (H, W, ch) grid horizontally; applying it twice is the identity."""
    return grid[:, ::-1, :].copy()


def shift_edge_pad(grid: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Translate a grid by (dy, dx) pixels, replicating edge values."""
    h, w = grid.shape[0], grid.shape[1]
    rows = np.clip(np.arange(h) - dy, 0, h - 1)
    cols = np.clip(np.arange(w) - dx, 0, w - 1)
    return grid[rows[:, None], cols[None, :], :]


def weak_augment_batch(x: np.ndarray, rng: SeededRng,
                       max_shift_frac: float = 0.125) -> np.ndarray:
    """Per-sample random horizontal flip plus small random shift with edge padding."""
    b, h, w, _ = x.shape
    sh = int(h * max_shift_frac)
    sw = int(w * max_shift_frac)
    flips = rng.gen.random(b) < 0.5
    dys = rng.gen.integers(-sh, sh + 1, size=b)
    dxs = rng.gen.integers(-sw, sw + 1, size=b)
    out = np.where(flips[:, None, None, None], x[:, :, ::-1, :], x)
    rows = np.clip(np.arange(h)[None, :] - dys[:, None], 0, h - 1)
    cols = np.clip(np.arange(w)[None, :] - dxs[:, None], 0, w - 1)
    return out[np.arange(b)[:, None, None], rows[:, :, None], cols[:, None, :], :]


def weak_augment(grid: np.ndarray, rng: SeededRng,
                 max_shift_frac: float = 0.125) -> np.ndarray:
    return weak_augment_batch(grid[None], rng, max_shift_frac)[0]


def strong_augment_batch(x: np.ndarray, rng: SeededRng,
                         noise_scale: float = 0.1,
                         cutout_area: float = 0.25) -> np.ndarray:
    """Weak augmentation, additive Gaussian noise, and a zeroed random patch.

    Noise sigma is ``noise_scale`` of each sample's own feature std; the
    patch covers ``cutout_area`` of the grid.  With both set to zero this
    reduces exactly to the weak policy.
    """
    out = weak_augment_batch(x, rng)
    b, h, w, _ = x.shape
    if noise_scale > 0.0:
        stds = out.reshape(b, -1).std(axis=1)
        noise = rng.gen.standard_normal(out.shape)
        out = out + (noise_scale * stds)[:, None, None, None] * noise
    if cutout_area > 0.0:
        ph = int(round(h * math.sqrt(cutout_area)))
        pw = int(round(w * math.sqrt(cutout_area)))
        tops = rng.gen.integers(0, h - ph + 1, size=b)
        lefts = rng.gen.integers(0, w - pw + 1, size=b)
        for i in range(b):
            out[i, tops[i]:tops[i] + ph, lefts[i]:lefts[i] + pw, :] = 0.0
    return out


def strong_augment(grid: np.ndarray, rng: SeededRng,
                   noise_scale: float = 0.1,
                   cutout_area: float = 0.25) -> np.ndarray:
    return strong_augment_batch(grid[None], rng, noise_scale, cutout_area)[0]


def mix_pair(pair1: tuple[np.ndarray, np.ndarray],
             pair2: tuple[np.ndarray, np.ndarray],
             lam: float, rng: SeededRng) -> tuple[np.ndarray, np.ndarray]:
    """Patch-mix two (grid, label-vector) pairs at a given mixing ratio.

    A rectangle of area fraction ``lam`` at a random location keeps the
    first grid; the rest comes from the second.  Labels mix linearly with
    the same ``lam``.  Rectangle dimensions are rounded, so realized
    area matches ``lam`` up to pixel quantization.
    """
    x1, y1 = pair1
    x2, y2 = pair2
    if x1.shape != x2.shape:
        raise ValueError("grids must share a shape")
    h, w = x1.shape[0], x1.shape[1]
    rh = int(round(h * math.sqrt(lam)))
    rw = min(int(round(lam * h * w / rh)) if rh > 0 else 0, w)
    top = int(rng.gen.integers(0, h - rh + 1))
    left = int(rng.gen.integers(0, w - rw + 1))
    x_cut = x2.copy()
    x_cut[top:top + rh, left:left + rw, :] = x1[top:top + rh, left:left + rw, :]
    y_cut = lam * y1 + (1.0 - lam) * y2
    return x_cut, y_cut


def cutmix(pair1: tuple[np.ndarray, np.ndarray],
           pair2: tuple[np.ndarray, np.ndarray],
           mu: float, rng: SeededRng) -> tuple[np.ndarray, np.ndarray]:
    """Patch-mix with ``lam ~ Beta(mu, mu)``."""
    lam = float(rng.gen.beta(mu, mu))
    return mix_pair(pair1, pair2, lam, rng)


# --------------------------------------------------------------------------
# Classifier substrate
# --------------------------------------------------------------------------

class MlpClassifier:
    """Softmax classifier over flat feature vectors, parameters as one flat vector.

    ``hidden_width > 0`` gives a one-hidden-layer tanh network;
    ``hidden_width = 0`` degenerates to multinomial logistic regression.
    """

    def __init__(self, n_features: int, num_classes: int, hidden_width: int = 32):
        if n_features < 1 or num_classes < 2 or hidden_width < 0:
            raise ValueError("bad substrate shape")
        self.n_features = n_features
        self.num_classes = num_classes
        self.hidden_width = hidden_width
        if hidden_width > 0:
            self.param_count = (n_features * hidden_width + hidden_width
                                + hidden_width * num_classes + num_classes)
        else:
            self.param_count = n_features * num_classes + num_classes

    def init_params(self, rng: SeededRng) -> np.ndarray:
        w = np.zeros(self.param_count)
        if self.hidden_width > 0:
            w1, _, w2, _ = self._split(w)
            w1[:] = rng.gen.standard_normal(w1.shape) / math.sqrt(self.n_features)
            w2[:] = rng.gen.standard_normal(w2.shape) / math.sqrt(self.hidden_width)
        else:
            wl, _ = self._split(w)
            wl[:] = 0.01 * rng.gen.standard_normal(wl.shape)
        return w

    def _split(self, params: np.ndarray):
        f, h, c = self.n_features, self.hidden_width, self.num_classes
        if h > 0:
            o1 = f * h
            o2 = o1 + h
            o3 = o2 + h * c
            return (params[:o1].reshape(f, h), params[o1:o2],
                    params[o2:o3].reshape(h, c), params[o3:])
        o1 = f * c
        return (params[:o1].reshape(f, c), params[o1:])

    def _logits(self, params: np.ndarray, x: np.ndarray):
        if self.hidden_width > 0:
            w1, b1, w2, b2 = self._split(params)
            a1 = np.tanh(x @ w1 + b1)
            return a1 @ w2 + b2, a1
        wl, bl = self._split(params)
        return x @ wl + bl, None

    def forward(self, params: np.ndarray, x: np.ndarray) -> np.ndarray:
        """Class probabilities for a (B, n_features) batch; rows lie on the simplex."""
        logits, _ = self._logits(params, x)
        logits = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        return e / e.sum(axis=1, keepdims=True)

    def loss(self, params: np.ndarray, x: np.ndarray, targets: np.ndarray) -> float:
        """Mean cross-entropy against soft target rows."""
        logits, _ = self._logits(params, x)
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        return float(-(targets * log_probs).sum() / x.shape[0])

    def loss_and_grad(self, params: np.ndarray, x: np.ndarray,
                      targets: np.ndarray) -> tuple[float, np.ndarray]:
        b = x.shape[0]
        logits, a1 = self._logits(params, x)
        shifted = logits - logits.max(axis=1, keepdims=True)
        exp = np.exp(shifted)
        probs = exp / exp.sum(axis=1, keepdims=True)
        log_probs = shifted - np.log(exp.sum(axis=1, keepdims=True))
        loss = float(-(targets * log_probs).sum() / b)
        g_logits = (probs - targets) / b
        grad = np.zeros_like(params)
        if self.hidden_width > 0:
            w1, _, w2, _ = self._split(params)
            gw1, gb1, gw2, gb2 = self._split(grad)
            gw2[:] = a1.T @ g_logits
            gb2[:] = g_logits.sum(axis=0)
            g_a1 = g_logits @ w2.T
            g_z1 = g_a1 * (1.0 - a1 * a1)
            gw1[:] = x.T @ g_z1
            gb1[:] = g_z1.sum(axis=0)
        else:
            gwl, gbl = self._split(grad)
            gwl[:] = x.T @ g_logits
            gbl[:] = g_logits.sum(axis=0)
        return loss, grad

    def predict(self, params: np.ndarray, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.forward(params, x), axis=1)


def build_model(n_features: int, num_classes: int, kind: str = "mlp",
                hidden_width: int = 32) -> MlpClassifier:
    width = hidden_width if kind == "mlp" else 0
    return MlpClassifier(n_features, num_classes, hidden_width=width)


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros((len(labels), num_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


class SgdMomentum:
    """Classic heavy-ball SGD; velocity lives for one training phase."""

    def __init__(self, lr: float, momentum: float, dim: int):
        self.lr = lr
        self.momentum = momentum
        self.velocity = np.zeros(dim)

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.velocity = self.momentum * self.velocity + grad
        return params - self.lr * self.velocity


# --------------------------------------------------------------------------
# Training paths
# --------------------------------------------------------------------------

def supervised_step(model: MlpClassifier, params: np.ndarray,
                    grids: np.ndarray, labels: np.ndarray,
                    opt: SgdMomentum, rng: SeededRng) -> tuple[np.ndarray, float]:
    """One descent step on cross-entropy over a weakly augmented labeled batch."""
    if grids.shape[0] == 0:
        raise ValueError("empty batch")
    x = weak_augment_batch(grids, rng).reshape(grids.shape[0], -1)
    targets = one_hot(labels, model.num_classes)
    loss, grad = model.loss_and_grad(params, x, targets)
    return opt.step(params, grad), loss


def supervised_train(model: MlpClassifier, shard: Shard, params: np.ndarray,
                     rng: SeededRng, *, epochs: int, lr: float,
                     momentum: float, batch_size: int) -> tuple[np.ndarray, list[float], int]:
    """Epochs of mini-batch supervised training; returns (params, epoch losses, samples seen)."""
    n = len(shard)
    if n == 0:
        raise ValueError("labeled shard is empty")
    grids = shard.grids()
    labels = shard.labels.astype(np.int64)
    opt = SgdMomentum(lr, momentum, model.param_count)
    w = params.copy()
    epoch_losses: list[float] = []
    for _ in range(epochs):
        perm = rng.gen.permutation(n)
        batch_losses = []
        for start in range(0, n, batch_size):
            idx = perm[start:start + batch_size]
            w, loss = supervised_step(model, w, grids[idx], labels[idx], opt, rng)
            batch_losses.append(loss)
        epoch_losses.append(float(np.mean(batch_losses)))
    ensure_finite(w, "supervised-trained parameters")
    return w, epoch_losses, epochs * n


def pseudo_label_batch(model: MlpClassifier, params: np.ndarray,
                       grids: np.ndarray, rng: SeededRng) -> np.ndarray:
    """Model confidence over weakly augmented inputs."""
    x = weak_augment_batch(grids, rng).reshape(grids.shape[0], -1)
    return model.forward(params, x)


def pseudo_label(model: MlpClassifier, params: np.ndarray,
                 grid: np.ndarray, rng: SeededRng) -> np.ndarray:
    return pseudo_label_batch(model, params, grid[None], rng)[0]


@dataclass
class PseudoLabeledSet:
    """Confident pseudo-labeled grids: soft scores kept for mixing, hard targets for loss."""

    grids: np.ndarray        # (N, H, W, ch)
    soft_labels: np.ndarray  # (N, C)
    hard_labels: np.ndarray  # (N, C) one-hot of the argmax
    threshold: float

    def __len__(self) -> int:
        return int(self.grids.shape[0])


def fixmatch_filter(grids: np.ndarray, soft_labels: np.ndarray,
                    tau: float) -> PseudoLabeledSet:
    """Retain samples whose top confidence reaches ``tau``; empty output is valid."""
    if not 0.0 < tau < 1.0:
        raise ValueError(f"confidence threshold must be in (0,1), got {tau}")
    keep = soft_labels.max(axis=1) >= tau
    kept_soft = soft_labels[keep]
    hard = np.zeros_like(kept_soft)
    if kept_soft.shape[0]:
        hard[np.arange(kept_soft.shape[0]), np.argmax(kept_soft, axis=1)] = 1.0
    return PseudoLabeledSet(grids=grids[keep], soft_labels=kept_soft,
                            hard_labels=hard, threshold=tau)


def build_mix_set(pls: PseudoLabeledSet, mu: float,
                  rng: SeededRng) -> tuple[np.ndarray, np.ndarray]:
    """Equal-size patch-mixed set sampled with replacement from the confident set."""
    n = len(pls)
    x_mix = np.empty_like(pls.grids)
    y_mix = np.empty_like(pls.soft_labels)
    for j in range(n):
        i1 = int(rng.gen.integers(n))
        i2 = int(rng.gen.integers(n))
        x_mix[j], y_mix[j] = cutmix((pls.grids[i1], pls.soft_labels[i1]),
                                    (pls.grids[i2], pls.soft_labels[i2]),
                                    mu, rng)
    return x_mix, y_mix


def semi_loss_and_grad(model: MlpClassifier, params: np.ndarray,
                       x_fix: np.ndarray, y_fix: np.ndarray,
                       x_cut: np.ndarray, y_cut: np.ndarray,
                       loss_weight: float) -> tuple[float, np.ndarray]:
    """Weighted two-term loss over already-augmented flat batches.

    ``x_fix`` carries the strongly augmented confident batch with hardened
    targets; ``x_cut`` the patch-mixed batch with soft targets.
    """
    if x_fix.shape[0] == 0:
        raise ValueError("empty confident batch; caller must have skipped")
    loss_fix, grad_fix = model.loss_and_grad(params, x_fix, y_fix)
    loss_cut, grad_cut = model.loss_and_grad(params, x_cut, y_cut)
    loss = loss_weight * loss_fix + (1.0 - loss_weight) * loss_cut
    grad = loss_weight * grad_fix + (1.0 - loss_weight) * grad_cut
    return loss, grad


def semi_loss(model: MlpClassifier, params: np.ndarray,
              x_fix: np.ndarray, y_fix: np.ndarray,
              x_cut: np.ndarray, y_cut: np.ndarray,
              loss_weight: float) -> float:
    return semi_loss_and_grad(model, params, x_fix, y_fix, x_cut, y_cut,
                              loss_weight)[0]


@dataclass
class LocalTrainResult:
    """Outcome of one client round; ``skipped`` is a value, not an error."""

    delta: Optional[np.ndarray]
    skipped: bool
    n_confident: int
    samples_processed: int
    epoch_losses: list[float]


def local_train(model: MlpClassifier, shard: Shard, w_global: np.ndarray,
                rng: SeededRng, *, epochs: int, lr: float, momentum: float,
                tau: float, mu: float, loss_weight: float,
                batch_size: int) -> LocalTrainResult:
    """Semi-supervised local update for one unlabeled client.

    Pseudo-labels and the confident/mixed sets are materialized once per
    round; an empty confident set skips the round (the pseudo-label pass
    still counts as compute).  Returns the parameter delta against the
    received model.
    """
    n = len(shard)
    grids = shard.grids()
    soft = pseudo_label_batch(model, w_global, grids, rng)
    pls = fixmatch_filter(grids, soft, tau)
    n_fix = len(pls)
    if n_fix == 0:
        return LocalTrainResult(delta=None, skipped=True, n_confident=0,
                                samples_processed=n, epoch_losses=[])
    x_mix, y_mix = build_mix_set(pls, mu, rng)
    opt = SgdMomentum(lr, momentum, model.param_count)
    w = w_global.copy()
    epoch_losses: list[float] = []
    for _ in range(epochs):
        perm = rng.gen.permutation(n_fix)
        batch_losses = []
        for start in range(0, n_fix, batch_size):
            idx = perm[start:start + batch_size]
            xb_fix = strong_augment_batch(pls.grids[idx], rng).reshape(len(idx), -1)
            yb_fix = pls.hard_labels[idx]
            xb_cut = x_mix[idx].reshape(len(idx), -1)
            yb_cut = y_mix[idx]
            loss, grad = semi_loss_and_grad(model, w, xb_fix, yb_fix,
                                            xb_cut, yb_cut, loss_weight)
            w = opt.step(w, grad)
            batch_losses.append(loss)
        epoch_losses.append(float(np.mean(batch_losses)))
    delta = ensure_finite(w - w_global, "local update")
    return LocalTrainResult(delta=delta, skipped=False, n_confident=n_fix,
                            samples_processed=n + epochs * 2 * n_fix,
                            epoch_losses=epoch_losses)


def warmup_update(model: MlpClassifier, shard: Shard, w_start: np.ndarray,
                  rng: SeededRng, *, lr: float, momentum: float,
                  batch_size: int) -> np.ndarray:
    """One unfiltered pseudo-label epoch used to seed clustering.

    Targets are hardened argmax predictions with no confidence gate, so
    the resulting delta is nonzero and reflects the shard's class mixture
    even when the received model is still poorly calibrated.
    """
    n = len(shard)
    grids = shard.grids()
    soft = pseudo_label_batch(model, w_start, grids, rng)
    hard = one_hot(np.argmax(soft, axis=1), model.num_classes)
    opt = SgdMomentum(lr, momentum, model.param_count)
    w = w_start.copy()
    perm = rng.gen.permutation(n)
    for start in range(0, n, batch_size):
        idx = perm[start:start + batch_size]
        x = weak_augment_batch(grids[idx], rng).reshape(len(idx), -1)
        _, grad = model.loss_and_grad(w, x, hard[idx])
        w = opt.step(w, grad)
    return ensure_finite(w - w_start, "warm-up update")


def evaluate(model: MlpClassifier, params: np.ndarray,
             shard: Shard) -> tuple[float, float]:
    """(accuracy, mean cross-entropy) on a labeled shard, no augmentation."""
    labels = shard.labels.astype(np.int64)
    if np.any(labels < 0):
        raise ValueError("evaluation shard must be fully labeled")
    x = shard.features
    accuracy = float(np.mean(model.predict(params, x) == labels))
    loss = model.loss(params, x, one_hot(labels, model.num_classes))
    return accuracy, loss
