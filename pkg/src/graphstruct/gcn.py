"""Two-layer graph convolutional network, its regularized training loss,
the unregularized validation loss, dropout, and the sample-averaged
predictor."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import graphgen, numcore as nc
from .numcore import Node, Rng, SparseMatrix, Tape


class GcnError(ValueError):
    pass


@dataclass
class GcnParams:
    w1: np.ndarray
    w2: np.ndarray

    @property
    def hidden(self) -> int:
        return self.w1.shape[1]

    @classmethod
    def init(cls, n_features: int, hidden: int, n_classes: int, rng: Rng) -> "GcnParams":
        """Uniform Glorot-style initialization."""

        def glorot(fan_in, fan_out):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            return (rng.uniform((fan_in, fan_out)) * 2.0 - 1.0) * limit

        return cls(glorot(n_features, hidden), glorot(hidden, n_classes))

    def copy(self) -> "GcnParams":
        return GcnParams(self.w1.copy(), self.w2.copy())


@dataclass
class LossConfig:
    rho: float = 5e-4
    dropout_beta: float = 0.5

    def __post_init__(self):
        if self.rho < 0:
            raise GcnError("rho must be nonnegative")
        if not 0.0 <= self.dropout_beta < 1.0:
            raise GcnError("dropout_beta must be in [0, 1)")


@dataclass
class LabeledSplit:
    """Partial labels plus disjoint train / val(A) / val(B) / test masks.

    Test labels are behind an access counter so experiment drivers can
    assert they were only read for final reporting.
    """

    labels: np.ndarray
    train_mask: np.ndarray
    val_a_mask: np.ndarray
    val_b_mask: np.ndarray
    test_mask: np.ndarray
    test_label_reads: int = 0

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        for name in ("train_mask", "val_a_mask", "val_b_mask", "test_mask"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.int64))
        masks = [self.train_mask, self.val_a_mask, self.val_b_mask, self.test_mask]
        seen = set()
        for m in masks:
            s = set(m.tolist())
            if seen & s:
                raise GcnError("masks must be pairwise disjoint")
            seen |= s
        for m in masks:
            if len(m) and np.any(self.labels[m] < 0):
                raise GcnError("every masked node needs a label")

    def mask(self, kind: str) -> np.ndarray:
        return {
            "train": self.train_mask,
            "val_a": self.val_a_mask,
            "val_b": self.val_b_mask,
            "val": np.concatenate([self.val_a_mask, self.val_b_mask]),
            "test": self.test_mask,
        }[kind]

    def labels_for(self, kind: str) -> np.ndarray:
        if kind == "test":
            self.test_label_reads += 1
        return self.labels[self.mask(kind)]

    def n_classes(self) -> int:
        return int(self.labels.max()) + 1

    def one_hot(self, kind: str) -> np.ndarray:
        """N x C matrix, one-hot on the masked rows, zero elsewhere."""
        n = len(self.labels)
        y = np.zeros((n, self.n_classes()))
        m = self.mask(kind)
        y[m, self.labels_for(kind)] = 1.0
        return y


@dataclass
class DropoutMasks:
    """Inverted-dropout masks for the layer inputs, stored for replay."""

    x_mask: np.ndarray
    h_mask: np.ndarray

    @classmethod
    def draw(cls, n: int, n_features: int, hidden: int, beta: float, rng: Rng) -> "DropoutMasks":
        keep = 1.0 - beta
        xm = (rng.uniform((n, n_features)) < keep).astype(np.float64) / keep
        hm = (rng.uniform((n, hidden)) < keep).astype(np.float64) / keep
        return cls(xm, hm)


def _prop(a_hat, h):
    """Multiply by the normalized adjacency: sparse constant or dense node."""
    if isinstance(a_hat, (SparseMatrix, sp.spmatrix)) or sp.issparse(a_hat):
        return nc.spmm(a_hat, h)
    return nc.matmul(a_hat, h)


def _logits(w1, w2, x, a_hat, masks: DropoutMasks | None):
    if masks is not None:
        x = nc.mul(x, masks.x_mask)
    h = nc.relu(_prop(a_hat, nc.matmul(x, w1)))
    if masks is not None:
        h = nc.mul(h, masks.h_mask)
    return _prop(a_hat, nc.matmul(h, w2))


def forward(params_or_nodes, x, a_hat, dropout_masks: DropoutMasks | None = None):
    """Class probabilities, row-stochastic.

    Accepts either a GcnParams (plain arrays) or a (w1, w2) pair of tape
    nodes; a_hat may be a sparse constant or a dense node.
    """
    if isinstance(params_or_nodes, GcnParams):
        w1, w2 = params_or_nodes.w1, params_or_nodes.w2
    else:
        w1, w2 = params_or_nodes
    return nc.row_softmax(_logits(w1, w2, x, a_hat, dropout_masks))


def forward_np(params: GcnParams, x: np.ndarray, a_hat,
               dropout_masks: DropoutMasks | None = None) -> np.ndarray:
    """Tape-free forward pass for prediction and evaluation."""
    a = a_hat.to_csr() if isinstance(a_hat, SparseMatrix) else a_hat
    xv = np.asarray(x)
    if dropout_masks is not None:
        xv = xv * dropout_masks.x_mask
    h = np.maximum(a @ (xv @ params.w1), 0.0)
    if dropout_masks is not None:
        h = h * dropout_masks.h_mask
    z = a @ (h @ params.w2)
    z -= z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _masked_cross_entropy(logits, y_onehot):
    logp = nc.row_log_softmax(logits)
    return nc.neg(nc.sumall(nc.mul(logp, y_onehot)))


def inner_loss(w_nodes, x, a_hat, split: LabeledSplit, cfg: LossConfig,
               dropout_masks: DropoutMasks | None = None):
    """Training loss: cross-entropy over the train mask plus rho * ||W1||^2.

    Fully taped; gradients w.r.t. the weights and (for a dense a_hat
    node) every adjacency entry are available from nc.grad.
    """
    if len(split.train_mask) == 0:
        raise GcnError("empty training mask")
    w1, w2 = w_nodes
    logits = _logits(w1, w2, x, a_hat, dropout_masks)
    loss = _masked_cross_entropy(logits, split.one_hot("train"))
    if cfg.rho > 0.0:
        loss = nc.add(loss, nc.scale(nc.sumall(nc.mul(w1, w1)), cfg.rho))
    return loss


def outer_loss(w_nodes, x, a_hat, split: LabeledSplit, mask_kind: str = "val_a"):
    """Validation objective: unregularized cross-entropy on val(A), no
    dropout."""
    if len(split.mask(mask_kind)) == 0:
        raise GcnError(f"empty {mask_kind} mask")
    w1, w2 = w_nodes
    logits = _logits(w1, w2, x, a_hat, None)
    return _masked_cross_entropy(logits, split.one_hot(mask_kind))


def predict_empirical(params: GcnParams, x: np.ndarray, dist, s: int, rng: Rng) -> np.ndarray:
    """Mean forward output over s graphs sampled from dist (no dropout).

    The samples here are never replayed, so the adjacency draws come
    straight from the caller's stream and stay dense throughout.
    """
    if s < 1:
        raise GcnError("s must be >= 1")
    n = x.shape[0]
    eye = np.eye(n)
    acc = None
    for _ in range(s):
        a = (rng.uniform((n, n)) < dist.theta).astype(np.float64)
        if dist.symmetric:
            upper = np.triu(a, 1)
            a = upper + upper.T
        if dist.diag_zero:
            np.fill_diagonal(a, 0.0)
        dinv = 1.0 / np.sqrt(1.0 + a.sum(axis=1))
        a_hat = (a + eye) * np.outer(dinv, dinv)
        p = forward_np(params, x, a_hat)
        acc = p if acc is None else acc + p
    return acc / float(s)


def accuracy(predictions: np.ndarray, split: LabeledSplit, mask_kind: str) -> float:
    """Fraction of masked nodes whose argmax class matches the label.

    Argmax ties break toward the lowest class index.
    """
    m = split.mask(mask_kind)
    if len(m) == 0:
        raise GcnError("empty mask")
    pred = np.argmax(predictions[m], axis=1)
    return float(np.mean(pred == split.labels_for(mask_kind)))
