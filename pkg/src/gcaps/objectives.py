"""Training objectives: margin loss, reconstruction, and L2 regularization.

The data term defaults to the margin loss on class-capsule norms; a plain
squared-error term on the norms is available as an alternative.  The L2
term covers the transformation weights and the coupling coefficients (and
any other non-bias weights), never biases.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine
from .capsules import CapsuleTensor
from .engine import Tensor, _accum, _node


@dataclass
class MarginParams:
    """Margins and the down-weight for absent classes."""

    m_plus: float = 0.9
    m_minus: float = 0.1
    lambda_down: float = 0.5

    def __post_init__(self):
        if not (0.0 < self.m_plus < 1.0):
            raise ValueError(f"m_plus must be in (0,1), got {self.m_plus}")
        if not (0.0 < self.m_minus < self.m_plus):
            raise ValueError(f"m_minus must be in (0, m_plus), got {self.m_minus}")
        if self.lambda_down < 0:
            raise ValueError("lambda_down must be >= 0")


@dataclass
class ObjectiveConfig:
    """Weights of the optional objective terms."""

    weight_decay: float = 0.0
    reconstruction_weight: float = 0.0005
    reconstruction_enabled: bool = False

    def __post_init__(self):
        if self.weight_decay < 0 or self.reconstruction_weight < 0:
            raise ValueError("objective weights must be >= 0")


def _check_one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 2 or labels.shape[1] != num_classes:
        raise ValueError(f"labels must be (batch, {num_classes}) one-hot, got {labels.shape}")
    ok = np.all((labels == 0) | (labels == 1)) and np.all(labels.sum(axis=1) == 1)
    if not ok:
        raise ValueError("labels must be exactly one-hot per row")
    return labels


def margin_loss(norms: Tensor, labels_onehot, params: MarginParams = MarginParams()) -> Tensor:
    """Mean over the batch of the per-class hinge-squared loss on capsule norms.

    Present classes are pushed above m_plus, absent classes below m_minus
    with weight lambda_down.  Zero exactly when every true-class norm is
    >= m_plus and every false-class norm is <= m_minus.
    """
    batch, num_classes = norms.shape
    t = _check_one_hot(labels_onehot, num_classes).astype(norms.dtype)
    t_pos = Tensor(t)
    t_neg = Tensor(1.0 - t)

    pos = engine.relu(engine.add(engine.scale(norms, -1.0), params.m_plus))
    pos_term = engine.mul(engine.mul(pos, pos), t_pos)
    neg = engine.relu(engine.add(norms, -params.m_minus))
    neg_term = engine.scale(engine.mul(engine.mul(neg, neg), t_neg), params.lambda_down)
    total = engine.reduce_sum(engine.add(pos_term, neg_term))
    return engine.scale(total, 1.0 / batch)


def squared_error_loss(norms: Tensor, labels_onehot) -> Tensor:
    """Alternative data term: (1/batch) * sum of 0.5 * ||norms - onehot||^2."""
    batch, num_classes = norms.shape
    t = _check_one_hot(labels_onehot, num_classes).astype(norms.dtype)
    diff = engine.add(norms, engine.scale(Tensor(t), -1.0))
    return engine.scale(engine.reduce_sum(engine.mul(diff, diff)), 0.5 / batch)


# ---------------------------------------------------------------------------
# reconstruction
# ---------------------------------------------------------------------------

@dataclass
class Decoder:
    """Three dense layers (in -> h1 -> h2 -> out) with relu, relu, sigmoid."""

    W1: Tensor
    b1: Tensor
    W2: Tensor
    b2: Tensor
    W3: Tensor
    b3: Tensor

    @classmethod
    def create(cls, in_dim: int, rng: np.random.Generator, hidden1: int = 512,
               hidden2: int = 1024, out_dim: int = 784, dtype=np.float32):
        def dense(n_in, n_out):
            w = rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_in, n_out))
            return Tensor(w, requires_grad=True, dtype=dtype), Tensor(np.zeros(n_out), requires_grad=True, dtype=dtype)

        w1, b1 = dense(in_dim, hidden1)
        w2, b2 = dense(hidden1, hidden2)
        w3, b3 = dense(hidden2, out_dim)
        return cls(w1, b1, w2, b2, w3, b3)

    def forward(self, x: Tensor) -> Tensor:
        h = engine.relu(engine.add_bias(engine.matmul(x, self.W1), self.b1))
        h = engine.relu(engine.add_bias(engine.matmul(h, self.W2), self.b2))
        return engine.sigmoid(engine.add_bias(engine.matmul(h, self.W3), self.b3))

    def parameters(self):
        return [("decoder.W1", self.W1), ("decoder.b1", self.b1),
                ("decoder.W2", self.W2), ("decoder.b2", self.b2),
                ("decoder.W3", self.W3), ("decoder.b3", self.b3)]


def mask_to_label_capsule(caps: CapsuleTensor, labels_onehot) -> Tensor:
    """Zero every capsule except the labelled one and flatten to (batch, N*D).

    Gradient flows back only into the labelled capsule's entries.
    """
    t = caps.data
    batch, num = caps.batch, caps.num_capsules
    mask = _check_one_hot(labels_onehot, num).astype(t.dtype)
    mask_exp = mask.reshape((batch, num) + (1,) * len(caps.capsule_shape))
    flat_dim = num * caps.capsule_dim

    def bw(g):
        _accum(t, (g.reshape(t.shape) * mask_exp))

    return _node((t.data * mask_exp).reshape(batch, flat_dim), (t,), "mask_label", bw)


def reconstruction_loss(caps: CapsuleTensor, labels_onehot, images: Tensor, decoder: Decoder) -> Tensor:
    """Mean over the batch of the summed squared pixel error of the decode.

    The decoder sees only the labelled class capsule (others masked to 0).
    """
    batch = caps.batch
    masked = mask_to_label_capsule(caps, labels_onehot)
    decoded = decoder.forward(masked)
    target = engine.reshape(images, decoded.shape)
    diff = engine.add(decoded, engine.scale(target, -1.0))
    return engine.scale(engine.reduce_sum(engine.mul(diff, diff)), 1.0 / batch)


def l2_regularization(params, weight_decay: float) -> Tensor:
    """(weight_decay / 2) * sum of squares over the given parameter tensors.

    Callers pass every weight-like tensor (transformation W, coupling c,
    conv kernels, decoder weights); biases stay out.  The gradient w.r.t.
    each tensor is exactly weight_decay * tensor.
    """
    if weight_decay < 0:
        raise ValueError("weight_decay must be >= 0")
    params = list(params)
    if weight_decay == 0.0 or not params:
        dtype = params[0].dtype if params else np.float32
        return Tensor(np.zeros((), dtype=dtype))
    total = None
    for p in params:
        sq = engine.reduce_sum(engine.mul(p, p))
        total = sq if total is None else engine.add(total, sq)
    return engine.scale(total, 0.5 * weight_decay)


def total_objective(margin: Tensor, reconstruction: Tensor | None, l2: Tensor,
                    config: ObjectiveConfig) -> Tensor:
    """margin + reconstruction_weight * reconstruction (if enabled) + L2."""
    loss = margin
    if config.reconstruction_enabled and reconstruction is not None:
        loss = engine.add(loss, engine.scale(reconstruction, config.reconstruction_weight))
    return engine.add(loss, l2)
