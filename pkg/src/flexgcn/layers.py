"""Differentiable building blocks: graph convolution, LayerNorm, GRN, dropout.

Each layer owns its parameters as immutable matrices and exposes a
``parameters()`` listing so the model can flatten everything for the
optimizer. Forward passes run through the numerics primitives (or register
a fused adjoint via ``record_operation``), so any tape active at call time
picks up gradients automatically.
"""

from __future__ import annotations

import math

import numpy as np

from . import numerics as nm
from .graph import PropagationOperator, propagate
from .numerics import DomainError, Matrix, ShapeError, record_operation


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> Matrix:
    """Uniform(-a, a) init with a = sqrt(6 / (fan_in + fan_out))."""
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return Matrix(rng.uniform(-limit, limit, size=(fan_in, fan_out)))


class FlexGConvLayer:
    """Graph convolution with blended two-hop propagation.

    Computes act(P(H) W + X W~): propagated features times a weight matrix,
    plus the network input X pushed through its own weight matrix (the
    initial residual connection). Disabling ``irc`` drops the X W~ term
    entirely, in which case no W~ parameter exists.
    """

    def __init__(
        self,
        in_features: int,
        out_features: int,
        op: PropagationOperator,
        residual_features: int = 2,
        irc_enabled: bool = True,
        rng: np.random.Generator | None = None,
    ) -> None:
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_features = in_features
        self.out_features = out_features
        self.residual_features = residual_features
        self.op = op
        self.irc_enabled = irc_enabled
        self.w = glorot_uniform(rng, in_features, out_features)
        self.w_tilde = glorot_uniform(rng, residual_features, out_features) if irc_enabled else None

    def parameters(self) -> list[tuple[str, str]]:
        """(display name, attribute) pairs for every learnable tensor."""
        out = [("w", "w")]
        if self.irc_enabled:
            out.append(("w_tilde", "w_tilde"))
        return out

    def forward(
        self,
        h: Matrix,
        x0: Matrix,
        activation: str = "none",
        a_eff: Matrix | None = None,
    ) -> Matrix:
        if h.cols != self.w.rows:
            raise ShapeError(f"features have {h.cols} columns, weight expects {self.w.rows}")
        if activation not in ("none", "gelu"):
            raise DomainError(f"unknown activation {activation!r}")
        out = nm.matmul(propagate(self.op, h, a_eff=a_eff), self.w)
        if self.irc_enabled:
            if x0.cols != self.w_tilde.rows:
                raise ShapeError(
                    f"residual input has {x0.cols} columns, expected {self.w_tilde.rows}"
                )
            out = nm.add(out, nm.matmul(x0, self.w_tilde))
        if activation == "gelu":
            out = nm.gelu(out)
        return out


def flex_gconv_forward(
    layer: FlexGConvLayer,
    h: Matrix,
    x0: Matrix,
    activation: str = "none",
) -> Matrix:
    return layer.forward(h, x0, activation=activation)


class LayerNormLayer:
    """Per-node normalization over channels, then a per-channel affine map.

    Forward and backward are fused into one tape record; the backward
    formula is the standard LayerNorm adjoint for biased row variance.
    """

    def __init__(self, features: int, eps: float = 1e-5) -> None:
        self.features = features
        self.eps = eps
        self.scale = Matrix.ones(1, features)
        self.shift = Matrix.zeros(1, features)

    def parameters(self) -> list[tuple[str, str]]:
        return [("scale", "scale"), ("shift", "shift")]

    def forward(self, h: Matrix) -> Matrix:
        if h.cols != self.features:
            raise ShapeError(f"layer_norm: {h.cols} channels, layer has {self.features}")
        if h.cols < 1:
            raise ShapeError("layer_norm needs at least one column")
        x = h.to_numpy()
        mu = x.mean(axis=1, keepdims=True)
        var = x.var(axis=1, keepdims=True)
        inv_sigma = 1.0 / np.sqrt(var + self.eps)
        x_hat = (x - mu) * inv_sigma
        gamma = self.scale.to_numpy()
        beta = self.shift.to_numpy()
        out = Matrix._wrap(x_hat * gamma + beta)

        def pull_h(g: np.ndarray) -> np.ndarray:
            gx = g * gamma
            m1 = gx.mean(axis=1, keepdims=True)
            m2 = (gx * x_hat).mean(axis=1, keepdims=True)
            return inv_sigma * (gx - m1 - x_hat * m2)

        return record_operation(
            out,
            (h, pull_h),
            (self.scale, lambda g: (g * x_hat).sum(axis=0, keepdims=True)),
            (self.shift, lambda g: g.sum(axis=0, keepdims=True)),
        )

    def normalized(self, h: Matrix) -> np.ndarray:
        """Pre-affine normalized rows (diagnostic, not taped)."""
        x = h.to_numpy()
        mu = x.mean(axis=1, keepdims=True)
        var = x.var(axis=1, keepdims=True)
        return (x - mu) / np.sqrt(var + self.eps)


def layer_norm(layer: LayerNormLayer, h: Matrix) -> Matrix:
    return layer.forward(h)


class GRNLayer:
    """Global response normalization over nodes.

    Each channel is rescaled by the ratio of its norm across nodes to the
    mean channel norm, gated by a learnable per-channel affine that starts
    at zero, so the layer is an exact identity at initialization.
    """

    def __init__(self, features: int, eps: float = 1e-6) -> None:
        self.features = features
        self.eps = eps
        self.gamma = Matrix.zeros(1, features)
        self.beta = Matrix.zeros(1, features)

    def parameters(self) -> list[tuple[str, str]]:
        return [("gamma", "gamma"), ("beta", "beta")]

    def forward(self, h: Matrix) -> Matrix:
        if h.cols != self.features:
            raise ShapeError(f"grn: {h.cols} channels, layer has {self.features}")
        n, f = h.shape
        norms = nm.column_l2_norms(h)                                   # 1 x F
        mean_norm = nm.matmul(nm.mean_all(norms), Matrix.ones(1, f))    # 1 x F, all entries equal
        ratio = nm.div(norms, nm.add(mean_norm, Matrix.full(1, f, self.eps)))
        ones_rows = Matrix.ones(n, 1)
        scaled = nm.mul(h, nm.matmul(ones_rows, ratio))                 # h * ratio, broadcast
        gated = nm.mul(nm.matmul(ones_rows, self.gamma), scaled)
        return nm.add(nm.add(gated, nm.matmul(ones_rows, self.beta)), h)


def grn(layer: GRNLayer, h: Matrix) -> Matrix:
    return layer.forward(h)


def dropout(
    h: Matrix,
    rate: float,
    mode: str = "train",
    rng: np.random.Generator | None = None,
) -> Matrix:
    """Inverted dropout: zero entries with probability ``rate`` in train
    mode and scale survivors by 1/(1-rate); identity in eval mode."""
    if not (0.0 <= rate < 1.0):
        raise DomainError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode not in ("train", "eval"):
        raise DomainError(f"dropout mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval" or rate == 0.0:
        return h
    if rng is None:
        raise DomainError("train-mode dropout needs an rng")
    keep = 1.0 - rate
    mask = (rng.random(h.shape) >= rate) / keep
    out = Matrix._wrap(h.to_numpy() * mask)
    return record_operation(out, (h, lambda g: g * mask))
