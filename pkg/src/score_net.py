"""Deep bias-free ReLU score network.

``S(theta; t, x) = W_{L+1} relu(W_L ... relu(W_0 [x; sigma_bar_t]))``. Time enters
only through the augmented last input coordinate. ``W_0`` and ``W_{L+1}`` stay
frozen at their initial values; only the hidden layers ``W_1 ... W_L`` train.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass
from typing import TYPE_CHECKING, NamedTuple

import numpy as np
from numpy.typing import ArrayLike, NDArray
import structlog

from .schedules import WeightingSpec


if TYPE_CHECKING:
    from .training import TrainBatch

logger = structlog.get_logger(__name__)

FloatArray = NDArray[np.float64]


class NetShapeError(ValueError):
    """Raised when weights or inputs have incompatible shapes."""


class NumericalFailureError(ArithmeticError):
    """Non-finite activation while evaluating the loss; carries the first offending (i, j)."""

    def __init__(self, i: int, j: int, layer: int):
        self.i = i
        self.j = j
        self.layer = layer
        super().__init__(f"non-finite activation at sample i={i}, time j={j} (layer {layer})")


def _frozen(values: ArrayLike) -> FloatArray:
    array = np.array(values, dtype=np.float64)
    array.setflags(write=False)
    return array


def relu(z: FloatArray) -> FloatArray:
    return np.maximum(z, 0.0)


@dataclass(frozen=True)
class ScoreNet:
    """Weights ``W_0`` (m x (d+1)), ``hidden`` = ``W_1 ... W_L`` (m x m) and ``W_last`` (d x m)."""

    W0: FloatArray
    hidden: tuple[FloatArray, ...]
    W_last: FloatArray
    seed: int = 0

    def __post_init__(self) -> None:
        W0 = _frozen(self.W0)
        W_last = _frozen(self.W_last)
        hidden = tuple(_frozen(W) for W in self.hidden)
        if W0.ndim != 2 or W_last.ndim != 2:
            raise NetShapeError("W0 and W_last must be matrices")
        m, d_plus_one = W0.shape
        d = d_plus_one - 1
        if m < 1 or d < 1:
            raise NetShapeError(f"W0 has shape {W0.shape}; need m >= 1 and d >= 1")
        if W_last.shape != (d, m):
            raise NetShapeError(f"W_last has shape {W_last.shape}, expected {(d, m)}")
        for index, W in enumerate(hidden, start=1):
            if W.shape != (m, m):
                raise NetShapeError(f"W_{index} has shape {W.shape}, expected {(m, m)}")
        if self.seed < 0:
            raise NetShapeError("seed must be non-negative")
        object.__setattr__(self, "W0", W0)
        object.__setattr__(self, "W_last", W_last)
        object.__setattr__(self, "hidden", hidden)

    @property
    def d(self) -> int:
        return int(self.W_last.shape[0])

    @property
    def m(self) -> int:
        return int(self.W0.shape[0])

    @property
    def L(self) -> int:  # noqa: N802
        return len(self.hidden)

    @property
    def layers(self) -> tuple[FloatArray, ...]:
        """All weight matrices in order ``W_0 ... W_{L+1}``."""
        return (self.W0, *self.hidden, self.W_last)


class AugmentedInput(NamedTuple):
    x: FloatArray
    sigma_bar: float

    def vector(self) -> FloatArray:
        return np.append(np.asarray(self.x, dtype=np.float64), self.sigma_bar)


class LossGrad(NamedTuple):
    loss: float
    grads: tuple[FloatArray, ...]
    per_term: FloatArray
    residual_sq: FloatArray


def init_net(d: int, m: int, L: int, seed: int) -> ScoreNet:  # noqa: N803
    """He-style Gaussian init: variance 2/m for ``W_0 ... W_L`` and 1/d for ``W_{L+1}``."""
    if d < 1 or m < 1 or L < 0:
        raise NetShapeError(f"invalid network shape d={d}, m={m}, L={L}")
    rng = np.random.default_rng(seed)
    scale = np.sqrt(2.0 / m)
    W0 = rng.normal(0.0, scale, size=(m, d + 1))
    hidden = tuple(rng.normal(0.0, scale, size=(m, m)) for _ in range(L))
    W_last = rng.normal(0.0, np.sqrt(1.0 / d), size=(d, m))
    logger.debug("score_net_initialized", d=d, m=m, L=L, seed=seed)
    return ScoreNet(W0=W0, hidden=hidden, W_last=W_last, seed=seed)


def with_hidden(net: ScoreNet, hidden: Sequence[FloatArray]) -> ScoreNet:
    """Copy of ``net`` with new trainable layers; the frozen layers are shared."""
    if len(hidden) != net.L:
        raise NetShapeError(f"expected {net.L} hidden layers, got {len(hidden)}")
    return ScoreNet(W0=net.W0, hidden=tuple(hidden), W_last=net.W_last, seed=net.seed)


def trainable_parameter_count(net: ScoreNet) -> int:
    return net.L * net.m * net.m


def forward_batch(net: ScoreNet, X: FloatArray) -> FloatArray:  # noqa: N803
    """Evaluate the network on the rows of ``X`` (shape ``(P, d+1)``); returns ``(P, d)``."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != net.d + 1:
        raise NetShapeError(f"inputs must have shape (P, {net.d + 1}), got {X.shape}")
    activation = relu(X @ net.W0.T)
    for W in net.hidden:
        activation = relu(activation @ W.T)
    return activation @ net.W_last.T


def forward(net: ScoreNet, augmented: AugmentedInput) -> FloatArray:
    vector = augmented.vector()
    if vector.shape != (net.d + 1,):
        raise NetShapeError(f"input has {vector.size - 1} data coordinates, network expects {net.d}")
    return forward_batch(net, vector[np.newaxis, :])[0]


def loss_and_grad(net: ScoreNet, batch: TrainBatch, weighting: WeightingSpec) -> LossGrad:
    """Empirical denoising loss and its gradient with respect to ``W_1 ... W_L``.

    ``loss = 1/(2n) sum_ij beta_j ||sigma_bar_j S(X_ij) + xi_ij||^2``. Rows are laid out
    sample-major (row ``p = i * N + j``). The ReLU derivative at exactly zero is zero.

    Raises:
        NetShapeError: if the batch, weighting and network disagree on d or N.
        NumericalFailureError: on the first (i, j) whose activations are not finite.
    """
    n, N, d = batch.xi.shape  # noqa: N806
    if d != net.d:
        raise NetShapeError(f"batch has d={d}, network has d={net.d}")
    if weighting.N != N:
        raise NetShapeError(f"weighting has {weighting.N} entries, batch has N={N}")

    P = n * N  # noqa: N806
    X = batch.inputs().reshape(P, d + 1)  # noqa: N806
    sigma_rows = np.tile(batch.sigma_bars, n)
    beta_rows = np.tile(weighting.beta, n)

    pre_activations = []
    activations = []
    bad_rows = np.zeros(P, dtype=bool)
    bad_layer = np.full(P, -1)
    current = X
    for layer, W in enumerate((net.W0, *net.hidden)):
        z = current @ W.T
        newly_bad = ~np.isfinite(z).all(axis=1) & ~bad_rows
        bad_layer[newly_bad] = layer
        bad_rows |= newly_bad
        pre_activations.append(z)
        current = relu(z)
        activations.append(current)
    output = current @ net.W_last.T
    newly_bad = ~np.isfinite(output).all(axis=1) & ~bad_rows
    bad_layer[newly_bad] = net.L + 1
    bad_rows |= newly_bad
    if bad_rows.any():
        p = int(np.argmax(bad_rows))
        i, j = divmod(p, N)
        logger.error("numerical_failure", i=i, j=j, layer=int(bad_layer[p]))
        raise NumericalFailureError(i, j, int(bad_layer[p]))

    residual = sigma_rows[:, np.newaxis] * output + batch.xi.reshape(P, d)
    residual_sq = np.einsum("pd,pd->p", residual, residual)
    per_term = (beta_rows * residual_sq).reshape(n, N)
    loss = float(per_term.sum() / (2.0 * n))

    grads: list[FloatArray] = []
    if net.L > 0:
        # dL/dS_p = (beta_j / n) * sigma_bar_j * r_p
        upstream = ((beta_rows / n) * sigma_rows)[:, np.newaxis] * residual
        upstream = upstream @ net.W_last
        for layer in range(net.L, 0, -1):
            local = upstream * (pre_activations[layer] > 0.0)
            grads.append(local.T @ activations[layer - 1])
            if layer > 1:
                upstream = local @ net.hidden[layer - 1]
        grads.reverse()

    return LossGrad(
        loss=loss,
        grads=tuple(grads),
        per_term=per_term,
        residual_sq=residual_sq.reshape(n, N),
    )


__all__ = [
    "AugmentedInput",
    "LossGrad",
    "NetShapeError",
    "NumericalFailureError",
    "ScoreNet",
    "forward",
    "forward_batch",
    "init_net",
    "loss_and_grad",
    "relu",
    "trainable_parameter_count",
    "with_hidden",
]
