"""Basis sets and their convex combination into personalized models.

A model is built block-by-block as a convex combination of K basis vectors;
the per-block weights come from a temperature-sharpened softmax over learned
logits. When a major basis is present the combination becomes
``0.5 * (major + sum_k alpha[k] * basis_k)``, and the 0.5 factor propagates
through every gradient below.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .nn import (
    Batch,
    MlpSpec,
    ParamVector,
    _check_batch,
    _check_params,
    block_index_of_coordinate,
    loss_and_grad_values,
)


@dataclass(frozen=True)
class BasisSet:
    """K basis parameter vectors sharing one block spec, plus optional major."""

    bases: tuple[ParamVector, ...]
    major: ParamVector | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "bases", tuple(self.bases))
        if len(self.bases) < 1:
            raise ShapeError("basis set needs at least one basis")
        ref = self.bases[0].block_spec
        for i, b in enumerate(self.bases):
            if b.block_spec != ref:
                raise ShapeError(f"basis {i} has a different block spec")
        if self.major is not None and self.major.block_spec != ref:
            raise ShapeError("major basis has a different block spec")

    @property
    def k(self) -> int:
        return len(self.bases)

    @property
    def block_spec(self):
        return self.bases[0].block_spec

    @property
    def num_blocks(self) -> int:
        return len(self.block_spec)

    def stacked(self) -> np.ndarray:
        """(K, P) matrix of the non-major basis values."""
        return np.stack([b.values for b in self.bases])


@dataclass(frozen=True)
class CombinationState:
    """Per-block combination logits and the softmax temperature."""

    logits: np.ndarray  # (num_blocks, K)
    temperature: float = 1.0

    def __post_init__(self) -> None:
        logits = np.array(self.logits, dtype=np.float64, copy=True)
        if logits.ndim != 2:
            raise ShapeError("logits must be a (num_blocks, K) matrix")
        if not np.isfinite(logits).all():
            raise ShapeError("logits contain NaN or Inf")
        logits.setflags(write=False)
        object.__setattr__(self, "logits", logits)
        if not 0.0 < self.temperature <= 1.0:
            raise ConfigError(f"temperature must be in (0, 1], got {self.temperature}")

    @property
    def num_blocks(self) -> int:
        return self.logits.shape[0]

    @property
    def k(self) -> int:
        return self.logits.shape[1]


def uniform_state(num_blocks: int, k: int, temperature: float = 1.0) -> CombinationState:
    """All-zero logits: uniform coefficients 1/K in every block."""
    return CombinationState(np.zeros((num_blocks, k)), temperature)


def softmax_rows(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def coefficients(state: CombinationState) -> np.ndarray:
    """Row-wise ``softmax(logits / temperature)``, one simplex row per block."""
    return softmax_rows(state.logits / state.temperature)


def sharpen(state: CombinationState, tau_sharp: float) -> CombinationState:
    """Same logits, new temperature; coefficients move toward the argmax."""
    if not 0.0 < tau_sharp <= 1.0:
        raise ConfigError(f"sharpening temperature must be in (0, 1], got {tau_sharp}")
    return CombinationState(state.logits, tau_sharp)


def _check_combination(basis_set: BasisSet, state: CombinationState) -> None:
    if state.k != basis_set.k:
        raise ShapeError(
            f"state has {state.k} coefficient columns, basis set has {basis_set.k}"
        )
    if state.num_blocks != basis_set.num_blocks:
        raise ShapeError(
            f"state has {state.num_blocks} rows, block spec "
            f"{[b.name for b in basis_set.block_spec]} has {basis_set.num_blocks} blocks"
        )


def blockwise_combination(
    stacked: np.ndarray, weights: np.ndarray, coord_block: np.ndarray
) -> np.ndarray:
    """Raw per-block linear map ``out[p] = sum_k weights[block(p), k] * v_k[p]``.

    This is linear in ``weights`` for fixed bases; ``combine`` applies it to
    softmax coefficients.
    """
    per_coord = weights[coord_block, :]  # (P, K)
    return np.einsum("pk,kp->p", per_coord, stacked)


def combine(basis_set: BasisSet, state: CombinationState) -> ParamVector:
    """The personalized parameter vector for the given combination state."""
    _check_combination(basis_set, state)
    values = combine_values(
        basis_set.stacked(),
        None if basis_set.major is None else basis_set.major.values,
        coefficients(state),
        block_index_of_coordinate(basis_set.block_spec, len(basis_set.bases[0])),
    )
    return ParamVector(values, basis_set.block_spec)


def combine_values(
    stacked: np.ndarray,
    major: np.ndarray | None,
    alpha: np.ndarray,
    coord_block: np.ndarray,
) -> np.ndarray:
    mix = blockwise_combination(stacked, alpha, coord_block)
    if major is None:
        return mix
    return 0.5 * (major + mix)


def _combined_loss_grad(
    spec: MlpSpec, basis_set: BasisSet, state: CombinationState, batch: Batch
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """(alpha, theta, grad_theta, coord_block) at the combined model."""
    _check_combination(basis_set, state)
    _check_batch(spec, batch)
    _check_params(spec, basis_set.bases[0])
    coord_block = block_index_of_coordinate(
        basis_set.block_spec, len(basis_set.bases[0])
    )
    alpha = coefficients(state)
    major = None if basis_set.major is None else basis_set.major.values
    theta = combine_values(basis_set.stacked(), major, alpha, coord_block)
    _, g = loss_and_grad_values(spec, theta, batch.features, batch.labels)
    return alpha, theta, g, coord_block


def basis_gradient_values(
    stacked_shape_k: int,
    alpha: np.ndarray,
    grad_theta: np.ndarray,
    coord_block: np.ndarray,
    has_major: bool,
) -> np.ndarray:
    """(K, P) gradients w.r.t. each basis: per block ``alpha[k] * grad_theta``."""
    scale = alpha[coord_block, :].T  # (K, P)
    if has_major:
        scale = 0.5 * scale
    return scale * grad_theta[None, :]


def grad_bases(
    spec: MlpSpec, basis_set: BasisSet, state: CombinationState, batch: Batch
) -> list[ParamVector]:
    """Exact loss gradient w.r.t. each of the K bases."""
    alpha, _, g, coord_block = _combined_loss_grad(spec, basis_set, state, batch)
    grads = basis_gradient_values(
        basis_set.k, alpha, g, coord_block, basis_set.major is not None
    )
    return [ParamVector(grads[k], basis_set.block_spec) for k in range(basis_set.k)]


def grad_major(
    spec: MlpSpec, basis_set: BasisSet, state: CombinationState, batch: Batch
) -> ParamVector:
    """Gradient w.r.t. the major basis: half the combined-model gradient."""
    if basis_set.major is None:
        raise ShapeError("basis set has no major basis")
    _, _, g, _ = _combined_loss_grad(spec, basis_set, state, batch)
    return ParamVector(0.5 * g, basis_set.block_spec)


def logit_gradient_values(
    stacked: np.ndarray,
    alpha: np.ndarray,
    grad_theta: np.ndarray,
    block_spec,
    temperature: float,
    has_major: bool,
) -> np.ndarray:
    """(num_blocks, K) gradient w.r.t. the combination logits.

    Per block b: d[b, k] = v_k[b] . grad_theta[b] (halved under a major
    basis), then the softmax Jacobian
    d/dpsi[b, k] = alpha[b, k] * (d[b, k] - sum_j alpha[b, j] d[b, j]) / tau.
    """
    per_coord = stacked * grad_theta[None, :]  # (K, P)
    offsets = [b.offset for b in block_spec]
    d = np.add.reduceat(per_coord, offsets, axis=1).T  # (num_blocks, K)
    if has_major:
        d = 0.5 * d
    inner = (alpha * d).sum(axis=1, keepdims=True)
    return alpha * (d - inner) / temperature


def grad_logits(
    spec: MlpSpec, basis_set: BasisSet, state: CombinationState, batch: Batch
) -> np.ndarray:
    """Exact loss gradient w.r.t. the combination logits psi."""
    alpha, _, g, _ = _combined_loss_grad(spec, basis_set, state, batch)
    return logit_gradient_values(
        basis_set.stacked(),
        alpha,
        g,
        basis_set.block_spec,
        state.temperature,
        basis_set.major is not None,
    )
