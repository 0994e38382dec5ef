"""Memory-efficient local optimizer working entirely in the r x r space.

Gradients are down-projected to r x r before the moment estimates are
updated, so optimizer state is 2*r^2 per layer instead of m*d, and the
per-round increment accumulator adds one more r x r buffer.
"""

from dataclasses import dataclass, field

import numpy as np


@dataclass
class CompressedMoments:
    """Adam moment estimates kept in the compressed r x r space."""

    M: np.ndarray
    S: np.ndarray
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-3
    step: int = 0
    # "paper" divides the moments by fixed (1-beta); "standard" uses the
    # usual step-dependent (1-beta^n) corrections.
    bias_mode: str = "paper"

    @classmethod
    def zeros(cls, r, beta1=0.9, beta2=0.999, epsilon=1e-3, bias_mode="paper"):
        return cls(
            M=np.zeros((r, r)),
            S=np.zeros((r, r)),
            beta1=beta1,
            beta2=beta2,
            epsilon=epsilon,
            bias_mode=bias_mode,
        )


@dataclass
class IncrementAccumulator:
    """Running sum of the optimizer outputs since the last upload."""

    U: np.ndarray
    eta: float

    @classmethod
    def zeros(cls, r, eta):
        return cls(U=np.zeros((r, r)), eta=float(eta))

    def reset(self):
        self.U[:] = 0.0


def compress_gradient(G, proj):
    """Down-project an m x d gradient to r x r: P @ G @ Q."""
    if G.shape != proj.shape:
        raise ValueError(f"gradient shape {G.shape} != projector shape {proj.shape}")
    return proj.P @ G @ proj.Q


def adam_step(R, moments):
    """One compressed-Adam update; mutates the moments, returns R-tilde.

    M <- b1*M + (1-b1)*R, S <- b2*S + (1-b2)*R*R, then the normalized
    update M~ / sqrt(S~ + eps) entrywise, where the bias divisors depend
    on moments.bias_mode.
    """
    if R.shape != moments.M.shape:
        raise ValueError(f"update shape {R.shape} != moment shape {moments.M.shape}")
    b1, b2 = moments.beta1, moments.beta2
    moments.M *= b1
    moments.M += (1.0 - b1) * R
    moments.S *= b2
    moments.S += (1.0 - b2) * (R * R)
    moments.step += 1
    if moments.bias_mode == "standard":
        c1 = 1.0 - b1**moments.step
        c2 = 1.0 - b2**moments.step
    else:
        c1 = 1.0 - b1
        c2 = 1.0 - b2
    m_hat = moments.M / c1
    s_hat = moments.S / c2
    return m_hat / np.sqrt(s_hat + moments.epsilon)


def apply_local_update(W, R_tilde, proj, eta):
    """Up-project an r x r update and add it: W + eta * P^T @ R~ @ Q^T.

    Orthonormal rows/columns make the transpose an exact pseudo-inverse,
    and the added delta has rank at most r.
    """
    if W.shape != proj.shape:
        raise ValueError(f"weight shape {W.shape} != projector shape {proj.shape}")
    if R_tilde.shape != (proj.rank, proj.rank):
        raise ValueError(
            f"update shape {R_tilde.shape} != ({proj.rank}, {proj.rank})"
        )
    return W + eta * (proj.P.T @ R_tilde @ proj.Q.T)


def accumulate(acc, R_tilde):
    """acc.U += R~ (the learning rate is applied once, at upload time)."""
    if R_tilde.shape != acc.U.shape:
        raise ValueError(f"update shape {R_tilde.shape} != {acc.U.shape}")
    acc.U += R_tilde


def optimizer_state_params(layer_dims, r):
    """Auxiliary parameter count of the compressed optimizer,
    sum over layers of (m + d + r) * r."""
    return sum((m + d + r) * r for m, d in layer_dims)


def weight_params(layer_dims):
    """Trainable weight count, sum over layers of m * d."""
    return sum(m * d for m, d in layer_dims)
