"""Seed-driven generation of every random matrix in the system.

All participants regenerate identical projection subspaces from shared
integer seeds, so no projector is ever stored or transmitted.  Matrices
come from a counter-based Philox stream keyed by (seed, role, dims),
which makes generation order-independent and bit-reproducible across
processes and thread counts.
"""

from dataclasses import dataclass
from enum import Enum

import numpy as np

# Role tags keep streams for different matrix kinds disjoint even when
# the integer seeds collide.
_ROLE_OMEGA = 0x01
_ROLE_COMBINER = 0x02


def _stream(seed, role, *dims):
    """Philox generator keyed by (seed, role, dims) only."""
    ss = np.random.SeedSequence(
        entropy=int(seed), spawn_key=(role, *[int(d) for d in dims])
    )
    return np.random.Generator(np.random.Philox(ss))


def generate_omega(seed, m, d):
    """Draw the m x d layer template matrix with i.i.d. N(0, 1) entries.

    The same (seed, m, d) always yields a bit-identical matrix.
    """
    if m < 1 or d < 1:
        raise ValueError(f"matrix dims must be positive, got {m}x{d}")
    return _stream(seed, _ROLE_OMEGA, m, d).standard_normal((m, d))


def _fix_signs(u, vt):
    """Make the largest-magnitude entry of each left singular vector positive.

    SVD is unique only up to paired sign flips of (u_i, v_i); an unfixed
    choice would differ across LAPACK builds and break seed sharing.
    """
    flip = np.sign(u[np.argmax(np.abs(u), axis=0), np.arange(u.shape[1])])
    flip[flip == 0] = 1.0
    return u * flip, vt * flip[:, None]


@dataclass
class ProjectorPair:
    """Per-layer down-projection pair: P (r x m, orthonormal rows) and
    Q (d x r, orthonormal columns), both derived from one seed."""

    layer_index: int
    P: np.ndarray
    Q: np.ndarray
    seed: int
    rank: int

    @property
    def shape(self):
        """(m, d) of the layer this pair projects."""
        return (self.P.shape[1], self.Q.shape[0])


def generate_projectors(seed, m, d, r, layer_index=0):
    """Build the rank-r projector pair for an m x d layer from its seed.

    P holds the transposed top-r left singular vectors of the seeded
    template and Q the top-r right singular vectors, so P P^T = I_r and
    Q^T Q = I_r exactly up to floating point.
    """
    if not 1 <= r <= min(m, d):
        raise ValueError(f"rank r={r} must satisfy 1 <= r <= min({m}, {d})")
    omega = generate_omega(seed, m, d)
    u, _, vt = np.linalg.svd(omega, full_matrices=False)
    u, vt = _fix_signs(u, vt)
    return ProjectorPair(
        layer_index=int(layer_index),
        P=np.ascontiguousarray(u[:, :r].T),
        Q=np.ascontiguousarray(vt[:r].T),
        seed=int(seed),
        rank=int(r),
    )


class CombinerMode(Enum):
    ORTHONORMAL = "orthonormal"  # r_a >= r * n_w: exactly orthogonal blocks
    GAUSSIAN = "gaussian"  # r_a <  r * n_w: i.i.d. N(0, 1/r_a)


@dataclass
class Combiner:
    """Shared superposition matrix V (r_a x r*n_w) and its per-layer blocks.

    In Gaussian mode the blocks are only near-orthogonal, with cross-talk
    controlled by the Gaussian Gram tail bound; in orthonormal mode the
    blocks are exactly orthogonal and superposition is lossless.
    """

    V: np.ndarray
    mode: CombinerMode
    seed: int
    r_a: int
    rank: int
    n_layers: int

    def block(self, l):
        """Columns of V assigned to layer l (0-based)."""
        if not 0 <= l < self.n_layers:
            raise IndexError(f"layer index {l} out of range [0, {self.n_layers})")
        r = self.rank
        return self.V[:, l * r : (l + 1) * r]

    @property
    def blocks(self):
        return [self.block(l) for l in range(self.n_layers)]


def generate_combiner(seed, r, n_w, r_a):
    """Generate the combiner for n_w layers of rank r at transmission dim r_a.

    When r_a >= r*n_w, V is the orthonormal basis (left singular vectors,
    sign-fixed) of a seeded Gaussian r_a x (r*n_w) matrix, giving
    V^T V = I.  Otherwise V has i.i.d. N(0, 1/r_a) entries, trading exact
    orthogonality for a fixed r_a x r_a payload.
    """
    if r < 1 or n_w < 1 or r_a < 1:
        raise ValueError(f"r={r}, n_w={n_w}, r_a={r_a} must all be >= 1")
    cols = r * n_w
    gen = _stream(seed, _ROLE_COMBINER, r_a, cols)
    if r_a >= cols:
        g = gen.standard_normal((r_a, cols))
        u, _, vt = np.linalg.svd(g, full_matrices=False)
        u, _ = _fix_signs(u, vt)
        v = np.ascontiguousarray(u)
        mode = CombinerMode.ORTHONORMAL
    else:
        v = gen.standard_normal((r_a, cols)) / np.sqrt(r_a)
        mode = CombinerMode.GAUSSIAN
    return Combiner(
        V=v, mode=mode, seed=int(seed), r_a=int(r_a), rank=int(r), n_layers=int(n_w)
    )


def gaussian_gram_tail_frequency(r_a, n_cols, eps, seeds):
    """Empirical frequency of |[V^T V - I]_{ij}| >= eps over several seeds.

    Pooled over all n_cols^2 Gram entries of each seeded Gaussian matrix
    with entries N(0, 1/r_a); companion to the 4*exp(-eps^2 r_a / 8) tail
    bound on any single entry.
    """
    exceed = 0
    total = 0
    for s in seeds:
        v = _stream(s, _ROLE_COMBINER, r_a, n_cols).standard_normal(
            (r_a, n_cols)
        ) / np.sqrt(r_a)
        gram = v.T @ v
        dev = np.abs(gram - np.eye(n_cols))
        exceed += int((dev >= eps).sum())
        total += dev.size
    return exceed / total


def jl_distance_success(n_vectors, dim, eps, r_a, seeds, data_seed=0):
    """Fraction of seeds for which a Gaussian map preserves all pairwise
    squared distances of a fixed vector set within factors (1 -+ eps)."""
    data = _stream(data_seed, _ROLE_OMEGA, n_vectors, dim).standard_normal(
        (n_vectors, dim)
    )
    diffs = data[:, None, :] - data[None, :, :]
    iu = np.triu_indices(n_vectors, k=1)
    pair_diffs = diffs[iu]  # (n_pairs, dim)
    base = (pair_diffs**2).sum(axis=1)
    ok = 0
    for s in seeds:
        v = _stream(s, _ROLE_COMBINER, r_a, dim).standard_normal((r_a, dim)) / np.sqrt(
            r_a
        )
        mapped = (pair_diffs @ v.T) ** 2
        ratio = mapped.sum(axis=1) / base
        if np.all((ratio >= 1 - eps) & (ratio <= 1 + eps)):
            ok += 1
    return ok / len(seeds)
