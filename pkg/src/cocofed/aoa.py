"""Synthetic wireless data and the unsupervised objective.

A uniform linear array of n_nb antennas receives T snapshots of U user
signals over a Rician multipath channel.  Training never sees the true
angles: the loss scores how well the received block is explained by the
steering subspace of the *estimated* angles, via regularized least
squares.  A classical MUSIC estimator and a permutation-invariant MSE
metric are included for evaluation.
"""

import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import signal as sp_signal
from scipy.optimize import linear_sum_assignment

DEG = np.pi / 180.0
DEFAULT_SUPPORT = (-60.0 * DEG, 60.0 * DEG)


@dataclass
class SignalBatch:
    """One received snapshot block, with ground truth kept for scoring only."""

    Y: np.ndarray  # complex (n_nb, T)
    theta_true: np.ndarray  # radians, shape (U,)
    snr_db: float
    gnb_id: int = 0


@dataclass
class ChannelConfig:
    """Rician multipath channel parameters.

    `rician_rho` and `snr_range_db` may be (low, high) intervals, drawn
    uniformly per batch, or fixed scalars.
    """

    n_nb: int = 64
    n_ue: int = 1
    n_paths: int = 9
    rician_rho: tuple = (0.0, 15.0)
    snr_range_db: tuple = (0.0, 20.0)
    spacing_nb: float = 0.5  # in wavelengths
    spacing_ue: float = 0.5
    angle_support: tuple = DEFAULT_SUPPORT
    noise_power: float = 1.0
    tx_power: float = 1.0

    def __post_init__(self):
        if self.n_paths < 1:
            raise ValueError("n_paths must be >= 1")
        if self.spacing_nb <= 0 or self.spacing_ue <= 0:
            raise ValueError("antenna spacings must be positive")
        lo = self.rician_rho[0] if np.ndim(self.rician_rho) else self.rician_rho
        if lo < 0:
            raise ValueError("Rician factor must be >= 0")


def _draw(value, rng):
    if np.ndim(value):
        lo, hi = value
        return rng.uniform(lo, hi)
    return float(value)


def steering_vector(theta, n, spacing=0.5):
    """ULA response a(theta): entry k is exp(-j*2*pi*spacing*k*sin(theta))."""
    k = np.arange(n)
    return np.exp(-2j * np.pi * spacing * k * np.sin(theta))


def steering_matrix(thetas, n, spacing=0.5):
    k = np.arange(n)[:, None]
    return np.exp(-2j * np.pi * spacing * k * np.sin(np.atleast_1d(thetas))[None, :])


def _crandn(rng, *shape):
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)


def synthesize_batch(cfg: ChannelConfig, rng, thetas, T, gnb_id=0, snr_db=None):
    """Generate one received block for LoS angles `thetas` (one per UE).

    Path 1 of each UE is the line of sight at the true angle; the other
    n_paths - 1 paths scatter from random angles inside the support.  The
    LoS/NLoS power split follows the Rician factor drawn for the batch,
    the noise floor is cfg.noise_power per entry, and the noiseless part
    is rescaled so the realized SNR matches the drawn value.
    """
    thetas = np.atleast_1d(np.asarray(thetas, dtype=float))
    n_ue_ants = cfg.n_ue
    n = cfg.n_nb
    rho = _draw(cfg.rician_rho, rng)
    if snr_db is None:
        snr_db = _draw(cfg.snr_range_db, rng)
    los_amp = np.sqrt(rho * n * n_ue_ants / ((rho + 1.0) * cfg.n_paths))
    nlos_amp = np.sqrt(n * n_ue_ants / ((rho + 1.0) * cfg.n_paths))

    S = np.zeros((n, T), dtype=complex)
    for u, theta in enumerate(thetas):
        x = np.sqrt(cfg.tx_power) * _crandn(rng, n_ue_ants, T)
        # LoS path
        a_nb = steering_vector(theta, n, cfg.spacing_nb)
        phi = rng.uniform(-np.pi, np.pi)
        a_ue = steering_vector(phi, n_ue_ants, cfg.spacing_ue)
        beta = _crandn(rng, T)
        S += los_amp * beta * a_nb[:, None] * (a_ue.conj() @ x)[None, :]
        # scattered paths
        for _ in range(cfg.n_paths - 1):
            th_p = rng.uniform(*cfg.angle_support)
            phi_p = rng.uniform(-np.pi, np.pi)
            a_nb_p = steering_vector(th_p, n, cfg.spacing_nb)
            a_ue_p = steering_vector(phi_p, n_ue_ants, cfg.spacing_ue)
            beta_p = _crandn(rng, T)
            S += nlos_amp * beta_p * a_nb_p[:, None] * (a_ue_p.conj() @ x)[None, :]

    sig_power = np.mean(np.abs(S) ** 2)
    if sig_power > 0:
        target = cfg.noise_power * 10.0 ** (snr_db / 10.0)
        S *= np.sqrt(target / sig_power)
    noise = np.sqrt(cfg.noise_power) * _crandn(rng, n, T)
    return SignalBatch(Y=S + noise, theta_true=thetas, snr_db=float(snr_db), gnb_id=gnb_id)


def reconstruct_signal(Y, theta_hat, gamma, spacing=0.5):
    """Regularized-LS reconstruction of Y from the estimated steering span:
    A @ (A^H A + gamma I)^-1 @ A^H @ Y."""
    if gamma <= 0:
        raise ValueError("regularization gamma must be positive")
    A = steering_matrix(theta_hat, Y.shape[0], spacing)
    u = A.shape[1]
    gram = A.conj().T @ A + gamma * np.eye(u)
    coef = np.linalg.solve(gram, A.conj().T @ Y)
    return A @ coef


def unsupervised_loss(Y, theta_hat, gamma, spacing=0.5):
    """Reconstruction loss (1/T) * ||Y - Y_hat||_F^2; needs no labels."""
    resid = Y - reconstruct_signal(Y, theta_hat, gamma, spacing)
    return float(np.sum(np.abs(resid) ** 2) / Y.shape[1])


def music_estimate(Y, u, spacing=0.5, support=DEFAULT_SUPPORT, grid_deg=0.1):
    """Classical MUSIC: noise-subspace spectrum peaks on a fine angle grid.

    Returns the u estimated angles sorted ascending.
    """
    n = Y.shape[0]
    if u >= n:
        raise ValueError(f"number of sources u={u} must be < array size {n}")
    if u == 0:
        return np.zeros(0)
    T = Y.shape[1]
    R = Y @ Y.conj().T / T
    w, vecs = np.linalg.eigh(R)  # ascending eigenvalues
    noise = vecs[:, : n - u]
    grid = np.arange(support[0], support[1] + grid_deg * DEG / 2, grid_deg * DEG)
    A = steering_matrix(grid, n, spacing)
    denom = np.sum(np.abs(noise.conj().T @ A) ** 2, axis=0)
    spectrum = 1.0 / np.maximum(denom, 1e-300)
    peaks, _ = sp_signal.find_peaks(spectrum)
    if peaks.size < u:
        # not enough interior peaks: fall back to largest spectrum values
        extra = np.argsort(spectrum)[::-1]
        extra = extra[~np.isin(extra, peaks)]
        peaks = np.concatenate([peaks, extra[: u - peaks.size]])
    best = peaks[np.argsort(spectrum[peaks])[::-1][:u]]
    return np.sort(grid[best])


def mse_metric(theta_true, theta_hat):
    """Permutation-matched mean squared angle error.

    Sources are unordered, so estimates are assigned to truths by the
    minimum-cost matching before averaging the squared errors.
    """
    t = np.atleast_1d(np.asarray(theta_true, dtype=float))
    h = np.atleast_1d(np.asarray(theta_hat, dtype=float))
    if t.shape != h.shape:
        raise ValueError(f"shape mismatch {t.shape} vs {h.shape}")
    cost = (t[:, None] - h[None, :]) ** 2
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].mean())


def partition_angles(mode, k, rng, width_deg=30.0, support=DEFAULT_SUPPORT):
    """Angle support for gNB k: the full range under iid, or a random
    contiguous `width_deg` sub-sector under noniid."""
    if mode == "iid":
        return support
    if mode == "noniid":
        width = width_deg * DEG
        lo = rng.uniform(support[0], support[1] - width)
        return (lo, lo + width)
    raise ValueError(f"unknown partition mode {mode!r}")


# --- batch dump format (golden-input regression files) ---------------------

_DUMP_MAGIC = b"AOA1"
_DUMP_HEAD = struct.Struct("<IIII")  # n_nb, T, U, n_batches


def save_batches(path, batches):
    """Write one gNB's batches: header {n_nb, T, U, count}, then per batch
    theta (f64 * U), snr (f64), and Y as interleaved f64 pairs, column-major."""
    n_nb, T = batches[0].Y.shape
    u = batches[0].theta_true.size
    with open(path, "wb") as f:
        f.write(_DUMP_MAGIC)
        f.write(_DUMP_HEAD.pack(n_nb, T, u, len(batches)))
        for b in batches:
            if b.Y.shape != (n_nb, T) or b.theta_true.size != u:
                raise ValueError("all batches in one file must share dimensions")
            f.write(np.asarray(b.theta_true, dtype="<f8").tobytes())
            f.write(struct.pack("<d", b.snr_db))
            yf = np.asarray(b.Y, dtype=complex).flatten(order="F")
            inter = np.empty(2 * yf.size)
            inter[0::2] = yf.real
            inter[1::2] = yf.imag
            f.write(inter.astype("<f8").tobytes())


def load_batches(path, gnb_id=0):
    """Inverse of save_batches."""
    with open(path, "rb") as f:
        if f.read(4) != _DUMP_MAGIC:
            raise ValueError(f"{path} is not a batch dump file")
        n_nb, T, u, count = _DUMP_HEAD.unpack(f.read(_DUMP_HEAD.size))
        out = []
        for _ in range(count):
            theta = np.frombuffer(f.read(8 * u), dtype="<f8").copy()
            (snr,) = struct.unpack("<d", f.read(8))
            inter = np.frombuffer(f.read(16 * n_nb * T), dtype="<f8")
            y = (inter[0::2] + 1j * inter[1::2]).reshape((n_nb, T), order="F")
            out.append(SignalBatch(Y=y, theta_true=theta, snr_db=snr, gnb_id=gnb_id))
    return out
