"""Small matrix-layer network with manual backpropagation.

The network maps per-sample covariance features to angle estimates; a
fixed pooling head and a scaled tanh keep the outputs inside the angular
support.  Gradients of the unsupervised reconstruction loss are computed
analytically: the complex part is differentiated by splitting real and
imaginary contributions, and the result is chained through the layers by
hand (no autodiff anywhere).
"""

import struct
from dataclasses import dataclass

import numpy as np

from .aoa import steering_matrix

_ACTIVATIONS = ("identity", "tanh")


@dataclass
class MatrixLayer:
    W: np.ndarray  # (m, d)
    activation: str = "tanh"
    layer_index: int = 0

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


class Network:
    """Chain of matrix layers, mean-pooling head, and support squashing."""

    def __init__(self, layers, u, angle_support):
        self.layers = list(layers)
        self.u = int(u)
        self.angle_support = tuple(angle_support)
        out_dim = self.layers[-1].W.shape[0]
        if out_dim % self.u:
            raise ValueError(f"last layer width {out_dim} not divisible by U={u}")
        self.group = out_dim // self.u
        for a, b in zip(self.layers, self.layers[1:]):
            if b.W.shape[1] != a.W.shape[0]:
                raise ValueError("layer dimensions do not chain")

    @classmethod
    def build(cls, layer_dims, u, angle_support, rng, init_scale=1.0):
        """Random init, tanh activations except an identity last layer."""
        layers = []
        n = len(layer_dims)
        for i, (m, d) in enumerate(layer_dims):
            w = rng.standard_normal((m, d)) * (init_scale / np.sqrt(d))
            act = "identity" if i == n - 1 else "tanh"
            layers.append(MatrixLayer(W=w, activation=act, layer_index=i))
        return cls(layers, u, angle_support)

    @property
    def input_width(self):
        return self.layers[0].W.shape[1]

    @property
    def layer_dims(self):
        return [tuple(l.W.shape) for l in self.layers]

    @property
    def n_params(self):
        return sum(m * d for m, d in self.layer_dims)

    def copy_weights_from(self, other):
        for mine, theirs in zip(self.layers, other.layers):
            mine.W[:] = theirs.W

    def clone(self):
        layers = [
            MatrixLayer(W=l.W.copy(), activation=l.activation, layer_index=l.layer_index)
            for l in self.layers
        ]
        return Network(layers, self.u, self.angle_support)

    def _squash(self, p):
        lo, hi = self.angle_support
        return 0.5 * (lo + hi) + 0.5 * (hi - lo) * np.tanh(p)


def covariance_features(Y, width):
    """Real feature vector from the sample covariance of Y.

    Diagonals of the covariance are laid out by lag (lag-1 first, real
    and imaginary parts, lag-0 powers last) so that a truncated prefix
    keeps the strongest angular information; the vector is standardized
    per sample.
    """
    n, T = Y.shape
    if width > n * n:
        raise ValueError(f"feature width {width} exceeds covariance size {n * n}")
    R = Y @ Y.conj().T / T
    parts = []
    for lag in range(1, n):
        d = np.diagonal(R, offset=lag)
        parts.append(d.real)
        parts.append(d.imag)
    parts.append(np.diagonal(R).real)
    feats = np.concatenate(parts)[:width]
    std = feats.std()
    return (feats - feats.mean()) / (std if std > 0 else 1.0)


def forward(net: Network, features):
    """Run the network; returns (theta_hat, cache) with every intermediate
    needed by the backward pass."""
    x = np.asarray(features, dtype=float)
    if x.size != net.input_width:
        raise ValueError(f"feature width {x.size} != network input {net.input_width}")
    inputs, acts = [], []
    for layer in net.layers:
        inputs.append(x)
        z = layer.W @ x
        x = np.tanh(z) if layer.activation == "tanh" else z
        acts.append(x)
    p = x.reshape(net.u, net.group).mean(axis=1)
    theta = net._squash(p)
    cache = {"inputs": inputs, "acts": acts, "pool": p}
    return theta, cache


def loss_grad_theta(Y, theta, gamma, spacing=0.5):
    """Reconstruction loss and its exact gradient w.r.t. the angles.

    With A = A(theta), B = (A^H A + gamma I)^-1, Z = B A^H Y and
    E = Y - A Z, perturbing column u of A by da gives
    dL = -(2/T) Re[ tr(E^H (I-M) da e_u^T Z) + tr(E^H A B e_u da^H E) ],
    where M = A B A^H; da/dtheta_u scales each steering entry by
    -j*2*pi*spacing*k*cos(theta_u).
    """
    n, T = Y.shape
    theta = np.atleast_1d(theta)
    u = theta.size
    A = steering_matrix(theta, n, spacing)
    B = np.linalg.inv(A.conj().T @ A + gamma * np.eye(u))
    Z = B @ (A.conj().T @ Y)
    E = Y - A @ Z
    loss = float(np.sum(np.abs(E) ** 2) / T)

    k = np.arange(n)
    EhAB = E.conj().T @ A @ B  # (T, u)
    grad = np.zeros(u)
    for i in range(u):
        adot = (-2j * np.pi * spacing * np.cos(theta[i]) * k) * A[:, i]
        resid_dir = adot - A @ (B @ (A.conj().T @ adot))  # (I - M) @ adot
        t1 = Z[i, :] @ (E.conj().T @ resid_dir)
        t2 = (adot.conj() @ E) @ EhAB[:, i]
        grad[i] = -(2.0 / T) * np.real(t1 + t2)
    return loss, grad


def _backprop(net: Network, cache, grad_theta):
    """Chain grad_theta through squash, pooling, and the layers."""
    lo, hi = net.angle_support
    p = cache["pool"]
    dp = grad_theta * 0.5 * (hi - lo) * (1.0 - np.tanh(p) ** 2)
    dx = np.repeat(dp / net.group, net.group)
    grads = [None] * len(net.layers)
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        if layer.activation == "tanh":
            dz = dx * (1.0 - cache["acts"][i] ** 2)
        else:
            dz = dx
        grads[i] = np.outer(dz, cache["inputs"][i])
        dx = layer.W.T @ dz
    return grads


def backward(net: Network, batch, gamma, spacing=0.5):
    """Per-layer gradients of the reconstruction loss for one batch or the
    mean over a list of batches.  Returns (grads, mean_loss)."""
    batches = batch if isinstance(batch, (list, tuple)) else [batch]
    total = [np.zeros_like(l.W) for l in net.layers]
    loss_sum = 0.0
    for b in batches:
        feats = covariance_features(b.Y, net.input_width)
        theta, cache = forward(net, feats)
        loss, g_theta = loss_grad_theta(b.Y, theta, gamma, spacing)
        loss_sum += loss
        for acc, g in zip(total, _backprop(net, cache, g_theta)):
            acc += g
    n = len(batches)
    return [g / n for g in total], loss_sum / n


def batch_loss(net: Network, batches, gamma, spacing=0.5):
    """Mean reconstruction loss of a list of batches (no gradients)."""
    from .aoa import unsupervised_loss

    losses = []
    for b in batches:
        theta, _ = forward(net, covariance_features(b.Y, net.input_width))
        losses.append(unsupervised_loss(b.Y, theta, gamma, spacing))
    return float(np.mean(losses))


# --- theory oracles ---------------------------------------------------------


def reversible_form_oracle(x, y, W, tol=1e-12):
    """Check the structured gradient form on the one-layer linear model.

    For loss 0.5*||y - W x||^2 the gradient is (W x - y) x^T, which must
    equal B @ W @ C - A with A = y x^T, B = I, C = x x^T; the opposite
    ordering A - B W C must match the negated gradient.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    y = np.asarray(y, dtype=float).reshape(-1)
    G = np.outer(W @ x - y, x)
    A = np.outer(y, x)
    B = np.eye(W.shape[0])
    C = np.outer(x, x)
    return (
        np.max(np.abs(G - (B @ W @ C - A)), initial=0.0) <= tol
        and np.max(np.abs(-G - (A - B @ W @ C)), initial=0.0) <= tol
    )


def covariance_drift_oracle(d, n_samples, rng, chunk=50_000):
    """Monte-Carlo estimate of E||f f^T - f' f'^T||_F^2 for independent
    standard normal f, f' in R^d.

    Uses ||f f^T - g g^T||_F^2 = ||f||^4 + ||g||^4 - 2 (f.g)^2 so memory
    stays O(chunk * d).  The exact value is 2d(d+1).
    """
    if d == 0:
        return 0.0
    total = 0.0
    left = int(n_samples)
    while left > 0:
        m = min(chunk, left)
        f = rng.standard_normal((m, d))
        g = rng.standard_normal((m, d))
        f2 = (f**2).sum(axis=1)
        g2 = (g**2).sum(axis=1)
        ip = (f * g).sum(axis=1)
        total += float((f2**2 + g2**2 - 2.0 * ip**2).sum())
        left -= m
    return total / n_samples


# --- checkpoints ------------------------------------------------------------

_CKPT_MAGIC = b"CFN1"


def save_checkpoint(path, net: Network):
    """Versioned flat dump: dims, support, activations, then row-major f64
    weights per layer."""
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<III", 1, net.u, len(net.layers)))
        f.write(struct.pack("<dd", *net.angle_support))
        for layer in net.layers:
            m, d = layer.W.shape
            act = _ACTIVATIONS.index(layer.activation)
            f.write(struct.pack("<IIB", m, d, act))
        for layer in net.layers:
            f.write(np.ascontiguousarray(layer.W, dtype="<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as f:
        if f.read(4) != _CKPT_MAGIC:
            raise ValueError(f"{path} is not a checkpoint file")
        version, u, n_layers = struct.unpack("<III", f.read(12))
        if version != 1:
            raise ValueError(f"unsupported checkpoint version {version}")
        support = struct.unpack("<dd", f.read(16))
        shapes = []
        for _ in range(n_layers):
            m, d, act = struct.unpack("<IIB", f.read(9))
            shapes.append((m, d, _ACTIVATIONS[act]))
        layers = []
        for i, (m, d, act) in enumerate(shapes):
            w = np.frombuffer(f.read(8 * m * d), dtype="<f8").reshape(m, d).copy()
            layers.append(MatrixLayer(W=w, activation=act, layer_index=i))
    return Network(layers, u, support)
