"""Transmission codec: superposition of layer updates into one r_a x r_a
matrix, vectorization, stochastic-rounding quantization, and the inverse
path (dequantize, devectorize, per-layer recovery, up-projection).

The wire format is little-endian: a 15-byte header
{gnb_id: u32, round: u32, q: u8, r_a: u16, scale: f32} followed by the
codes packed q bits each in code order (LSB-first within the stream).
"""

import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .projectors import Combiner

# q == LOSSLESS means "no quantization": raw values ride along instead of
# integer codes, still accounted at 32 bits each.
LOSSLESS_Q = 32

_BROADCAST_GNB_ID = 0xFFFFFFFF
_HEADER = struct.Struct("<IIBHf")


@dataclass
class ConsolidatedUpdate:
    """One r_a x r_a matrix carrying every layer's compressed increment."""

    data: np.ndarray
    round_index: int = 0
    gnb_id: Optional[int] = None  # None for the global broadcast


@dataclass
class QuantizedPayload:
    """Integer codes plus one scale: the uplink/downlink wire content.

    With q == LOSSLESS_Q, `codes` holds the raw float values instead.
    """

    codes: np.ndarray
    scale: float
    q: int

    @property
    def bit_count(self):
        return self.q * self.codes.size + 32


def combine_layers(compressed, comb: Combiner):
    """Superimpose n_w compressed r x r updates: sum_l V_l @ A_l @ V_l^T."""
    if len(compressed) != comb.n_layers:
        raise ValueError(
            f"got {len(compressed)} layer updates, combiner has {comb.n_layers}"
        )
    out = np.zeros((comb.r_a, comb.r_a))
    for l, a in enumerate(compressed):
        if a.shape != (comb.rank, comb.rank):
            raise ValueError(
                f"layer {l} update shape {a.shape} != ({comb.rank}, {comb.rank})"
            )
        v = comb.block(l)
        out += v @ a @ v.T
    return ConsolidatedUpdate(data=out)


def recover_layer(cons: ConsolidatedUpdate, comb: Combiner, l):
    """Filter layer l back out of the consolidated matrix: V_l^T @ D @ V_l."""
    v = comb.block(l)
    return v.T @ cons.data @ v


def up_project(recovered, proj):
    """Map an r x r recovered update back to the full m x d space."""
    if recovered.shape != (proj.rank, proj.rank):
        raise ValueError(
            f"recovered shape {recovered.shape} != ({proj.rank}, {proj.rank})"
        )
    return proj.P.T @ recovered @ proj.Q.T


def vectorize(M):
    """Column-major flattening of a matrix."""
    return np.asarray(M).flatten(order="F")


def devectorize(v, shape=None):
    """Inverse of vectorize; infers a square shape when none is given."""
    v = np.asarray(v)
    if shape is None:
        n = int(np.sqrt(v.size))
        if n * n != v.size:
            raise ValueError(f"vector of length {v.size} is not a square matrix")
        shape = (n, n)
    if shape[0] * shape[1] != v.size:
        raise ValueError(f"vector of length {v.size} does not fill shape {shape}")
    return v.reshape(shape, order="F")


def quantize_sr(v, q, rng):
    """Stochastically round v onto a symmetric 2^q-level grid.

    The grid spans [-scale, scale] with scale = max|v_i| and spacing
    2*scale/(2^q - 1).  Each entry rounds to an adjacent level with
    probabilities that make the expectation exact; entries already on the
    grid are kept deterministically.  q == LOSSLESS_Q bypasses coding.
    """
    v = np.asarray(v, dtype=float)
    if not (1 <= q <= LOSSLESS_Q):
        raise ValueError(f"bit width q={q} must be in [1, {LOSSLESS_Q}]")
    if not np.all(np.isfinite(v)):
        raise ValueError("input vector has non-finite entries")
    if q == LOSSLESS_Q:
        return QuantizedPayload(codes=v.copy(), scale=float(np.max(np.abs(v), initial=0.0)), q=q)
    scale = float(np.max(np.abs(v), initial=0.0))
    n_levels = 2**q
    if scale == 0.0:
        return QuantizedPayload(codes=np.zeros(v.size, dtype=np.uint32), scale=0.0, q=q)
    delta = 2.0 * scale / (n_levels - 1)
    x = np.clip((v + scale) / delta, 0.0, n_levels - 1)
    lower = np.floor(x)
    frac = x - lower
    codes = lower + (rng.random(v.shape) < frac)
    codes = np.minimum(codes, n_levels - 1).astype(np.uint32)
    return QuantizedPayload(codes=codes, scale=scale, q=q)


def dequantize(payload: QuantizedPayload):
    """Map codes back to reals: -scale + code * spacing."""
    if payload.q == LOSSLESS_Q:
        return np.asarray(payload.codes, dtype=float).copy()
    if payload.scale == 0.0:
        return np.zeros(payload.codes.size)
    delta = 2.0 * payload.scale / (2**payload.q - 1)
    return -payload.scale + payload.codes.astype(float) * delta


def _pack_bits(codes, q):
    bits = ((codes[:, None].astype(np.uint64) >> np.arange(q, dtype=np.uint64)) & 1).astype(
        np.uint8
    )
    return np.packbits(bits.ravel(), bitorder="little").tobytes()


def _unpack_bits(raw, n, q):
    bits = np.unpackbits(
        np.frombuffer(raw, dtype=np.uint8), count=n * q, bitorder="little"
    )
    weights = (1 << np.arange(q, dtype=np.uint64)).astype(np.uint64)
    return (bits.reshape(n, q).astype(np.uint64) * weights).sum(axis=1).astype(np.uint32)


def encode_payload(payload: QuantizedPayload, gnb_id=None, round_index=0):
    """Serialize a payload of r_a^2 codes to wire bytes (see module doc)."""
    n = payload.codes.size
    r_a = int(np.sqrt(n))
    if r_a * r_a != n:
        raise ValueError(f"payload length {n} is not a square matrix")
    gid = _BROADCAST_GNB_ID if gnb_id is None else int(gnb_id)
    head = _HEADER.pack(gid, int(round_index), payload.q, r_a, payload.scale)
    if payload.q == LOSSLESS_Q:
        body = np.asarray(payload.codes, dtype="<f4").tobytes()
    else:
        body = _pack_bits(payload.codes, payload.q)
    return head + body


def decode_payload(raw):
    """Inverse of encode_payload; returns (payload, gnb_id, round_index)."""
    gid, round_index, q, r_a, scale = _HEADER.unpack_from(raw, 0)
    body = raw[_HEADER.size :]
    n = r_a * r_a
    if q == LOSSLESS_Q:
        codes = np.frombuffer(body, dtype="<f4", count=n).astype(float)
    else:
        codes = _unpack_bits(body, n, q)
    payload = QuantizedPayload(codes=codes, scale=scale, q=q)
    gnb_id = None if gid == _BROADCAST_GNB_ID else gid
    return payload, gnb_id, round_index
