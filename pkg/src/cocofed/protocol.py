"""Federated orchestration: local phases, uploads, aggregation, broadcast.

Each round runs N_loc local optimizer steps per gNB on its FIFO buffer,
uploads one consolidated (or per-layer, or full-matrix) increment, and
applies the aggregated broadcast.  Before the broadcast is applied, every
gNB rolls back its own locally applied increments so the post-round state
is exactly round-start weights plus the recovered global update; without
the rollback each client would carry its own contribution twice.

All randomness flows from the master seed through named Philox streams,
so two runs of the same config are bit-identical, and per-gNB streams
make concurrent local phases equal to serial execution.
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .aoa import ChannelConfig, mse_metric, partition_angles, synthesize_batch
from .codec import (
    ConsolidatedUpdate,
    combine_layers,
    dequantize,
    devectorize,
    quantize_sr,
    recover_layer,
    up_project,
    vectorize,
)
from .config import ExperimentConfig
from .lowrank import (
    CompressedMoments,
    IncrementAccumulator,
    accumulate,
    adam_step,
    apply_local_update,
    compress_gradient,
    optimizer_state_params,
    weight_params,
)
from .network import Network, backward, covariance_features, forward, load_checkpoint, save_checkpoint
from .projectors import generate_combiner, generate_projectors

log = logging.getLogger("cocofed")

# Stream roles hung off the master seed; never reuse a tag for two purposes.
_TAG_LAYER_SEED = 1
_TAG_COMBINER_SEED = 2
_TAG_INIT = 3
_TAG_WARMUP = 4
_TAG_DATA = 5
_TAG_SAMPLE = 6
_TAG_SR_UP = 7
_TAG_SR_DOWN = 8
_TAG_PARTITION = 9
_TAG_TEST = 10


def _stream(master_seed, *key):
    ss = np.random.SeedSequence(entropy=int(master_seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(master_seed, *key):
    """Stable 64-bit sub-seed for (master, key...)."""
    ss = np.random.SeedSequence(entropy=int(master_seed), spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, np.uint64)[0])


class FifoBuffer:
    """Bounded ring of recent batches; once full, the oldest slot is
    overwritten and the write cursor advances."""

    def __init__(self, capacity):
        if capacity < 1:
            raise ValueError("buffer capacity must be >= 1")
        self.capacity = capacity
        self._items = []
        self._cursor = 0

    def push(self, item):
        if len(self._items) < self.capacity:
            self._items.append(item)
        else:
            self._items[self._cursor] = item
            self._cursor = (self._cursor + 1) % self.capacity

    def sample(self, rng, k):
        n = len(self._items)
        idx = rng.choice(n, size=min(k, n), replace=False)
        return [self._items[i] for i in idx]

    def __len__(self):
        return len(self._items)


@dataclass
class GnbState:
    """Everything one client owns: model replica, data buffer, compressed
    optimizer state, per-round accumulators, and private rng streams."""

    id: int
    net: Network
    buffer: FifoBuffer
    moments: list
    accumulators: list
    data_rng: np.random.Generator
    sample_rng: np.random.Generator
    channel: ChannelConfig
    T: int = 32
    pending_increments: Optional[list] = None  # eta * U_l stash for rollback


@dataclass
class RoundRecord:
    round_index: int
    local_losses: list
    test_mse: float
    uplink_bits: int
    downlink_bits: int
    grad_norms: list
    config_hash: str


@dataclass
class OverheadLedger:
    uplink_bits_per_round: int
    downlink_bits_per_round: int
    optimizer_state_params: int
    weight_params: int

    def to_dict(self):
        return {
            "uplink_bits_per_round": self.uplink_bits_per_round,
            "downlink_bits_per_round": self.downlink_bits_per_round,
            "optimizer_state_params": self.optimizer_state_params,
            "weight_params": self.weight_params,
        }


def make_channel(cfg: ExperimentConfig, support):
    """Channel parameters for one gNB with the given angle support."""
    return ChannelConfig(
        n_nb=cfg.N_NB,
        n_ue=cfg.n_ue,
        n_paths=cfg.n_paths,
        rician_rho=tuple(cfg.rician_rho) if np.ndim(cfg.rician_rho) else cfg.rician_rho,
        snr_range_db=tuple(cfg.snr_range_db) if np.ndim(cfg.snr_range_db) else cfg.snr_range_db,
        spacing_nb=cfg.spacing,
        spacing_ue=cfg.spacing,
        angle_support=support,
        noise_power=cfg.noise_power,
    )


def account_overhead(cfg: ExperimentConfig):
    """Closed-form per-round traffic and optimizer-state sizes.

    The consolidated mode pays K*(q_U*r_a^2 + 32) uplink bits per round
    regardless of depth or layer sizes; the per-layer baseline scales with
    N_W*r^2 and full-matrix averaging with the raw parameter count at 32
    bits each.
    """
    n_w = cfg.n_layers
    if cfg.mode == "cocofed":
        up = cfg.K * (cfg.q_U * cfg.r_a**2 + 32)
        down = cfg.q_D * cfg.r_a**2 + 32
    elif cfg.mode == "perlayer":
        up = cfg.K * n_w * (cfg.q_U * cfg.r**2 + 32)
        down = n_w * (cfg.q_D * cfg.r**2 + 32)
    else:  # fedavg: full-precision, full-dimension matrices
        params = weight_params(cfg.layer_dims)
        up = cfg.K * params * 32
        down = params * 32
    return OverheadLedger(
        uplink_bits_per_round=up,
        downlink_bits_per_round=down,
        optimizer_state_params=optimizer_state_params(cfg.layer_dims, cfg.r),
        weight_params=weight_params(cfg.layer_dims),
    )


def run_local_phase(state: GnbState, projectors, n_loc, gamma, batch_size, spacing=0.5, arrival_prob=1.0):
    """N_loc local steps: ingest any arriving batch, sample a minibatch,
    backprop, down-project the descent direction, compressed-Adam, apply
    the up-projected update, and accumulate.  Returns (mean loss,
    per-layer mean gradient norms); empty-buffer steps are skipped."""
    losses = []
    norms = np.zeros(len(projectors))
    steps = 0
    for _ in range(n_loc):
        if arrival_prob > 0 and state.data_rng.random() < arrival_prob:
            thetas = state.data_rng.uniform(*state.channel.angle_support, size=state.net.u)
            state.buffer.push(
                synthesize_batch(state.channel, state.data_rng, thetas, state.T, gnb_id=state.id)
            )
        if len(state.buffer) == 0:
            log.warning("gnb %d: empty buffer, skipping local step", state.id)
            continue
        minibatch = state.buffer.sample(state.sample_rng, batch_size)
        grads, loss = backward(state.net, minibatch, gamma, spacing)
        losses.append(loss)
        for l, G in enumerate(grads):
            norms[l] += np.linalg.norm(G)
            # descent: feed the negative gradient through the optimizer
            R = compress_gradient(-G, projectors[l])
            R_tilde = adam_step(R, state.moments[l])
            state.net.layers[l].W = apply_local_update(
                state.net.layers[l].W, R_tilde, projectors[l], state.accumulators[l].eta
            )
            accumulate(state.accumulators[l], R_tilde)
        steps += 1
    mean_loss = float(np.mean(losses)) if losses else float("nan")
    mean_norms = (norms / steps) if steps else norms
    return mean_loss, [float(x) for x in mean_norms]


def build_upload(state: GnbState, comb, q_u, rng, round_index=0):
    """Consolidate the accumulated increments into one quantized payload
    and reset the accumulators; the raw increments are stashed on the
    state for the pre-broadcast rollback."""
    deltas = [acc.eta * acc.U.copy() for acc in state.accumulators]
    state.pending_increments = deltas
    cons = combine_layers(deltas, comb)
    cons.gnb_id = state.id
    cons.round_index = round_index
    payload = quantize_sr(vectorize(cons.data), q_u, rng)
    for acc in state.accumulators:
        acc.reset()
    return payload


def aggregate_global(payloads, weights):
    """Data-volume weighted mean of the dequantized uplink vectors."""
    weights = np.asarray(weights, dtype=float)
    if abs(weights.sum() - 1.0) > 1e-12:
        raise ValueError(f"aggregation weights sum to {weights.sum()}, expected 1")
    out = np.zeros(payloads[0].codes.size)
    for w, p in zip(weights, payloads):
        out += w * dequantize(p)
    return out


def broadcast_payload(global_vec, q_d, rng):
    """CPU-side downlink quantization, performed once per round."""
    return quantize_sr(global_vec, q_d, rng)


def rollback_local_increments(state: GnbState, projectors):
    """Remove this client's own applied increments so the broadcast update
    lands on round-start weights."""
    if state.pending_increments is None:
        return
    for l, delta in enumerate(state.pending_increments):
        state.net.layers[l].W -= up_project(delta, projectors[l])
    state.pending_increments = None


def apply_broadcast(state: GnbState, payload, projectors, comb):
    """Decode the broadcast and update every layer from the consolidated
    matrix, after rolling back the client's own local increments."""
    r_a = comb.r_a
    cons = ConsolidatedUpdate(data=devectorize(dequantize(payload), (r_a, r_a)))
    rollback_local_increments(state, projectors)
    for l in range(comb.n_layers):
        state.net.layers[l].W += up_project(recover_layer(cons, comb, l), projectors[l])


def fedavg_reference_round(states, weights, projectors):
    """Exact full-precision per-layer global increments: the weighted sum
    of the clients' uncompressed accumulated updates."""
    n_w = len(projectors)
    out = []
    for l in range(n_w):
        total = np.zeros(projectors[l].shape)
        for w, st in zip(weights, states):
            inc = st.accumulators[l].eta * st.accumulators[l].U
            total += w * up_project(inc, projectors[l])
        out.append(total)
    return out


def perlayer_reference_round(states, weights, projectors, q_u, q_d, up_rngs, down_rng):
    """Per-layer baseline: each layer's r x r increment is quantized and
    shipped separately (no superposition).  Returns the full-dimension
    per-layer global increments after downlink quantization."""
    n_w = len(projectors)
    r = projectors[0].rank
    agg = [np.zeros(r * r) for _ in range(n_w)]
    for w, st, rng in zip(weights, states, up_rngs):
        for l in range(n_w):
            inc = st.accumulators[l].eta * st.accumulators[l].U
            payload = quantize_sr(vectorize(inc), q_u, rng)
            agg[l] += w * dequantize(payload)
    out = []
    for l in range(n_w):
        down = quantize_sr(agg[l], q_d, down_rng)
        out.append(up_project(devectorize(dequantize(down), (r, r)), projectors[l]))
    return out


class Experiment:
    """Owns the full setup derived from one config and runs the rounds."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.ledger = account_overhead(cfg)
        self.layer_seeds = [derive_seed(cfg.master_seed, _TAG_LAYER_SEED, l) for l in range(cfg.n_layers)]
        self.combiner_seed = derive_seed(cfg.master_seed, _TAG_COMBINER_SEED)
        self.projectors = [
            generate_projectors(s, m, d, cfg.r, layer_index=l)
            for l, (s, (m, d)) in enumerate(zip(self.layer_seeds, cfg.layer_dims))
        ]
        self.combiner = generate_combiner(self.combiner_seed, cfg.r, cfg.n_layers, cfg.r_a)
        self.states = []
        self._setup_model()
        self._setup_states()
        self._setup_test_set()
        self.threads = max(1, int(os.environ.get("COCOFED_THREADS", "1")))

    # -- setup ---------------------------------------------------------------

    def _channel(self, support):
        return make_channel(self.cfg, support)

    def _setup_model(self):
        cfg = self.cfg
        if cfg.checkpoint_in:
            self.net0 = load_checkpoint(cfg.checkpoint_in)
        else:
            init_rng = _stream(cfg.master_seed, _TAG_INIT)
            self.net0 = Network.build(
                cfg.layer_dims, cfg.U, cfg.angle_support, init_rng, init_scale=cfg.init_scale
            )
            self._warmup()

    def _warmup(self):
        """Emulate a pre-trained starting point: centralized steps on
        pooled data drawn from the full angle support."""
        cfg = self.cfg
        if cfg.warmup_steps == 0:
            return
        rng = _stream(cfg.master_seed, _TAG_WARMUP)
        channel = self._channel(cfg.angle_support)
        moments = [
            CompressedMoments.zeros(cfg.r, cfg.beta1, cfg.beta2, cfg.epsilon, cfg.adam_bias_mode)
            for _ in range(cfg.n_layers)
        ]
        for _ in range(cfg.warmup_steps):
            batches = []
            for _ in range(cfg.batch_size):
                thetas = rng.uniform(*cfg.angle_support, size=cfg.U)
                batches.append(synthesize_batch(channel, rng, thetas, cfg.T))
            grads, _ = backward(self.net0, batches, cfg.gamma, cfg.spacing)
            for l, G in enumerate(grads):
                R = compress_gradient(-G, self.projectors[l])
                R_tilde = adam_step(R, moments[l])
                self.net0.layers[l].W = apply_local_update(
                    self.net0.layers[l].W, R_tilde, self.projectors[l], cfg.eta
                )

    def _setup_states(self):
        cfg = self.cfg
        for k in range(cfg.K):
            support = partition_angles(
                cfg.partition,
                k,
                _stream(cfg.master_seed, _TAG_PARTITION, k),
                width_deg=cfg.noniid_sector_deg,
                support=cfg.angle_support,
            )
            channel = self._channel(support)
            data_rng = _stream(cfg.master_seed, _TAG_DATA, k)
            state = GnbState(
                id=k,
                net=self.net0.clone(),
                buffer=FifoBuffer(cfg.buffer_capacity),
                moments=[
                    CompressedMoments.zeros(cfg.r, cfg.beta1, cfg.beta2, cfg.epsilon, cfg.adam_bias_mode)
                    for _ in range(cfg.n_layers)
                ],
                accumulators=[IncrementAccumulator.zeros(cfg.r, cfg.eta) for _ in range(cfg.n_layers)],
                data_rng=data_rng,
                sample_rng=_stream(cfg.master_seed, _TAG_SAMPLE, k),
                channel=channel,
                T=cfg.T,
            )
            for _ in range(cfg.prefill_batches):
                thetas = data_rng.uniform(*support, size=cfg.U)
                state.buffer.push(synthesize_batch(channel, data_rng, thetas, cfg.T, gnb_id=k))
            self.states.append(state)

    def _setup_test_set(self):
        """Held-out labeled set from the full support, shared by all gNBs;
        features are precomputed since they do not depend on the model."""
        cfg = self.cfg
        rng = _stream(cfg.master_seed, _TAG_TEST)
        channel = self._channel(cfg.angle_support)
        self.test_thetas = []
        self.test_features = []
        for _ in range(cfg.n_test):
            thetas = np.sort(rng.uniform(*cfg.angle_support, size=cfg.U))
            batch = synthesize_batch(channel, rng, thetas, cfg.T)
            self.test_thetas.append(thetas)
            self.test_features.append(covariance_features(batch.Y, cfg.input_width))

    # -- evaluation ----------------------------------------------------------

    def test_mse(self, net=None):
        net = net or self.states[0].net
        errs = [
            mse_metric(t, forward(net, f)[0])
            for t, f in zip(self.test_thetas, self.test_features)
        ]
        return float(np.mean(errs))

    def _weights(self):
        fills = np.array([len(st.buffer) for st in self.states], dtype=float)
        if fills.sum() == 0:
            return np.full(len(self.states), 1.0 / len(self.states))
        return fills / fills.sum()

    # -- rounds --------------------------------------------------------------

    def _local_phases(self):
        cfg = self.cfg
        if cfg.reset_moments_each_round:
            for st in self.states:
                for mom in st.moments:
                    mom.M[:] = 0.0
                    mom.S[:] = 0.0
                    mom.step = 0

        def work(st):
            return run_local_phase(
                st, self.projectors, cfg.N_loc, cfg.gamma, cfg.batch_size,
                spacing=cfg.spacing, arrival_prob=cfg.arrival_prob,
            )

        if self.threads > 1:
            with ThreadPoolExecutor(max_workers=self.threads) as pool:
                results = list(pool.map(work, self.states))
        else:
            results = [work(st) for st in self.states]
        losses = [r[0] for r in results]
        norms = np.mean([r[1] for r in results], axis=0)
        return losses, [float(x) for x in norms]

    def run_round(self, round_index):
        cfg = self.cfg
        losses, grad_norms = self._local_phases()
        weights = self._weights()

        if cfg.mode == "cocofed":
            payloads = [
                build_upload(st, self.combiner, cfg.q_U, _stream(cfg.master_seed, _TAG_SR_UP, st.id, round_index), round_index)
                for st in self.states
            ]
            uplink = sum(p.bit_count for p in payloads)
            global_vec = aggregate_global(payloads, weights)
            down = broadcast_payload(global_vec, cfg.q_D, _stream(cfg.master_seed, _TAG_SR_DOWN, round_index))
            downlink = down.bit_count
            for st in self.states:
                apply_broadcast(st, down, self.projectors, self.combiner)
        elif cfg.mode == "fedavg":
            for st in self.states:
                st.pending_increments = [acc.eta * acc.U.copy() for acc in st.accumulators]
            global_incs = fedavg_reference_round(self.states, weights, self.projectors)
            for st in self.states:
                for acc in st.accumulators:
                    acc.reset()
                rollback_local_increments(st, self.projectors)
                for l, inc in enumerate(global_incs):
                    st.net.layers[l].W += inc
            uplink = self.ledger.uplink_bits_per_round
            downlink = self.ledger.downlink_bits_per_round
        else:  # perlayer
            for st in self.states:
                st.pending_increments = [acc.eta * acc.U.copy() for acc in st.accumulators]
            up_rngs = [
                _stream(cfg.master_seed, _TAG_SR_UP, st.id, round_index) for st in self.states
            ]
            down_rng = _stream(cfg.master_seed, _TAG_SR_DOWN, round_index)
            global_incs = perlayer_reference_round(
                self.states, weights, self.projectors, cfg.q_U, cfg.q_D, up_rngs, down_rng
            )
            for st in self.states:
                for acc in st.accumulators:
                    acc.reset()
                rollback_local_increments(st, self.projectors)
                for l, inc in enumerate(global_incs):
                    st.net.layers[l].W += inc
            uplink = self.ledger.uplink_bits_per_round
            downlink = self.ledger.downlink_bits_per_round

        return RoundRecord(
            round_index=round_index,
            local_losses=losses,
            test_mse=self.test_mse(),
            uplink_bits=uplink,
            downlink_bits=downlink,
            grad_norms=grad_norms,
            config_hash=self.cfg.config_hash,
        )

    def run(self):
        cfg = self.cfg
        records = [
            RoundRecord(
                round_index=0,
                local_losses=[float("nan")] * cfg.K,
                test_mse=self.test_mse(self.net0),
                uplink_bits=0,
                downlink_bits=0,
                grad_norms=[0.0] * cfg.n_layers,
                config_hash=cfg.config_hash,
            )
        ]
        for i in range(1, cfg.rounds + 1):
            rec = self.run_round(i)
            log.info(
                "round %d: test_mse=%.6f uplink=%d bits", i, rec.test_mse, rec.uplink_bits
            )
            records.append(rec)
        if cfg.checkpoint_out:
            save_checkpoint(cfg.checkpoint_out, self.states[0].net if self.states else self.net0)
        return records


def run_experiment(cfg: ExperimentConfig):
    """Full pipeline per the workflow: setup, rounds, records."""
    return Experiment(cfg).run()


def records_to_csv(records, cfg: ExperimentConfig):
    """Deterministic CSV rendering of the round records (no wall clock, so
    identical configs produce byte-identical output)."""
    k = cfg.K
    n_w = cfg.n_layers
    cols = (
        ["round"]
        + [f"loss_gnb{i}" for i in range(k)]
        + ["test_mse", "uplink_bits", "downlink_bits"]
        + [f"grad_norm_l{i}" for i in range(n_w)]
        + ["config_hash"]
    )
    lines = [",".join(cols)]
    for rec in records:
        row = (
            [str(rec.round_index)]
            + [repr(x) for x in rec.local_losses]
            + [repr(rec.test_mse), str(rec.uplink_bits), str(rec.downlink_bits)]
            + [repr(x) for x in rec.grad_norms]
            + [rec.config_hash]
        )
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def summarize(records, cfg: ExperimentConfig):
    ledger = account_overhead(cfg)
    return {
        "final_mse": records[-1].test_mse,
        "initial_mse": records[0].test_mse,
        "total_uplink_bits": int(sum(r.uplink_bits for r in records)),
        "total_downlink_bits": int(sum(r.downlink_bits for r in records)),
        "rounds": len(records) - 1,
        "config_hash": cfg.config_hash,
        "ledger": ledger.to_dict(),
    }
