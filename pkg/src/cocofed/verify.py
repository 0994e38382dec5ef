"""Self-contained property suite: numerical checks of the building blocks.

Each check returns a dict with a pass flag and a short detail string; the
CLI `verify` subcommand runs them all and reports JSON.  These assert the
mathematically exact properties of the implementation (independent of any
particular experiment), so a correct build passes every check.
"""

import numpy as np

from .aoa import ChannelConfig, synthesize_batch
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
from .lowrank import compress_gradient
from .network import Network, backward, covariance_drift_oracle
from .projectors import gaussian_gram_tail_frequency, generate_combiner, generate_projectors, jl_distance_success


def check_orthogonality_tail(r_a_values=(128, 512, 2048), eps_values=(0.1, 0.2, 0.4), n_seeds=3):
    """Empirical Gram-deviation frequency never exceeds 4*exp(-eps^2 r_a/8)."""
    worst = ""
    for r_a in r_a_values:
        freq_by_eps = {eps: 0.0 for eps in eps_values}
        n_cols = r_a + 1  # narrowest shape that still exercises the regime
        for eps in eps_values:
            freq = gaussian_gram_tail_frequency(r_a, n_cols, eps, seeds=range(n_seeds))
            bound = 4.0 * np.exp(-(eps**2) * r_a / 8.0)
            freq_by_eps[eps] = (freq, bound)
            if freq > min(bound, 1.0):
                return {
                    "name": "orthogonality_tail",
                    "passed": False,
                    "detail": f"r_a={r_a} eps={eps}: freq {freq:.3g} > bound {bound:.3g}",
                }
        worst = f"r_a={r_a}: " + ", ".join(
            f"eps={e}: {f:.2g}<={min(b, 1.0):.2g}" for e, (f, b) in freq_by_eps.items()
        )
    return {"name": "orthogonality_tail", "passed": True, "detail": worst}


def check_jl(n_vectors=20, dim=1000, eps=0.5, n_seeds=100):
    r_a = int(np.ceil(24.0 * np.log(n_vectors) / eps**2))
    frac = jl_distance_success(n_vectors, dim, eps, r_a, seeds=range(n_seeds))
    target = (n_vectors - 1) / n_vectors - 0.03
    return {
        "name": "jl_preservation",
        "passed": frac >= target,
        "detail": f"success fraction {frac:.3f} (target >= {target:.3f}, r_a={r_a})",
    }


def check_stochastic_rounding(q_values=(2, 4, 8), n_vectors=10, length=32, n_draws=20_000, seed=0):
    """SR is unbiased and every entry's error second moment stays within
    the per-scalar grid bound (half spacing squared)."""
    rng = np.random.default_rng(seed)
    for q in q_values:
        for _ in range(n_vectors):
            v = rng.standard_normal(length)
            scale = np.abs(v).max()
            # tiling keeps the max-abs scale, so one call draws everything
            payload = quantize_sr(np.tile(v, n_draws), q, rng)
            draws = dequantize(payload).reshape(n_draws, length)
            err = draws - v
            bias = err.mean(axis=0)
            sem = err.std(axis=0) / np.sqrt(n_draws)
            if np.any(np.abs(bias) > np.maximum(5.0 * sem, 1e-15)):
                return {
                    "name": "stochastic_rounding",
                    "passed": False,
                    "detail": f"q={q}: bias {np.abs(bias).max():.3g} beyond 5 standard errors",
                }
            per_entry = (err**2).mean(axis=0)
            bound = (scale / (2**q - 1)) ** 2
            if np.any(per_entry > bound * 1.05):
                return {
                    "name": "stochastic_rounding",
                    "passed": False,
                    "detail": f"q={q}: per-entry error {per_entry.max():.3g} > {bound:.3g}",
                }
    return {"name": "stochastic_rounding", "passed": True, "detail": f"q in {q_values}: unbiased, variance within grid bound"}


def make_lowrank_increments(n_gnbs, layer_dims, r, rng, magnitude=1.0):
    """Synthetic per-gNB per-layer increments shaped like real uploads:
    up-projections of random r x r cores, so they are exactly rank <= r."""
    projs = [generate_projectors(1000 + l, m, d, r) for l, (m, d) in enumerate(layer_dims)]
    incs = []
    for _ in range(n_gnbs):
        cores = [magnitude * rng.standard_normal((r, r)) for _ in layer_dims]
        incs.append([p.P.T @ c @ p.Q.T for p, c in zip(projs, cores)])
    return projs, incs


def discrepancy_vs_reference(projs, incs, weights, comb, q_u, q_d, n_draws, rng):
    """Monte-Carlo per-layer E||recovered - reference||_F^2 through the
    quantized superposition channel, plus the instantiated error bound."""
    n_w = len(projs)
    reference = []
    for l in range(n_w):
        reference.append(sum(w * inc[l] for w, inc in zip(weights, incs)))
    m_bound = max(np.abs(inc[l]).max() for inc in incs for l in range(n_w))
    d_p = max(np.linalg.norm(p.P) for p in projs)
    d_v = max(np.linalg.norm(comb.block(l)) for l in range(n_w))
    bound = (
        2**q_d * d_p * d_v * n_w * comb.r_a**2 * m_bound
        / ((2**q_d - 1) * (2**q_u - 1))
    ) ** 2

    compressed = [
        [compress_gradient(inc[l], projs[l]) for l in range(n_w)] for inc in incs
    ]
    sq_err = np.zeros(n_w)
    consolidated = [combine_layers(comp, comb) for comp in compressed]
    for _ in range(n_draws):
        agg = np.zeros(comb.r_a * comb.r_a)
        for w, cons in zip(weights, consolidated):
            payload = quantize_sr(vectorize(cons.data), q_u, rng)
            agg += w * dequantize(payload)
        down = quantize_sr(agg, q_d, rng)
        received = ConsolidatedUpdate(data=devectorize(dequantize(down), (comb.r_a, comb.r_a)))
        for l in range(n_w):
            rec = up_project(recover_layer(received, comb, l), projs[l])
            sq_err[l] += np.linalg.norm(rec - reference[l]) ** 2
    return sq_err / n_draws, bound


def check_discrepancy(seed=0):
    rng = np.random.default_rng(seed)
    layer_dims = [(12, 10), (10, 12), (8, 8)]
    r = 4
    projs, incs = make_lowrank_increments(3, layer_dims, r, rng, magnitude=1e-3)
    comb = generate_combiner(77, r, len(layer_dims), r_a=r * len(layer_dims))
    weights = np.full(3, 1 / 3)
    prev = None
    for q_u in (2, 4, 8):
        err, bound = discrepancy_vs_reference(projs, incs, weights, comb, q_u, 16, 60, rng)
        if err.max() > bound:
            return {
                "name": "discrepancy_bound",
                "passed": False,
                "detail": f"q_U={q_u}: error {err.max():.3g} exceeds bound {bound:.3g}",
            }
        total = err.sum()
        if prev is not None and total > prev * 1.02:
            return {
                "name": "discrepancy_bound",
                "passed": False,
                "detail": f"q_U={q_u}: error {total:.3g} not decreasing (prev {prev:.3g})",
            }
        prev = total
    return {"name": "discrepancy_bound", "passed": True, "detail": "bound holds, error decreases with q_U"}


def check_gradient(n_cases=5, seed=0):
    """Analytic backward vs central finite differences on small nets."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_cases):
        u = 2
        dims = [(6, 8), (u * 2, 6)]
        net = Network.build(dims, u, (-1.0, 1.0), rng)
        channel = ChannelConfig(n_nb=6, n_paths=2, rician_rho=5.0, snr_range_db=15.0, angle_support=(-1.0, 1.0))
        # feature width 8 <= 36
        batch = synthesize_batch(channel, rng, rng.uniform(-0.8, 0.8, size=u), T=12)
        grads, _ = backward(net, batch, gamma=1e-2)
        rel = _fd_relative_error(net, batch, grads, gamma=1e-2, step=1e-5)
        worst = max(worst, rel)
        if rel > 1e-4:
            return {"name": "gradient_check", "passed": False, "detail": f"relative error {rel:.3g} > 1e-4"}
    return {"name": "gradient_check", "passed": True, "detail": f"worst relative error {worst:.3g}"}


def _fd_relative_error(net, batch, grads, gamma, step):
    from .network import batch_loss

    worst = 0.0
    for l, layer in enumerate(net.layers):
        g = grads[l]
        fd = np.zeros_like(g)
        it = np.nditer(g, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            orig = layer.W[idx]
            layer.W[idx] = orig + step
            hi = batch_loss(net, [batch], gamma)
            layer.W[idx] = orig - step
            lo = batch_loss(net, [batch], gamma)
            layer.W[idx] = orig
            fd[idx] = (hi - lo) / (2 * step)
            it.iternext()
        denom = max(np.linalg.norm(fd), 1e-12)
        worst = max(worst, np.linalg.norm(g - fd) / denom)
    return worst


def check_covariance_drift(d=8, n=200_000, seed=0):
    """The Monte-Carlo drift estimate must match its exact closed form
    2d(d+1) (for d=8: 144) within 3%."""
    est = covariance_drift_oracle(d, n, np.random.default_rng(seed))
    exact = 2.0 * d * (d + 1)
    ok = abs(est - exact) <= 0.03 * exact
    return {
        "name": "covariance_drift",
        "passed": bool(ok),
        "detail": f"estimate {est:.2f} vs exact {exact:.0f}",
    }


def run_all(fast=True):
    checks = [
        check_orthogonality_tail(n_seeds=2 if fast else 20),
        check_jl(n_seeds=60 if fast else 500),
        check_stochastic_rounding(n_vectors=4 if fast else 10, n_draws=10_000 if fast else 50_000),
        check_discrepancy(),
        check_gradient(n_cases=3 if fast else 10),
        check_covariance_drift(n=100_000 if fast else 400_000),
    ]
    return {"checks": checks, "all_passed": all(c["passed"] for c in checks)}
