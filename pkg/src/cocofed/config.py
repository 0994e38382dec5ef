"""Experiment configuration: defaults, JSON parsing, and validation.

Config files are strict JSON; unknown keys are rejected (keys starting
with "_" are treated as comments).  Command-line flags override file
values, which override the built-in defaults.
"""

import hashlib
import json
from dataclasses import dataclass, field, fields

import numpy as np

MODES = ("cocofed", "fedavg", "perlayer")
PARTITIONS = ("iid", "noniid")


class ConfigError(Exception):
    """Config problem with a machine-readable code and the offending key."""

    def __init__(self, code, key, message):
        super().__init__(message)
        self.code = code
        self.key = key


def _default_layer_dims(u):
    return [[48, 64], [48, 48], [8 * u, 48]]


@dataclass
class ExperimentConfig:
    master_seed: int = 0
    K: int = 6
    U: int = 3
    T: int = 32
    N_NB: int = 64
    r: int = 24
    r_a: int = 60
    q_U: int = 2
    q_D: int = 8
    N_loc: int = 20
    rounds: int = 50
    buffer_capacity: int = 2048
    mode: str = "cocofed"
    partition: str = "iid"
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-3
    adam_bias_mode: str = "paper"
    reset_moments_each_round: bool = False
    gamma: float = 1e-2
    eta: float = 1e-3
    warmup_steps: int = 100
    layer_dims: list = None
    batch_size: int = 8
    n_test: int = 2048
    prefill_batches: int = 64
    arrival_prob: float = 1.0
    n_paths: int = 9
    n_ue: int = 1
    rician_rho: object = (0.0, 15.0)
    snr_range_db: object = (0.0, 20.0)
    spacing: float = 0.5
    noise_power: float = 1.0
    angle_support_deg: object = (-60.0, 60.0)
    noniid_sector_deg: float = 30.0
    init_scale: float = 1.0
    checkpoint_in: str = None
    checkpoint_out: str = None

    def __post_init__(self):
        if self.layer_dims is None:
            self.layer_dims = _default_layer_dims(self.U)
        self.layer_dims = [list(map(int, d)) for d in self.layer_dims]
        validate(self)

    def to_dict(self):
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = list(v)
            out[f.name] = v
        return out

    @property
    def config_hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    @property
    def input_width(self):
        return self.layer_dims[0][1]

    @property
    def n_layers(self):
        return len(self.layer_dims)

    @property
    def angle_support(self):
        lo, hi = self.angle_support_deg
        return (lo * np.pi / 180.0, hi * np.pi / 180.0)


def _fail(key, message):
    raise ConfigError("constraint", key, f"config key {key!r}: {message}")


def validate(cfg: ExperimentConfig):
    if cfg.K < 1:
        _fail("K", "need at least one gNB")
    if cfg.U < 1:
        _fail("U", "need at least one source")
    if cfg.U >= cfg.N_NB:
        _fail("U", f"number of sources must be < N_NB={cfg.N_NB}")
    if cfg.T < 1:
        _fail("T", "need at least one snapshot")
    if cfg.N_NB < 2:
        _fail("N_NB", "need at least two antennas")
    if not cfg.layer_dims or any(len(d) != 2 for d in cfg.layer_dims):
        _fail("layer_dims", "must be a list of [m, d] pairs")
    min_dim = min(min(m, d) for m, d in cfg.layer_dims)
    if not 1 <= cfg.r <= min_dim:
        _fail("r", f"rank must satisfy 1 <= r <= {min_dim} (smallest layer dim)")
    if cfg.r_a < 1:
        _fail("r_a", "transmission dimension must be >= 1")
    for key in ("q_U", "q_D"):
        q = getattr(cfg, key)
        if not 1 <= q <= 32:
            _fail(key, "bit width must be in 1..32")
    if cfg.N_loc < 0:
        _fail("N_loc", "must be >= 0")
    if cfg.rounds < 0:
        _fail("rounds", "must be >= 0")
    if cfg.buffer_capacity < 1:
        _fail("buffer_capacity", "must be >= 1")
    if cfg.mode not in MODES:
        _fail("mode", f"must be one of {MODES}")
    if cfg.partition not in PARTITIONS:
        _fail("partition", f"must be one of {PARTITIONS}")
    for key in ("beta1", "beta2"):
        b = getattr(cfg, key)
        if not 0.0 < b < 1.0:
            _fail(key, "must be in (0, 1)")
    if cfg.adam_bias_mode not in ("paper", "standard"):
        _fail("adam_bias_mode", "must be 'paper' or 'standard'")
    if cfg.epsilon <= 0:
        _fail("epsilon", "must be positive")
    if cfg.gamma <= 0:
        _fail("gamma", "must be positive")
    if cfg.eta <= 0:
        _fail("eta", "must be positive")
    if cfg.warmup_steps < 0:
        _fail("warmup_steps", "must be >= 0")
    if cfg.batch_size < 1:
        _fail("batch_size", "must be >= 1")
    if cfg.n_test < 1:
        _fail("n_test", "must be >= 1")
    if cfg.prefill_batches < 0:
        _fail("prefill_batches", "must be >= 0")
    if not 0.0 <= cfg.arrival_prob <= 1.0:
        _fail("arrival_prob", "must be in [0, 1]")
    if cfg.n_paths < 1:
        _fail("n_paths", "must be >= 1")
    if cfg.n_ue < 1:
        _fail("n_ue", "must be >= 1")
    if cfg.spacing <= 0:
        _fail("spacing", "must be positive")
    if cfg.noise_power <= 0:
        _fail("noise_power", "must be positive")
    lo, hi = cfg.angle_support_deg
    if not -90.0 <= lo < hi <= 90.0:
        _fail("angle_support_deg", "must be an increasing pair inside [-90, 90]")
    if not 0 < cfg.noniid_sector_deg <= (hi - lo):
        _fail("noniid_sector_deg", "sector must fit inside the angle support")
    if cfg.input_width > cfg.N_NB * cfg.N_NB:
        _fail("layer_dims", f"input width {cfg.input_width} exceeds covariance size")
    m_out = cfg.layer_dims[-1][0]
    if m_out % cfg.U:
        _fail("layer_dims", f"last layer width {m_out} must be divisible by U={cfg.U}")
    for a, b in zip(cfg.layer_dims, cfg.layer_dims[1:]):
        if b[1] != a[0]:
            _fail("layer_dims", f"layer chain broken: {a} -> {b}")
    return cfg


_KNOWN_KEYS = {f.name for f in fields(ExperimentConfig)}


def config_from_dict(data, overrides=None):
    """Build a validated config from a parsed JSON dict, rejecting unknown
    keys; `overrides` (e.g. CLI flags) take precedence over file values."""
    if not isinstance(data, dict):
        raise ConfigError("malformed_json", "<root>", "config root must be an object")
    clean = {}
    for key, value in data.items():
        if key.startswith("_"):
            continue
        if key not in _KNOWN_KEYS:
            raise ConfigError("unknown_key", key, f"unknown config key {key!r}")
        clean[key] = value
    if overrides:
        for key, value in overrides.items():
            if value is not None:
                clean[key] = value
    try:
        return ExperimentConfig(**clean)
    except TypeError as exc:
        raise ConfigError("constraint", "<root>", str(exc)) from exc


def parse_config(path, overrides=None):
    """Load, merge, and validate a JSON config file."""
    try:
        with open(path) as f:
            raw = f.read()
    except FileNotFoundError as exc:
        raise ConfigError("missing_file", str(path), f"config file not found: {path}") from exc
    try:
        data = json.loads(raw) if raw.strip() else {}
    except json.JSONDecodeError as exc:
        raise ConfigError("malformed_json", str(path), f"invalid JSON in {path}: {exc}") from exc
    return config_from_dict(data, overrides)
