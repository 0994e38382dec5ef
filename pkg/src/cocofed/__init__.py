"""Deterministic desk-scale simulator of memory- and communication-
efficient federated learning: seed-shared low-rank gradient projection for
local training, orthogonal-subspace superposition plus stochastic-rounding
quantization for transmission, exercised on unsupervised angle-of-arrival
estimation over a synthetic Rician channel."""

from .aoa import (
    ChannelConfig,
    SignalBatch,
    mse_metric,
    music_estimate,
    partition_angles,
    reconstruct_signal,
    steering_vector,
    synthesize_batch,
    unsupervised_loss,
)
from .codec import (
    LOSSLESS_Q,
    ConsolidatedUpdate,
    QuantizedPayload,
    combine_layers,
    decode_payload,
    dequantize,
    devectorize,
    encode_payload,
    quantize_sr,
    recover_layer,
    up_project,
    vectorize,
)
from .config import ConfigError, ExperimentConfig, parse_config
from .lowrank import (
    CompressedMoments,
    IncrementAccumulator,
    accumulate,
    adam_step,
    apply_local_update,
    compress_gradient,
)
from .network import (
    MatrixLayer,
    Network,
    backward,
    covariance_drift_oracle,
    covariance_features,
    forward,
    load_checkpoint,
    reversible_form_oracle,
    save_checkpoint,
)
from .projectors import (
    Combiner,
    CombinerMode,
    ProjectorPair,
    generate_combiner,
    generate_omega,
    generate_projectors,
)
from .protocol import (
    Experiment,
    FifoBuffer,
    GnbState,
    OverheadLedger,
    RoundRecord,
    account_overhead,
    aggregate_global,
    apply_broadcast,
    build_upload,
    fedavg_reference_round,
    perlayer_reference_round,
    run_experiment,
    run_local_phase,
)

__version__ = "0.1.0"
