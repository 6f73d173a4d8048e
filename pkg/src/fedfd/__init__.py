"""Aggregation-free federated learning in the frequency domain.

Clients distill their shards into small synthetic sets, transmit only the
top-left window of each image's orthonormal 2D DCT, and a simulated server
reconstructs the images and trains a global model on the union. The package
also ships the weight-averaging and spatial-payload baselines, byte-exact
communication accounting, and the numerical checks behind the method's
convergence and energy-concentration claims.
"""

from .datasets import LabeledDataset, gen_blobs, init_synthetic, load_cifar_binary, load_idx
from .distill import (
    DistillConfig,
    LossWeights,
    SyntheticSet,
    client_update,
    feature_mean,
    loss_dm,
    loss_fda,
    loss_fdd,
    loss_rsc,
    spatial_select_baseline,
)
from .federation import (
    ClientState,
    CommLedger,
    ContractionReport,
    CurriculumSchedule,
    GlobalModel,
    RunOutcome,
    comm_ratio,
    contraction_experiment,
    curriculum_ipc,
    dirichlet_partition,
    fedavg_round,
    feddm_round,
    ledger_accounting,
    run_experiment,
    run_round,
    server_train,
)
from .frequency import (
    EnergyCurve,
    SpectralBlock,
    Spectrum,
    apply_mask,
    attack_combination_logcount,
    cumulative_energy,
    dct1,
    dct2,
    decode_block,
    encode_block,
    idct1,
    idct2,
    zero_pad,
)
from .manifest import RunManifest, desk_preset, desk32_preset, full_scale_preset, load_manifest, parse_manifest
from .nn import Model, ModelSpec, convnet_mini, cross_entropy, finite_diff_check, sgd_step

__version__ = "0.1.0"
