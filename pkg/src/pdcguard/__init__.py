"""Distributed oscillation-mode estimation with attack detection.

Local estimators (PDCs) jointly fit the characteristic polynomial of a
ringdown signal with consensus ADMM; a supervisor aggregates their
estimates and can detect and isolate estimators that inject biases.
"""

from pdcguard.signalgen import (
    AreaPartition,
    ChannelSpec,
    Mode,
    RingdownSignal,
    SignalSpec,
    partition_channels,
    synth_ringdown,
)
from pdcguard.prony import (
    CharPolyCoeffs,
    HankelBlock,
    build_hankel,
    centralized_ls,
    char_poly_roots,
    compare_modes,
    stack_blocks,
    to_continuous_modes,
)
from pdcguard.attacks import AttackSpec, BiasGenerator, apply_attack, bias_at
from pdcguard.admm import ConsensusLoop, EstimatorState, RoundOrder, run_loop
from pdcguard.detection import DetectionReport

__version__ = "0.1.0"

__all__ = [
    "AreaPartition",
    "AttackSpec",
    "BiasGenerator",
    "ChannelSpec",
    "CharPolyCoeffs",
    "ConsensusLoop",
    "DetectionReport",
    "EstimatorState",
    "HankelBlock",
    "Mode",
    "RingdownSignal",
    "RoundOrder",
    "SignalSpec",
    "apply_attack",
    "bias_at",
    "build_hankel",
    "centralized_ls",
    "char_poly_roots",
    "compare_modes",
    "partition_channels",
    "run_loop",
    "stack_blocks",
    "synth_ringdown",
    "to_continuous_modes",
]
