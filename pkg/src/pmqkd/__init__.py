"""Phase-matching QKD: analytic model, decoy estimation, key rates, simulation, Fock-space checks."""
from .decoy import (
    ChernoffInterval,
    DecoyEstimate,
    TallyTable,
    asymptotic_estimate,
    asymptotic_q_parity,
    chernoff_direct,
    chernoff_inverse,
    estimate_Y1_two_intensity,
    expected_tallies,
    finite_size_estimate,
)
from .errors import ConfigError, DegenerateDataError
from .model import ChannelParams, PhotonDistribution, ProtocolParams
from .montecarlo import PhaseDrift, SimConfig, simulate, simulate_with_truth
from .rates import (
    GroupSelection,
    RatePoint,
    mdi_rate,
    plob_bound,
    pm_rate_asymptotic,
    pm_rate_finite,
    scan_distance,
)

__all__ = [
    "ChannelParams",
    "ChernoffInterval",
    "ConfigError",
    "DecoyEstimate",
    "DegenerateDataError",
    "GroupSelection",
    "PhaseDrift",
    "PhotonDistribution",
    "ProtocolParams",
    "RatePoint",
    "SimConfig",
    "TallyTable",
    "asymptotic_estimate",
    "asymptotic_q_parity",
    "chernoff_direct",
    "chernoff_inverse",
    "estimate_Y1_two_intensity",
    "expected_tallies",
    "finite_size_estimate",
    "mdi_rate",
    "plob_bound",
    "pm_rate_asymptotic",
    "pm_rate_finite",
    "scan_distance",
    "simulate",
    "simulate_with_truth",
]
