"""Absorption estimation with twin-beam and classical light: samplers, estimators, simulation."""

__version__ = "0.1.0"

from .channels import (  # noqa: E402
    ChannelConfig,
    SourceKind,
    SourceModel,
    apply_channel,
    simulate_pairs,
    split_classical,
    theoretical_joint_stats,
    thin,
)
from .estimators import (  # noqa: E402
    BoundKind,
    CalibrationRecord,
    EstimatorKind,
    bound,
    calibrate,
    estimate,
    theory_variance,
)
from .photostat import (  # noqa: E402
    CountPair,
    JointStats,
    make_stream,
    reduce_stats,
    sample_fock_pair,
    sample_poisson,
    sample_thermal,
    sample_twb_pair,
)
from .simlab import FrameConfig, TrialEnsemble, invert_efficiency, run_experiment  # noqa: E402
