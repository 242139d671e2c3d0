"""Fault-tolerant control simulation toolkit.

A differential-drive robot with injectable wheel-puncture faults, a bank of
fault-detection filters (EKF, UKF, interacting-multiple-model variants) and a
receding-horizon controller whose process model is reconfigured online from
the filter's wheel-radius estimates.
"""

__version__ = "0.1.0"

from . import dynamics, estimators, harness, imm, mpc, pseudospectral, sqp

__all__ = [
    "dynamics",
    "estimators",
    "imm",
    "pseudospectral",
    "sqp",
    "mpc",
    "harness",
]
