"""Exception hierarchy shared by all modules."""

from __future__ import annotations


class MVJumpError(Exception):
    """Base class for every error raised by the engine."""


# measure_kit
class EmptySampleSet(MVJumpError):
    pass


class NonFiniteEntry(MVJumpError):
    pass


class DimensionMismatch(MVJumpError):
    pass


class UnsupportedDimension(MVJumpError):
    pass


class InvalidMeasure(MVJumpError):
    pass


# coefficient_model
class DerivativeMismatch(MVJumpError):
    """A supplied derivative disagrees with its finite-difference probe."""

    def __init__(self, field: str, probe: object, error: float):
        self.field = field
        self.probe = probe
        self.error = error
        super().__init__(f"derivative mismatch in {field!r} at probe {probe}: relative error {error:.3e}")


# jump_driver
class InvalidWindow(MVJumpError):
    pass


class QuadratureFailure(MVJumpError):
    pass


class NonConvergentLimit(MVJumpError):
    pass


# mv_simulator
class BlowUp(MVJumpError):
    pass


class SchemeInstability(MVJumpError):
    pass


class LawFlowGap(MVJumpError):
    pass


class NonContraction(MVJumpError):
    pass


# tangent_flows
class BankTooSmall(MVJumpError):
    pass


class FixedPointDivergence(MVJumpError):
    pass


# malliavin_engine
class NonPSD(MVJumpError):
    pass


class MissingSecondDerivative(MVJumpError):
    pass


class SingularGamma(MVJumpError):
    pass


class InsufficientDecades(MVJumpError):
    pass


# pde_lab
class UnsupportedTerminal(MVJumpError):
    pass


class MissingDerivatives(MVJumpError):
    pass


# runner_cli
class ConfigError(MVJumpError):
    pass


class NumericalFailure(MVJumpError):
    pass
