"""Exception hierarchy for every stage of the toolkit."""

from __future__ import annotations

from typing import Sequence


class PirError(RuntimeError):
    """Base class; the CLI turns these into one-line diagnostics."""


# tensor files

class TensorFormatError(PirError):
    pass


class BadMagicError(TensorFormatError):
    pass


class DimOverflowError(TensorFormatError):
    pass


class TruncatedPayloadError(TensorFormatError):
    pass


# geometry / shading

class DegenerateNormalError(PirError):
    def __init__(self, location: Sequence[float], grad_norm: float) -> None:
        self.location = tuple(float(v) for v in location)
        self.grad_norm = float(grad_norm)
        coords = ", ".join(f"{v:.6g}" for v in self.location)
        super().__init__(f"SDF gradient vanishes at ({coords}): |grad s| = {self.grad_norm:.3g}")


class EmptyLevelSetError(PirError):
    pass


class LightSingularityError(PirError):
    pass


class GrazingDirectionError(PirError):
    pass


class ShapeMismatchError(PirError):
    pass


# features

class FeatureDimensionError(PirError):
    pass


class MissingFeatureViewError(PirError):
    pass


# optimisation

class NonFiniteLossError(PirError):
    def __init__(self, term: str, value: float) -> None:
        self.term = term
        super().__init__(f"loss term '{term}' is not finite ({value})")


class NonFiniteGradientError(PirError):
    def __init__(self, block: str) -> None:
        self.block = block
        super().__init__(f"non-finite gradient in parameter block '{block}'; step aborted")


class DivergenceError(PirError):
    pass


class ScaleMatchError(PirError):
    pass


class StageOrderError(PirError):
    """A stage ran before the stage it depends on."""


# checkpoints / config / datasets

class CheckpointError(PirError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


class CheckpointSpecMismatchError(CheckpointError):
    pass


class SceneConfigError(PirError):
    pass


class DatasetError(PirError):
    pass
