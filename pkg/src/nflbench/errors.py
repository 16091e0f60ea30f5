"""Exception types shared across the package."""


class NflbenchError(Exception):
    """Base class for package-specific errors."""


class UnknownTokenError(NflbenchError):
    """A whitespace unit of the input text is absent from the vocabulary."""

    def __init__(self, unit: str):
        super().__init__(f"token not in vocabulary: {unit!r}")
        self.unit = unit


class DegenerateVocabularyError(NflbenchError):
    """All token embeddings coincide, so the token-space diameter is zero."""


class SingularEncoderError(NflbenchError):
    """Encoder transform is (numerically) rank deficient."""


class EmptyCorpusError(NflbenchError):
    """Bigram model was fitted on a corpus with no adjacent-token pairs."""


class InvalidExponentError(NflbenchError):
    """Calibrated regret exponent must lie strictly inside (0, 1)."""


class DegenerateTraceError(NflbenchError):
    """All regret entries are zero; no exponent can be fitted."""


class MismatchedSupportError(NflbenchError):
    """Discrete distributions live on different supports."""


class NonFiniteDensityError(NflbenchError):
    """Gaussian parameters do not define a finite, positive density."""


class ZeroIterationsError(NflbenchError):
    """Recovery extent is undefined for an attack with zero iterations."""


class InsufficientSamplesError(NflbenchError):
    """Fewer samples than the estimator's declared minimum."""


class LengthMismatchError(NflbenchError):
    """Original and protected prompts differ in length."""


class AssumptionViolatedError(NflbenchError):
    """A bound-constant premise fails empirically on this instance."""


class SideConditionViolatedError(NflbenchError):
    """The regret/diameter side condition c_b + c_b*c2 <= omega fails."""


class ConstantsUnavailableError(NflbenchError):
    """A bound check was requested before all constants were estimated."""


class NonpositiveC1Error(NflbenchError):
    """C1 <= 0: the privacy-side bound is vacuous for this instance."""


class ConfigError(NflbenchError):
    """Experiment configuration is missing, malformed, or inconsistent."""
