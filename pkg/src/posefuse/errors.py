"""Exception types shared across the package."""


class PosefuseError(Exception):
    """Base class for every package-specific error."""


class ParseError(PosefuseError):
    """A pose/manifest/config file could not be parsed; message carries file and line."""


# pose representation
class WrongKeypointCount(PosefuseError):
    """A pose does not hold exactly 21 (x, y) keypoints."""


class NonFiniteCoordinate(PosefuseError):
    """A keypoint coordinate is NaN or infinite."""


class DegeneratePose(PosefuseError):
    """All keypoints coincide; the pairwise-difference feature has zero norm."""


# affine fitting / retrieval
class DegenerateConfiguration(PosefuseError):
    """Keypoints are collinear or coincident; the affine fit is singular."""


class EmptyBank(PosefuseError):
    """Retrieval requested against an empty pose bank."""


class KTooLarge(PosefuseError):
    """Requested more matches than the bank (or shortlist) can supply."""


# product-quantization index
class TooFewVectors(PosefuseError):
    """Fewer training vectors than centroids per subspace."""


class IndivisibleDim(PosefuseError):
    """Feature dimensionality is not divisible by the subspace count."""


class EmptyInput(PosefuseError):
    """No vectors supplied."""


class DimMismatch(PosefuseError):
    """Operand dimensions do not agree."""


class EmptyIndex(PosefuseError):
    """Search requested against an index holding no vectors."""


class BadMagic(PosefuseError):
    """Index file does not start with the expected magic bytes."""


class UnsupportedVersion(PosefuseError):
    """Index file version is not supported by this build."""


class CorruptPayload(PosefuseError):
    """Index file is truncated or its section lengths disagree."""


# image operations
class EmptySupport(PosefuseError):
    """Histogram mask has zero total weight."""


class OutOfFrame(PosefuseError):
    """No mask-positive foreground pixel lands inside the background."""


# losses
class LayoutMismatch(PosefuseError):
    """Histogram operands have different bin layouts."""


class OutOfRange(PosefuseError):
    """A probability input lies outside [0, 1]."""


# toy adversarial training
class StaleCache(PosefuseError):
    """A backward pass received a cache from a different forward pass."""


class DivergenceDetected(PosefuseError):
    """A training loss became non-finite; carries the partial report."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


# evaluation metrics
class EmptySet(PosefuseError):
    """Metric requested over an empty prediction set."""


class BadRange(PosefuseError):
    """Invalid threshold range for a metric curve."""


class Missing3D(PosefuseError):
    """Operation requires 3D keypoints that the pose does not carry."""


class IdMismatch(PosefuseError):
    """Two pose collections that must align by id do not."""
