"""Exception types shared across the toolkit."""


class FnBoundsError(Exception):
    """Base class for all toolkit errors."""


# -- binary parsing / ground truth -----------------------------------------

class MalformedBinary(FnBoundsError):
    """Input is not a well-formed ELF64 little-endian file."""


class NoExecutableSection(FnBoundsError):
    """The binary contains no executable section."""


class OverlappingFunctions(FnBoundsError):
    def __init__(self, first: str, second: str):
        super().__init__(f"function records overlap: {first!r} and {second!r}")
        self.first = first
        self.second = second


class StrippedBinary(FnBoundsError):
    """No function symbols available for ground-truth extraction."""


# -- corpus -----------------------------------------------------------------

class ToolchainUnavailable(FnBoundsError):
    """A toolchain descriptor does not resolve to an invocable compiler."""


class AllBuildsFailed(FnBoundsError):
    """Every build in the requested matrix failed; no corpus entry produced."""


class InvalidSpec(FnBoundsError):
    """Synthetic corpus generator configuration is invalid."""


class ManifestParse(FnBoundsError):
    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DuplicateEntry(ManifestParse):
    pass


class MissingBinary(ManifestParse):
    pass


# -- detectors ---------------------------------------------------------------

class EmptyCorpus(FnBoundsError):
    """Training requested on zero binaries."""


class NonFiniteLoss(FnBoundsError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training diverged at epoch {epoch}: loss={loss!r}")
        self.epoch = epoch
        self.loss = loss


class AdapterCrash(FnBoundsError):
    def __init__(self, returncode: int, stderr: str = ""):
        super().__init__(f"external detector exited with status {returncode}: {stderr.strip()}")
        self.returncode = returncode


class ProtocolViolation(FnBoundsError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class AdapterTimeout(FnBoundsError):
    """External detector exceeded its time budget."""


# -- metrics / analysis -------------------------------------------------------

class BinaryMismatch(FnBoundsError):
    """Ground truth and predictions refer to different binaries."""


class JoinFailure(FnBoundsError):
    """A score row does not join to any manifest entry."""


class PatternLongerThanContext(FnBoundsError):
    """Requested heavy-hitter pattern length exceeds the collected context."""


# -- rewriter -----------------------------------------------------------------

class PayloadTooLarge(FnBoundsError):
    def __init__(self, needed: int, available: int):
        super().__init__(f"payload needs a pad of >= {needed} bytes, only {available} available")
        self.min_pad = needed
        self.available = available


class IncompatibleGuard(FnBoundsError):
    """Injection mode is not compatible with the pad's guard."""


class OverlappingPlans(FnBoundsError):
    """Two injection plans reference overlapping pad ranges."""


class PadMismatch(FnBoundsError):
    """Pad bytes no longer decode as NOPs; the plan is stale."""


# -- search --------------------------------------------------------------------

class NoUsablePads(FnBoundsError):
    """No binary in the corpus exposes a pad usable for the requested mode."""


class TargetWithoutPad(FnBoundsError):
    """A validation target has no pad adjacent to it."""
