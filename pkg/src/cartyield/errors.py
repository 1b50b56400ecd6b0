"""Exception hierarchy shared by every pipeline stage."""


class CartYieldError(Exception):
    """Base class; ``stage`` names the pipeline stage that raised it, if known."""

    stage = None


class FieldError(CartYieldError):
    stage = "field"


class TooFewPoints(FieldError):
    pass


class CollinearControlPoints(FieldError):
    pass


class NonPositiveResolution(FieldError):
    pass


class FieldFileError(FieldError):
    pass


class IngestError(CartYieldError):
    stage = "ingest"


class EmptyLog(IngestError):
    pass


class HeaderMismatch(IngestError):
    pass


class DegenerateSamples(IngestError):
    pass


class RowEngineError(CartYieldError):
    stage = "rows"


class SeriesTooShort(RowEngineError):
    pass


class NoAvailableRow(RowEngineError):
    pass


class YieldError(CartYieldError):
    stage = "yield"


class AllFiltered(YieldError):
    pass


class DegenerateSegment(YieldError):
    pass


class GridMismatch(YieldError):
    pass


class EvaluationError(CartYieldError):
    stage = "evaluate"


class ZeroGroundTruthMass(EvaluationError):
    pass


class ZeroGroundTruthCount(EvaluationError):
    pass


class KeyMismatch(EvaluationError):
    pass


class InfeasibleConfig(CartYieldError):
    stage = "simulate"


class ConfigError(CartYieldError):
    stage = "config"
