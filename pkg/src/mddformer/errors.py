"""Exception hierarchy.

Every error carries the name of the module that raised it so the CLI can
report a categorized message.
"""


class MDDError(Exception):
    module = "mddformer"


class IngestError(MDDError, ValueError):
    module = "ingest"


class ParseError(IngestError):
    """A feature file could not be parsed; ``row``/``column`` are 1-based."""

    def __init__(self, message, row=None, column=None):
        loc = []
        if row is not None:
            loc.append(f"row {row}")
        if column is not None:
            loc.append(f"column {column}")
        if loc:
            message = f"{message} (at {', '.join(loc)})"
        super().__init__(message)
        self.row = row
        self.column = column


class DimensionMismatchError(ParseError):
    pass


class ManifestError(IngestError):
    pass


class EmptyDatasetError(IngestError):
    pass


class FoldError(IngestError):
    pass


class SynthError(MDDError, ValueError):
    module = "synth"


class ShapeError(MDDError, ValueError):
    module = "model"


class TrainingError(MDDError, RuntimeError):
    module = "train"


class MetricsError(MDDError, ValueError):
    module = "metrics"


class BaselineError(MDDError, ValueError):
    module = "baselines"


class ConfigError(MDDError, ValueError):
    module = "cli"
