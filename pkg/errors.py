"""Exception types raised across the pipeline.

Every error carries a human readable ``detail`` and the ``exit_code`` the CLI
returns when it surfaces, the same way the API layer paired a status code
with a detail string.
"""

from typing import Optional


class PipelineError(Exception):
    exit_code = 1

    def __init__(self, detail: str, exit_code: Optional[int] = None):
        super().__init__(detail)
        self.detail = detail
        if exit_code is not None:
            self.exit_code = exit_code

    def __str__(self):
        return self.detail


class ConfigError(PipelineError):
    exit_code = 2


class IngestError(PipelineError):
    """Row-level parse failure; ``line`` is the 1-based file line."""
    exit_code = 3

    def __init__(self, detail: str, line: Optional[int] = None):
        if line is not None:
            detail = f"line {line}: {detail}"
        super().__init__(detail)
        self.line = line


class LabelError(IngestError):
    pass


class VocabularyError(PipelineError):
    exit_code = 4


class SequenceLengthError(PipelineError):
    exit_code = 4


class EncoderError(PipelineError):
    exit_code = 5


class CheckpointError(EncoderError):
    pass


class TrainingError(PipelineError):
    exit_code = 6


class SamplingError(TrainingError):
    pass


class GradientError(TrainingError):
    pass


class ClusterError(PipelineError):
    exit_code = 7


class AnalyticsError(PipelineError):
    exit_code = 8


class TsneError(PipelineError):
    exit_code = 9
