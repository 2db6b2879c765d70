# /*
#  * Copyright © 2026 patchlab contributors.
#  * SPDX-License-Identifier: Apache-2.0
#  */


class PatchlabError(Exception):
    pass


class ConfigError(PatchlabError):
    pass


class ShapeError(PatchlabError):
    pass


class NonFiniteError(PatchlabError):
    pass


class PlanError(PatchlabError):
    pass


class UnknownSymbolError(PatchlabError):
    pass


class TrainingDivergedError(PatchlabError):
    pass


class CheckpointError(PatchlabError):
    pass


class DigestMismatchError(CheckpointError):
    pass


class TruncatedFileError(CheckpointError):
    pass


class UnsupportedFormatError(CheckpointError):
    pass


class TokenError(PatchlabError):
    pass


class AnalysisError(PatchlabError):
    pass


class SweepError(PatchlabError):
    pass


class StageError(PatchlabError):
    """A reproduce-all stage failed; the message names the stage."""
    pass
