"""Exception hierarchy shared across the toolkit.

Each class carries a distinct process exit code so the CLI can report
failures as a single machine-parsable line (``<ClassName>: <detail>``).
"""

from __future__ import annotations


class SeedTrackError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 1


class DuplicateSession(SeedTrackError):
    exit_code = 10


class StorageError(SeedTrackError):
    exit_code = 11


class OutOfOrderFrame(SeedTrackError):
    exit_code = 12


class ResolutionMismatch(SeedTrackError):
    exit_code = 13


class SessionClosed(SeedTrackError):
    exit_code = 14


class SeedOutOfBounds(SeedTrackError):
    exit_code = 15


class EmptySession(SeedTrackError):
    exit_code = 16


class MissingSeed(SeedTrackError):
    exit_code = 17


class CorruptSession(SeedTrackError):
    exit_code = 18


class ExportError(SeedTrackError):
    exit_code = 19


class FramingError(SeedTrackError):
    exit_code = 20


class NetworkError(SeedTrackError):
    exit_code = 21


class NoProposal(SeedTrackError):
    exit_code = 22


class InitializationFailure(SeedTrackError):
    exit_code = 23


class ReseedFailure(SeedTrackError):
    exit_code = 24


class BackendUnavailable(SeedTrackError):
    exit_code = 25


class SceneSpecError(SeedTrackError):
    exit_code = 26
