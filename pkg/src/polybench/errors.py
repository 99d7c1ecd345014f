class PolybenchError(Exception):
    exit_code = 1


class ConfigError(PolybenchError, ValueError):
    exit_code = 2


class MissingArtifactError(PolybenchError, FileNotFoundError):
    exit_code = 3


class DigestMismatchError(PolybenchError):
    exit_code = 4


class TrainingError(PolybenchError, RuntimeError):
    exit_code = 5


class ManifestError(PolybenchError, ValueError):
    """Malformed manifest or fold plan file (treated like a digest failure)."""

    exit_code = 4
