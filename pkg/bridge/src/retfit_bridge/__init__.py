"""Model-side bridge: files in, files out, in the pipeline's declared formats."""

__version__ = "0.1.0"


class BridgeError(Exception):
    """Base error; the CLI maps subclasses to exit codes."""

    exit_code = 1


class UsageError(BridgeError):
    exit_code = 1


class InputError(BridgeError):
    exit_code = 2


class ModelError(BridgeError):
    """Backend failures: model load, endpoint unreachable after retries."""

    exit_code = 3
