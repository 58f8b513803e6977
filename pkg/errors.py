"""Exception hierarchy shared by every module.

Library code raises these; only app.py turns them into exit codes.
"""


class M2MError(Exception):
    """Base class for all library errors"""


class ConfigError(M2MError):
    """Invalid or missing configuration field"""

    def __init__(self, field, message=None):
        self.field = field
        super().__init__(f"{field}: {message}" if message else f"{field}: missing required field")


class PointCloudError(M2MError):
    """Base class for .m2m decoding failures"""


class FormatError(PointCloudError):
    """Bad magic, unsupported version or malformed header"""


class TruncatedError(PointCloudError):
    """Payload shorter than the header declares"""


class NonFiniteError(PointCloudError):
    """NaN or Inf where only finite values are allowed"""


class DimensionError(M2MError):
    """Ambient dimension or cardinality mismatch"""

    def __init__(self, message, pair_index=None):
        self.pair_index = pair_index
        if pair_index is not None:
            message = f"pair {pair_index}: {message}"
        super().__init__(message)


class ManifestError(M2MError):
    """Malformed dataset manifest"""


class NumericalAbort(M2MError):
    """Non-finite loss or state; training or integration cannot continue"""

    def __init__(self, message, step=None, lr=None, loss_kind=None, value=None):
        self.step = step
        self.lr = lr
        self.loss_kind = loss_kind
        self.value = value
        details = [f"{k}={v}" for k, v in
                   (("step", step), ("lr", lr), ("loss_kind", loss_kind), ("value", value))
                   if v is not None]
        super().__init__(f"{message} ({', '.join(details)})" if details else message)


class GradcheckFailure(M2MError):
    """Reverse-mode gradient disagrees with finite differences"""

    def __init__(self, parameter, error):
        self.parameter = parameter
        self.error = error
        super().__init__(f"gradient check failed for '{parameter}' (max relative error {error:.3e})")
