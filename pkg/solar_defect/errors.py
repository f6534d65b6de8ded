class DatasetError(RuntimeError):
    def __init__(self, message, class_name=None, files=()):
        super(DatasetError, self).__init__(message)
        self.class_name = class_name
        self.files = list(files)


class ProtocolViolation(RuntimeError):
    """
    Raised when an operation would let evaluation data reach training (or the reverse):
    augmenting/oversampling a non-train record, evaluating derivatives, training on leaky splits.
    """

    def __init__(self, message, report=None, record_ids=()):
        super(ProtocolViolation, self).__init__(message)
        self.report = report
        self.record_ids = tuple(record_ids)


class NonFiniteLossError(RuntimeError):
    def __init__(self, epoch, batch, value):
        super(NonFiniteLossError, self).__init__(
            f"Non-finite loss ({value}) at epoch {epoch}, batch {batch}, training aborted"
        )
        self.epoch = epoch
        self.batch = batch
        self.value = value


class BackboneUnavailableError(RuntimeError):
    def __init__(self, message, backbone):
        super(BackboneUnavailableError, self).__init__(message)
        self.backbone = backbone


class ConfigurationError(RuntimeError):
    def __init__(self, message, key=None):
        super(ConfigurationError, self).__init__(message)
        self.key = key
