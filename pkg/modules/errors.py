"""异常定义"""


class KgRerankError(Exception):
    """所有工具包异常的基类"""


class TripleFormatError(KgRerankError, ValueError):
    def __init__(self, message, line=None):
        super().__init__(message)
        self.line = line  # 出错的行号（从1开始）


class IdRangeError(KgRerankError, ValueError):
    def __init__(self, message, line=None):
        super().__init__(message)
        self.line = line


class EmptyInputError(KgRerankError, ValueError):
    pass


class FeatureFormatError(KgRerankError, ValueError):
    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


class DimensionError(KgRerankError, ValueError):
    pass


class PQTrainingError(KgRerankError, ValueError):
    pass


class KindMismatchError(KgRerankError, TypeError):
    pass


class RankDeficientError(KgRerankError, ValueError):
    def __init__(self, message, column=None):
        super().__init__(message)
        self.column = column


class TrainingDivergedError(KgRerankError, RuntimeError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class GridTooLargeError(KgRerankError, ValueError):
    pass


class ConfigError(KgRerankError, ValueError):
    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class StageDependencyError(KgRerankError, RuntimeError):
    def __init__(self, message, stage=None):
        super().__init__(message)
        self.stage = stage
