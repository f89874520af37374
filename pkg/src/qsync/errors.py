"""Exception hierarchy shared by every qsync subsystem."""


class QSyncError(Exception):
    """Base class for all qsync errors."""


class SimulatedCrash(BaseException):
    """Raised by an armed WAL to emulate a process dying mid-write.

    Derives from BaseException so ``except Exception`` blocks inside node
    logic cannot swallow it.
    """


# topology
class ParseError(QSyncError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class ValidationError(QSyncError):
    pass


class UnknownNode(QSyncError):
    pass


# queue-core
class AlreadyExists(QSyncError):
    pass


class QueueMissing(QSyncError):
    pass


class NonTransactionalQueue(QSyncError):
    pass


class TransactionRequired(QSyncError):
    pass


class BodyTooLarge(QSyncError):
    pass


# dtx
class TxnNotActive(QSyncError):
    pass


class TxnAborted(TxnNotActive):
    pass


class TxnFinished(QSyncError):
    pass


class TooManyParticipants(QSyncError):
    pass


class CorruptLog(QSyncError):
    pass


class LockTimeout(QSyncError):
    pass


# statement store
class SQLError(QSyncError):
    pass


class SQLSyntaxError(SQLError):
    def __init__(self, position: int, expected, message: str = ""):
        self.position = position
        self.expected = frozenset(expected)
        exp = ", ".join(sorted(self.expected)) or "nothing"
        super().__init__(message or f"syntax error at {position}: expected {exp}")


class UnsupportedConstruct(SQLError):
    def __init__(self, position: int, construct: str):
        self.position = position
        self.construct = construct
        super().__init__(f"unsupported construct at {position}: {construct}")


class ExecutionError(SQLError):
    pass


class NoSuchTable(ExecutionError):
    pass


class NoSuchColumn(ExecutionError):
    pass


class TableExists(ExecutionError):
    pass


class DuplicateKey(ExecutionError):
    pass


class TypeMismatch(ExecutionError):
    pass


class NotPending(QSyncError):
    pass


class NoSuchRecord(QSyncError):
    pass


# sync engine
class SyncDecodeError(QSyncError):
    pass


class NotQuiescent(QSyncError):
    pass


# transport
class MaxTimeExceeded(QSyncError):
    pass


class FrameError(QSyncError):
    pass


class BadMagic(FrameError):
    pass


class BadVersion(FrameError):
    pass


class Truncated(FrameError):
    pass


class BodyHashMismatch(FrameError):
    pass


# mail
class TooLarge(QSyncError):
    pass


class UnknownRecipient(QSyncError):
    pass


class DecryptFailure(QSyncError):
    pass
