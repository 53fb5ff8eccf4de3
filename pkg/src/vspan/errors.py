"""Exception hierarchy shared by every stage of the pipeline."""
from __future__ import annotations


class VspanError(Exception):
    """Base class for all data errors raised by vspan."""


# -- trace records ---------------------------------------------------------

class TraceFormatError(VspanError, ValueError):
    """A trace record or trace file could not be accepted.

    ``field`` names the offending payload field (if any), ``line`` the 1-based
    line number and ``path`` the file the record came from, once known.
    """

    def __init__(self, message: str, *, field: str | None = None,
                 line: int | None = None, path: str | None = None):
        super().__init__(message)
        self.message = message
        self.field = field
        self.line = line
        self.path = path

    def __str__(self) -> str:
        where = []
        if self.path is not None:
            where.append(str(self.path))
        if self.line is not None:
            where.append(f"line {self.line}")
        prefix = ":".join(where)
        return f"{prefix}: {self.message}" if prefix else self.message


class MalformedLine(TraceFormatError):
    pass


class UnknownEventName(TraceFormatError):
    pass


class MissingField(TraceFormatError):
    pass


class FieldOutOfRange(TraceFormatError):
    pass


class MissingHeader(TraceFormatError):
    pass


class UnsortedFile(TraceFormatError):
    pass


# -- aggregation -----------------------------------------------------------

class EmptyExperiment(VspanError):
    pass


class OverflowedTimestamp(VspanError, OverflowError):
    pass


# -- state history tree ----------------------------------------------------

class HistoryError(VspanError):
    pass


class BackwardsTime(HistoryError):
    pass


class OutOfRange(HistoryError):
    pass


class UnknownAttribute(HistoryError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its argument otherwise
        return str(self.args[0]) if self.args else ""


class InvalidAttributePath(HistoryError, ValueError):
    pass


class TreeNotClosed(HistoryError):
    pass


# -- state machines --------------------------------------------------------

class MachineDefinitionError(VspanError, ValueError):
    pass


class NondeterministicMatch(VspanError):
    pass


# -- reconstruction --------------------------------------------------------

class ReconstructionError(VspanError):
    pass


class DuplicateOpenSocket(ReconstructionError):
    pass


class NoMatchingSubsystem(ReconstructionError):
    pass


class UnlinkedCall(ReconstructionError):
    pass


# -- analysis / rendering --------------------------------------------------

class IncompleteSpan(VspanError):
    pass


class UnsupportedFormat(VspanError, ValueError):
    pass


# -- simulator -------------------------------------------------------------

class TopologyError(VspanError, ValueError):
    pass


class MalformedTopology(TopologyError):
    pass


class UnresolvedService(TopologyError):
    pass


class CycleDetected(TopologyError):
    pass


class InvalidWorkload(VspanError, ValueError):
    pass
