"""Exception hierarchy shared by all fedelastic modules."""

from __future__ import annotations


class FedElasticError(Exception):
    """Base class for every error raised by this package."""


class ConfigurationError(FedElasticError):
    """Invalid model, algorithm or experiment configuration."""

    def __init__(self, message: str, errors: list[str] | None = None):
        self.errors = list(errors) if errors else [message]
        super().__init__(message)


class IngestionError(FedElasticError):
    """Malformed dataset file. ``offset`` is the byte offset of the problem."""

    def __init__(self, message: str, path: str | None = None, offset: int | None = None):
        self.path = path
        self.offset = offset
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"byte offset {offset}")
        suffix = f" ({', '.join(where)})" if where else ""
        super().__init__(message + suffix)


class PartitionError(FedElasticError):
    """A client split cannot be realised with the requested sizes."""


class DivergedSolveError(FedElasticError):
    """Local solve blew up; usually the local step size is too large."""

    def __init__(self, message: str, lr: float, client: int | None = None, round: int | None = None):
        self.lr = lr
        self.client = client
        self.round = round
        super().__init__(message)

    def with_context(self, client: int, round: int) -> "DivergedSolveError":
        client, round = int(client), int(round)
        msg = f"round {round}, client {client}: {self.args[0]}"
        return DivergedSolveError(msg, lr=self.lr, client=client, round=round)


class MeteringError(FedElasticError):
    """Communication metering was asked to do something undefined."""


class DiagnosticError(FedElasticError):
    """A diagnostic was requested outside the regime it is defined for."""


class AnalysisPreconditionError(DiagnosticError):
    """Theorem constants requested where the convergence assumptions fail."""
