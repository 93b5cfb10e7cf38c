"""Exception hierarchy shared by the simulator, the live gateway and the CLI."""


class CacheRouteError(Exception):
    """Base class for every domain error."""


class RingError(CacheRouteError):
    """Invalid ring construction or membership change."""


class EmptyRingError(RingError):
    """Routing was attempted on a ring with no members ("no capacity")."""

    def __init__(self, message='no capacity: ring has no members'):
        super().__init__(message)


class CacheError(CacheRouteError):
    """Prefix-cache precondition or capacity violation."""


class CostModelError(CacheRouteError):
    """Invalid distribution, cost model or preset name."""


class WorkloadError(CacheRouteError):
    """Invalid workload profile or generator arguments."""


class TraceError(CacheRouteError):
    """Malformed trace file; carries the 1-based line number."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f'line {line}: {message}'
        super().__init__(message)


class ScenarioError(CacheRouteError):
    """Scenario parse or validation error with the offending key and position."""

    def __init__(self, message, key=None, line=None, column=None):
        self.key = key
        self.line = line
        self.column = column
        where = ''
        if line is not None:
            where = f'line {line}, column {column}: '
        super().__init__(f'{where}{message}')


class ReportError(CacheRouteError):
    """Report assembly found a violated law, or two reports do not share a schema."""

    def __init__(self, message, law=None):
        self.law = law
        super().__init__(message)


class ProtocolError(CacheRouteError):
    """Malformed frame on the wire."""


class PortInUseError(CacheRouteError):
    """A live-mode listener address is already taken."""

    def __init__(self, host, port):
        self.host = host
        self.port = port
        super().__init__(f'address {host}:{port} is already in use')
