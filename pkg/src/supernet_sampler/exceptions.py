"""Exception hierarchy. Every error names the element that triggered it."""


class SupernetError(Exception):
    """Base class for all errors raised by this package."""


class SpecError(SupernetError, ValueError):
    """A supernet spec or run config is malformed."""


class CycleDetected(SpecError):
    def __init__(self, cycle):
        self.cycle = list(cycle)
        super().__init__("cycle detected: " + " -> ".join(self.cycle))


class UnknownTool(SpecError):
    def __init__(self, tool_id, container=None):
        self.tool_id = tool_id
        self.container = container
        where = f" (container {container!r})" if container else ""
        super().__init__(f"unknown tool {tool_id!r}{where}")


class UnreachableContainer(SpecError):
    def __init__(self, container_id):
        self.container_id = container_id
        super().__init__(f"container {container_id!r} is unreachable from entry")


class EmptyContainer(SpecError):
    def __init__(self, container_id):
        self.container_id = container_id
        super().__init__(f"container {container_id!r} has no tools")


class UnknownPosition(SupernetError, KeyError):
    def __init__(self, position):
        self.position = position
        super().__init__(f"unknown position {position!r}")

    def __str__(self):
        return self.args[0]


class RoutingFieldMissing(SupernetError):
    def __init__(self, container_id):
        self.container_id = container_id
        super().__init__(f"routing requires output of {container_id!r}, absent from memory")


class ToolFailure(SupernetError):
    def __init__(self, tool_id, reason="configured failure"):
        self.tool_id = tool_id
        super().__init__(f"tool {tool_id!r} failed: {reason}")


class NonMonotonicStep(SupernetError, ValueError):
    def __init__(self, step, last):
        super().__init__(f"memory step {step} is not after last step {last}")


class DimensionMismatch(SupernetError, ValueError):
    pass


class ZeroProbabilityAction(SupernetError):
    pass


class NonFiniteLoss(SupernetError, FloatingPointError):
    pass


class IllegalExpertAction(SupernetError, ValueError):
    pass


class PlanNotRealizable(SupernetError):
    def __init__(self, ctype):
        self.ctype = ctype
        super().__init__(f"graph has no container of type {ctype}")


class EmptySuite(SupernetError, ValueError):
    pass


class SinkUnavailable(SupernetError, OSError):
    pass


class VersionMismatch(SupernetError):
    pass


class GraphFingerprintMismatch(SupernetError):
    pass


class ConfigError(SupernetError, ValueError):
    """Invalid run configuration (CLI exit code 2)."""
