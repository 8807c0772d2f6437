"""Exception hierarchy shared by all planner modules."""


class PlannerError(Exception):
    """Base class for every error raised by the planner."""

    exit_code = 2


class GraphCycleError(PlannerError):
    def __init__(self, edge):
        self.edge = tuple(edge)
        super().__init__(f"graph-cycle: edge {edge[0]} -> {edge[1]} lies on a cycle")


class ValidationError(PlannerError):
    pass


class BundleSchemaError(ValidationError):
    def __init__(self, pointer, message):
        self.pointer = pointer
        super().__init__(f"schema violation at {pointer or '/'}: {message}")


class BundleReferenceError(ValidationError):
    pass


class DomainError(PlannerError, ValueError):
    pass


class DegenerateFitError(DomainError):
    pass


class MissingModelError(PlannerError, KeyError):
    def __str__(self):
        return self.args[0] if self.args else "missing cast model"


class MissingProfileError(PlannerError, KeyError):
    def __str__(self):
        return self.args[0] if self.args else "missing profile entry"


class StatsIncompleteError(PlannerError):
    def __init__(self, op, field=None):
        self.op = op
        self.field = field
        msg = f"stats-incomplete: {op}"
        if field:
            msg += f" (missing {field})"
        super().__init__(msg)


class KindError(PlannerError):
    pass


class TopologyError(PlannerError):
    pass


class InfeasibleError(PlannerError):
    exit_code = 3


class EnumerationLimitError(PlannerError):
    pass


class InvariantError(PlannerError):
    exit_code = 4
