"""Exceptions raised by VoltPilot"""


class VoltPilotError(Exception):
    """Base class for all VoltPilot errors"""


class TopologyError(VoltPilotError, ValueError):
    """Feeder lines do not form a valid radial tree"""


class ModelError(VoltPilotError, ValueError):
    """Network matrices violate a model invariant (e.g. not positive definite)"""


class DimensionError(VoltPilotError, ValueError):
    """Array shapes do not match the feeder or basis dimensions"""


class ConfigError(VoltPilotError, ValueError):
    """Invalid configuration value or range"""


class FormatError(VoltPilotError, ValueError):
    """Malformed input file"""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class RangeError(VoltPilotError, IndexError):
    """Time index outside the scenario horizon"""


class NumericalError(VoltPilotError, ArithmeticError):
    """Linear algebra failure or non-finite intermediate result"""

    def __init__(self, message, t=None):
        self.t = t
        if t is not None:
            message = f"{message} (t={t})"
        super().__init__(message)


class InfeasibleError(VoltPilotError, ValueError):
    """The stability-feasible parameter set is empty"""


class DivergenceError(VoltPilotError, ArithmeticError):
    """Closed-loop state left the physically meaningful range"""

    def __init__(self, message, step, scenario_index=None):
        self.reason = message
        self.step = step
        self.scenario_index = scenario_index
        detail = f"step {step}"
        if scenario_index is not None:
            detail = f"scenario {scenario_index}, {detail}"
        super().__init__(f"{message} ({detail})")
