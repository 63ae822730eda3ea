class NashLearnError(Exception):
    pass


class ConfigurationError(NashLearnError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = "line {}: {}".format(line, message)
        super().__init__(message)


class ScenarioError(ConfigurationError):
    pass


class TopologyError(NashLearnError, ValueError):
    pass


class ShapeError(NashLearnError, ValueError):
    pass


class DivergenceError(NashLearnError, ArithmeticError):
    def __init__(self, message, step=None):
        self.step = step
        super().__init__(message)


class LocalityViolation(NashLearnError):
    def __init__(self, sender, receiver, round_=None):
        self.sender = sender
        self.receiver = receiver
        self.round = round_
        super().__init__(
            "robot {} attempted to send to non-neighbour {} (round {})".format(
                sender, receiver, round_
            )
        )


class AssemblyError(NashLearnError, ArithmeticError):
    def __init__(self, message, robot=None, t=None, block=None):
        self.robot = robot
        self.t = t
        self.block = block
        super().__init__(
            "{} (robot {}, t={}, block {})".format(message, robot, t, block)
        )


class StepSizeError(DivergenceError):
    pass


class StaleSensitivityError(NashLearnError):
    pass


class DegenerateGameError(NashLearnError, ArithmeticError):
    pass


class UnsolvableSystemError(NashLearnError, ArithmeticError):
    pass


class OracleFailure(NashLearnError):
    pass


class LearningAborted(NashLearnError):
    def __init__(self, message, trace=None):
        self.trace = trace
        super().__init__(message)


class LearningDiverged(LearningAborted):
    pass
