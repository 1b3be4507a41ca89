"""Exception hierarchy.

Every failure mode that a caller may want to tally (rather than crash on) has
its own class so that the simulation harness can record *why* an estimator
did not exist for a given design.
"""


class ClusterHRKError(Exception):
    """Base class for all package errors."""


# data / fit
class DataError(ClusterHRKError, ValueError):
    pass


class EmptyCluster(DataError):
    pass


class RankDeficient(ClusterHRKError, ValueError):
    pass


# estimator existence
class EstimatorUndefined(ClusterHRKError, ArithmeticError):
    """An estimator (or its d.f.) does not exist on this design."""


class SingularPsi(EstimatorUndefined):
    pass


class SingularPhi(EstimatorUndefined):
    pass


class SingularSc(EstimatorUndefined):
    pass


class SingularOuter(EstimatorUndefined):
    pass


class TooFewClusters(EstimatorUndefined):
    pass


class DegenerateLeverage(EstimatorUndefined):
    pass


class AllSingletons(EstimatorUndefined):
    pass


class SingletonCluster(EstimatorUndefined):
    pass


class SingularPanelSystem(EstimatorUndefined):
    pass


class SingularMomentSystem(EstimatorUndefined):
    pass


class NonpositiveTrace(EstimatorUndefined):
    pass


class NonpositiveDenominator(EstimatorUndefined):
    pass


class NonpositiveVariance(EstimatorUndefined):
    pass


# oracle
class TooLargeForOracle(ClusterHRKError, ValueError):
    pass


class SingularCore(EstimatorUndefined):
    pass


class SingularA(EstimatorUndefined):
    pass


# inference
class InvalidNu(ClusterHRKError, ValueError):
    pass


# simulation / io
class ConfigError(ClusterHRKError, ValueError):
    def __init__(self, message, field=None, line=None):
        self.message = message
        self.field = field
        self.line = line
        where = []
        if field is not None:
            where.append(f"field '{field}'")
        if line is not None:
            where.append(f"line {line}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


class NotDivisible(ConfigError):
    pass


class NonpositiveSize(ConfigError):
    pass


class NonPsd(ClusterHRKError, ValueError):
    pass


class EmptySubsample(DataError):
    pass


class ParseError(DataError):
    pass
