"""Exception hierarchy shared by every module.

ConfigError subclasses map to CLI exit code 2, InfeasiblePlan subclasses to
exit code 3.
"""


class SecretKeyError(Exception):
    pass


# Configuration / model errors (exit code 2)

class ConfigError(SecretKeyError):
    pass


class NotATree(ConfigError):
    pass


class BadCorrelation(ConfigError):
    pass


class SingletonTree(ConfigError):
    pass


class UnknownVertex(ConfigError):
    pass


class MismatchedSubtree(ConfigError):
    pass


# Plan errors (exit code 3)

class InfeasiblePlan(SecretKeyError):
    pass


class NonIntegralRate(InfeasiblePlan):
    pass


class DegenerateKey(InfeasiblePlan):
    pass


class InfeasibleChain(InfeasiblePlan):
    pass


# Numeric errors

class DimensionMismatch(SecretKeyError):
    pass


class NotInFundamentalCell(SecretKeyError):
    pass


class BelowThreshold(SecretKeyError):
    pass


class FieldMismatch(SecretKeyError):
    pass


class DecodeFailure(SecretKeyError):
    pass


class RateTooLow(SecretKeyError):
    pass


class TooFewTrials(SecretKeyError):
    pass
