"""Multi-marginal couplings of measures and grand couplings of MH chains."""

__version__ = "0.1.0"
