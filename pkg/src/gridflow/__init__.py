"""Power-flow datasets, a Newton-Raphson oracle and gated graph surrogates."""

__version__ = "0.1.0"
