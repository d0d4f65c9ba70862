"""Network causal trees for heterogeneous treatment and spillover effects."""

__version__ = "0.1.0"
