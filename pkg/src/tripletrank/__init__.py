"""Learning to rank tracks with triplet losses mined from ranked lists."""

__version__ = "0.1.0"
