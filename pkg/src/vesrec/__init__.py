"""Domain adaptation for 5-grade fundus image grading via vessel-anchored masked reconstruction."""

__version__ = "0.1.0"
