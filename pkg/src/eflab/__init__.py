"""Insertion-based edit flows coupled with flow matching, at desk scale."""

from eflab.schedule import ExtendedTime, Schedule
from eflab.sequence import ImageBlock, MixedSequence, Vocabulary

__version__ = "0.1.0"

__all__ = [
    "ExtendedTime",
    "ImageBlock",
    "MixedSequence",
    "Schedule",
    "Vocabulary",
    "__version__",
]
