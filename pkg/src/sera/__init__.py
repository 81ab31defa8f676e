"""Implicit-reward-margin selection and preference bootstrapping over direct
alignment losses, on tabular bigram policies with a synthetic preference world."""

__version__ = "0.1.0"

from .losses import LossKind, PreferencePair, Variant
from .policy import SampleControls, TabularPolicy, Vocab
from .selection import PolicyHistory
from .trainer import SeraConfig, run_sera

__all__ = [
    "LossKind",
    "PolicyHistory",
    "PreferencePair",
    "SampleControls",
    "SeraConfig",
    "TabularPolicy",
    "Variant",
    "Vocab",
    "run_sera",
]
