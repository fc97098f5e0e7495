"""Maximum singular value penalisation for self-attention, with verification tooling."""

__version__ = "0.1.0"
