"""Close-talking to distant speech domain adaptation at desk scale."""

__version__ = "0.1.0"
