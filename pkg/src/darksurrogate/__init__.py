"""Dark surrogate models for transfer-based adversarial attacks."""

__version__ = "0.1.0"
