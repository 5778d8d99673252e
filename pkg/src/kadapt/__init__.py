"""Parameter-efficient adaptation of small vision transformers."""

__version__ = "0.1.0"
