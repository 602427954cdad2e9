"""Tree search in embedding space with learned transition and reward models."""

__version__ = "0.1.0"
