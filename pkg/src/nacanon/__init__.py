"""Speaker anonymization with neural-audio-codec tokens and token language models."""

__version__ = "0.1.0"
