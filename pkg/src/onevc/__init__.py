"""One-shot voice conversion with unsupervised disentanglement of
content, speaker and pitch representations."""

__version__ = "0.1.0"
