"""Zero-shot voice identity morphing and morphing-attack evaluation."""

__version__ = "0.1.0"
