"""Co-speech gesture generation with a multimodal pre-trained attention encoder."""

__version__ = "0.1.0"
