"""Time-domain speech enhancement with an attentive recurrent network."""

from .audio_io import AudioBuffer, read_wav, write_wav

__version__ = "0.1.0"

__all__ = ["AudioBuffer", "read_wav", "write_wav", "__version__"]
