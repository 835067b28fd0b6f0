"""lipsynth: lip-to-speech synthesis with self-bootstrapped audio-visual training."""

__version__ = "0.1.0"
