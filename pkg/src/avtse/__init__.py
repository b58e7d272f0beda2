"""Audio-visual target speech extraction with a mask-and-recover refinement block."""

__version__ = "0.1.0"
