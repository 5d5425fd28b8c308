"""Desk-scale contrastive SSL for computational pathology.

Loss family with semantically relevant sampling, momentum encoders over a
staged patch encoder, and a weakly-supervised MIL evaluation pipeline.
"""

__version__ = "0.1.0"
