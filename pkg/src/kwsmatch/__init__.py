"""Length-constrained keyword spotting: match a typed keyword against spoken audio.

A conformer encodes the audio, a cross-attention matcher compares it with the
keyword's phonemes, and training adds per-prefix match heads and a CTC head.
Everything runs on the small autodiff engine in :mod:`kwsmatch.tensor`.
"""

__version__ = "0.1.0"
