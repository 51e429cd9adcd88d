"""Multi-source sequence-to-sequence spectrogram model with dual attention.

One model, two input encoders (symbol sequence and source spectrogram), a
shared autoregressive decoder. Depending on which inputs are unmasked the
same model performs text-to-spectrogram synthesis, spectrogram-to-spectrogram
conversion, or a hybrid of both. All layers ship explicit hand-written
backward passes in double precision so every gradient is checkable against
finite differences.
"""

__version__ = "0.1.0"
