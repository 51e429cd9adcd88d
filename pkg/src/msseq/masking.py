"""Random input selection: which encoder(s) feed the decoder.

One selection is drawn per utterance per epoch and held constant across all
decoder steps of that utterance. Zeroing the context of an unused source
cuts both its forward contribution and its gradient exactly.
"""

from __future__ import annotations

import dataclasses
import enum

import numpy as np

from .errors import ConfigError


class MaskSelection(enum.Enum):
    TEXT_ONLY = "text"
    SPEECH_ONLY = "speech"
    BOTH = "both"

    @property
    def text_active(self) -> bool:
        return self is not MaskSelection.SPEECH_ONLY

    @property
    def speech_active(self) -> bool:
        return self is not MaskSelection.TEXT_ONLY


@dataclasses.dataclass(frozen=True)
class MaskPolicy:
    p_text: float = 1.0 / 3.0
    p_speech: float = 1.0 / 3.0
    p_both: float = 1.0 / 3.0

    def __post_init__(self):
        probs = (self.p_text, self.p_speech, self.p_both)
        if any(p < 0.0 for p in probs):
            raise ConfigError(f"mask probabilities must be non-negative: {probs}")
        if abs(sum(probs) - 1.0) > 1e-9:
            raise ConfigError(f"mask probabilities must sum to 1: {probs}")


def sample_mask(policy: MaskPolicy, rng: np.random.Generator) -> MaskSelection:
    u = rng.random()
    if u < policy.p_text:
        return MaskSelection.TEXT_ONLY
    if u < policy.p_text + policy.p_speech:
        return MaskSelection.SPEECH_ONLY
    return MaskSelection.BOTH


def apply_mask(c_t: np.ndarray, c_v: np.ndarray,
               mask: MaskSelection) -> tuple[np.ndarray, np.ndarray]:
    """Zero the context vector of each inactive source."""
    if not mask.speech_active:
        c_v = np.zeros_like(c_v)
    if not mask.text_active:
        c_t = np.zeros_like(c_t)
    return c_t, c_v
