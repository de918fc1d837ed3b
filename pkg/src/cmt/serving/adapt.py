"""Emotion-conditioned response adaptation.

A predicted emotion category maps to a machine-readable directive telling
the caller how to style its reply: interface theme brightness, dialogue
tone, response pacing, and whether to add supportive cues. The mapping is
a fixed, total, pure table over the eight canonical emotion categories:

    happiness, surprise      -> bright theme, celebratory tone, fast
    neutral                  -> all defaults
    sadness, fear            -> dim theme, empathetic tone, deliberate,
                                supportive cues
    anger, disgust, contempt -> default theme, empathetic tone, deliberate,
                                supportive cues

Label names outside the canonical set (custom label vocabularies) fall
back to the all-default directive.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from ..errors import InputError

THEMES = ("bright", "default", "dim")
TONES = ("celebratory", "neutral", "empathetic")
SPEEDS = ("fast", "normal", "deliberate")


@dataclass(frozen=True)
class AdaptationDirective:
    theme_brightness: str
    tone: str
    response_speed: str
    supportive_cues: bool

    def __post_init__(self):
        if self.theme_brightness not in THEMES:
            raise InputError(f"unknown theme {self.theme_brightness!r}")
        if self.tone not in TONES:
            raise InputError(f"unknown tone {self.tone!r}")
        if self.response_speed not in SPEEDS:
            raise InputError(f"unknown speed {self.response_speed!r}")

    def to_dict(self) -> dict:
        return {
            "theme_brightness": self.theme_brightness,
            "tone": self.tone,
            "response_speed": self.response_speed,
            "supportive_cues": self.supportive_cues,
        }


DEFAULT_DIRECTIVE = AdaptationDirective("default", "neutral", "normal", False)

_POSITIVE = AdaptationDirective("bright", "celebratory", "fast", False)
_LOW_NEGATIVE = AdaptationDirective("dim", "empathetic", "deliberate", True)
_HOT_NEGATIVE = AdaptationDirective("default", "empathetic", "deliberate", True)

DIRECTIVE_TABLE: dict[str, AdaptationDirective] = {
    "happiness": _POSITIVE,
    "surprise": _POSITIVE,
    "neutral": DEFAULT_DIRECTIVE,
    "sadness": _LOW_NEGATIVE,
    "fear": _LOW_NEGATIVE,
    "anger": _HOT_NEGATIVE,
    "disgust": _HOT_NEGATIVE,
    "contempt": _HOT_NEGATIVE,
}


def adapt_response(category: int, labels: Sequence[str]) -> AdaptationDirective:
    """Directive for predicted category index ``category`` under ``labels``.

    Pure and total: every valid index maps to exactly one directive; an
    out-of-range index is an input error.
    """
    if not 0 <= category < len(labels):
        raise InputError(
            f"category index {category} outside {len(labels)} labels"
        )
    return DIRECTIVE_TABLE.get(labels[category], DEFAULT_DIRECTIVE)


__all__ = [
    "AdaptationDirective", "DIRECTIVE_TABLE", "DEFAULT_DIRECTIVE",
    "adapt_response", "THEMES", "TONES", "SPEEDS",
]
