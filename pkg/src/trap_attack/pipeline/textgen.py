"""Negative-prompt writers: a remote text-generation client and an offline template."""

from __future__ import annotations

import logging
import re

from ..errors import EmptyInputError, TrapError

log = logging.getLogger(__name__)

TEMPLATE = "low quality, blurry, unappealing {subject}"
REMOTE_INSTRUCTION = (
    "Write a short image-generation prompt describing an unattractive, low-quality photo of the "
    "main subject of this caption. Reply with the prompt only.\nCaption: {caption}"
)

_DETERMINERS = {"a", "an", "the", "some", "this", "that", "these", "those", "one", "two", "three",
                "four", "five", "several", "many", "few", "his", "her", "their", "its", "my", "our"}
_BOUNDARIES = {"on", "in", "at", "with", "near", "by", "beside", "behind", "under", "over", "above",
               "of", "from", "to", "into", "onto", "next", "and", "or", "is", "are", "was", "were",
               "that", "which", "who", "while", "for", "front", "inside", "outside", "along", "against",
               "around", "between", "through", "across", "sitting", "standing", "holding"}


def head_noun(caption: str) -> str:
    """Head of the caption's leading noun phrase.

    Skips leading determiners, then reads words up to the first preposition,
    conjunction, verb-like word or ``-ing`` form; the last word read is the head.
    """
    words = re.findall(r"[a-z][a-z'-]*", caption.lower())
    if not words:
        raise EmptyInputError("caption has no words")
    i = 0
    while i < len(words) - 1 and words[i] in _DETERMINERS:
        i += 1
    phrase = []
    for w in words[i:]:
        if phrase and (w in _BOUNDARIES or w.endswith("ing")):
            break
        phrase.append(w)
    return phrase[-1]


class OfflineTemplateEngine:
    name = "offline-template"

    def generate(self, caption: str) -> str:
        if not caption or not caption.strip():
            raise EmptyInputError("caption must be non-empty")
        return TEMPLATE.format(subject=head_noun(caption))


class RemoteTextGenerator:
    """HTTP JSON client: POST {prompt, max_tokens} -> {text}."""

    name = "remote"

    def __init__(self, endpoint: str, timeout: float = 60.0, headers: dict | None = None, client=None):
        import httpx

        self.endpoint = endpoint
        self.client = client or httpx.Client(timeout=timeout, headers=headers or {})

    def generate(self, caption: str) -> str:
        import httpx

        if not caption or not caption.strip():
            raise EmptyInputError("caption must be non-empty")
        try:
            resp = self.client.post(self.endpoint, json={"prompt": REMOTE_INSTRUCTION.format(caption=caption),
                                                         "max_tokens": 40})
            resp.raise_for_status()
            text = resp.json().get("text", "").strip()
        except (httpx.HTTPError, ValueError) as exc:
            raise TrapError(f"text generator unavailable: {exc}") from exc
        if not text:
            raise TrapError("text generator returned an empty prompt")
        return text


def generate_negative_prompt(caption: str, textgen=None) -> tuple[str, bool]:
    """Returns (prompt, fell_back). Remote failures fall back to the offline template."""
    if not caption or not caption.strip():
        raise EmptyInputError("caption must be non-empty")
    textgen = textgen or OfflineTemplateEngine()
    try:
        return textgen.generate(caption), False
    except TrapError as exc:
        if isinstance(textgen, OfflineTemplateEngine):
            raise
        log.warning("falling back to offline negative prompt: %s", exc)
        return OfflineTemplateEngine().generate(caption), True
