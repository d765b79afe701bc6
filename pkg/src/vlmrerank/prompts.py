"""Prompt templates and their rendering into multimodal chat messages.

Templates live in ``templates/<strategy>.txt`` and are read byte-for-byte. Image placeholders
(``<GROUNDIMAGE>``, ``<AERIALIMAGE>``, ``<AERIALIMAGE1>``, ``<AERIALIMAGE2>``) become image
parts; everything else, including surrounding quote characters, stays as text.
"""

from __future__ import annotations

import mimetypes
import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path

from .datamodel import AerialCandidate, GroundQuery, StrategyId

GROUND = "<GROUNDIMAGE>"
AERIAL = "<AERIALIMAGE>"
AERIAL1 = "<AERIALIMAGE1>"
AERIAL2 = "<AERIALIMAGE2>"

_PLACEHOLDER_RE = re.compile(r"<(?:GROUNDIMAGE|AERIALIMAGE[12]?)>")

_ARITY = {
    StrategyId.DIRECT: (GROUND, AERIAL),
    StrategyId.LIKERT: (GROUND, AERIAL),
    StrategyId.YESNO: (GROUND, AERIAL),
    StrategyId.REASON_YESNO: (GROUND, AERIAL),
    StrategyId.PAIRWISE: (GROUND, AERIAL1, AERIAL2),
}


class PromptError(ValueError):
    pass


class UnresolvableImage(PromptError):
    pass


@dataclass(frozen=True)
class TextPart:
    text: str


@dataclass(frozen=True)
class ImagePart:
    media_type: str
    ref: str  # absolute filesystem path, or an http(s)/data URI passed through untouched


@dataclass(frozen=True)
class MultimodalMessage:
    parts: tuple[TextPart | ImagePart, ...]
    role: str = "user"

    @property
    def text(self) -> str:
        """Concatenated text parts (images elided)."""
        return "".join(p.text for p in self.parts if isinstance(p, TextPart))

    @property
    def images(self) -> tuple[ImagePart, ...]:
        return tuple(p for p in self.parts if isinstance(p, ImagePart))


@dataclass(frozen=True)
class PromptTemplate:
    strategy: StrategyId
    text: str

    def __post_init__(self):
        found = tuple(_PLACEHOLDER_RE.findall(self.text))
        if found != _ARITY[self.strategy]:
            raise PromptError(f"{self.strategy.value} template has placeholders {found}, expected {_ARITY[self.strategy]}")

    def render(self, images: dict[str, ImagePart]) -> MultimodalMessage:
        parts: list[TextPart | ImagePart] = []
        pos = 0
        for m in _PLACEHOLDER_RE.finditer(self.text):
            if m.start() > pos:
                parts.append(TextPart(self.text[pos : m.start()]))
            parts.append(images[m.group(0)])
            pos = m.end()
        if pos < len(self.text):
            parts.append(TextPart(self.text[pos:]))
        return MultimodalMessage(tuple(parts))


def _read_template_file(name: str) -> str:
    return resources.files("vlmrerank").joinpath("templates", f"{name}.txt").read_bytes().decode("utf-8")


@lru_cache(maxsize=None)
def get_template(strategy: StrategyId | str) -> PromptTemplate:
    strategy = StrategyId(strategy)
    return PromptTemplate(strategy, _read_template_file(strategy.value))


@lru_cache(maxsize=None)
def reason_followup_text() -> str:
    """Second-turn instruction for the reasoning strategy (asks for a bare Yes/No)."""
    return _read_template_file("reason_followup")


def resolve_image(ref: str, images_root: str | Path | None = None) -> ImagePart:
    """Turn a record's image reference into an ImagePart, checking that local files exist."""
    if not ref:
        raise UnresolvableImage("empty image reference")
    if ref.startswith("data:"):
        media_type = ref[5:].split(";", 1)[0].split(",", 1)[0] or "application/octet-stream"
        return ImagePart(media_type, ref)
    if ref.startswith(("http://", "https://")):
        guessed = mimetypes.guess_type(ref.split("?", 1)[0])[0]
        return ImagePart(guessed or "image/jpeg", ref)
    path = Path(ref[7:] if ref.startswith("file://") else ref)
    if not path.is_absolute() and images_root is not None:
        path = Path(images_root) / path
    if not path.is_file():
        raise UnresolvableImage(f"image not found: {path}")
    media_type = mimetypes.guess_type(path.name)[0] or "application/octet-stream"
    return ImagePart(media_type, str(path.resolve()))


def render_pointwise(
    strategy: StrategyId | str,
    query: GroundQuery,
    candidate: AerialCandidate,
    images_root: str | Path | None = None,
) -> MultimodalMessage:
    strategy = StrategyId(strategy)
    if not strategy.is_pointwise:
        raise PromptError(f"{strategy.value} is not a pointwise strategy")
    return get_template(strategy).render(
        {
            GROUND: resolve_image(query.image_ref, images_root),
            AERIAL: resolve_image(candidate.image_ref, images_root),
        }
    )


def render_pairwise(
    query: GroundQuery,
    first: AerialCandidate,
    second: AerialCandidate,
    images_root: str | Path | None = None,
) -> MultimodalMessage:
    if first.id == second.id:
        raise PromptError(f"cannot compare candidate {first.id!r} with itself")
    return get_template(StrategyId.PAIRWISE).render(
        {
            GROUND: resolve_image(query.image_ref, images_root),
            AERIAL1: resolve_image(first.image_ref, images_root),
            AERIAL2: resolve_image(second.image_ref, images_root),
        }
    )


def render_reason_followup(first_turn: MultimodalMessage, reasoning: str) -> tuple[MultimodalMessage, ...]:
    """Conversation for the second reasoning turn: original prompt, model reasoning, Yes/No ask."""
    return (
        first_turn,
        MultimodalMessage((TextPart(reasoning),), role="assistant"),
        MultimodalMessage((TextPart(reason_followup_text()),)),
    )
