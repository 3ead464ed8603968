"""Subtitle unit counting, readability validation and a baseline segmenter.

Units weight characters by how wide they read on screen: a CJK character is
one unit, a Latin letter 0.4, a space 0.5. Unit sums are kept as exact
fractions internally so the 13-unit and ceil(units/10) limits never flip on
float noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

DEFAULT_PUNCTUATION = frozenset(
    "，。！？；：、,.!?;:…\u2014～~·“”\"‘’'（）()《》<>【】[]「」『』"
)


class SegmentationError(ValueError):
    pass


class InfeasibleSegmentation(SegmentationError):
    pass


@dataclass(frozen=True)
class UnitWeights:
    cjk_char: float = 1.0
    latin_letter: float = 0.4
    space: float = 0.5
    digit: float = 0.4
    other_symbol: float = 0.5

    def __post_init__(self) -> None:
        for name in ("cjk_char", "latin_letter", "space", "digit", "other_symbol"):
            if getattr(self, name) < 0:
                raise ValueError(f"weight {name} must be >= 0")

    def exact(self, cls: str) -> Fraction:
        return _exact(getattr(self, cls))


@lru_cache(maxsize=None)
def _exact(value: float) -> Fraction:
    # 0.4 means four tenths, not the nearest binary float
    return Fraction(repr(value))


def is_cjk(ch: str) -> bool:
    cp = ord(ch)
    return (
        0x4E00 <= cp <= 0x9FFF
        or 0x3400 <= cp <= 0x4DBF
        or 0x20000 <= cp <= 0x2EBEF
        or 0xF900 <= cp <= 0xFAFF
        or 0x3040 <= cp <= 0x30FF  # kana
        or 0xAC00 <= cp <= 0xD7AF  # hangul syllables
    )


def char_class(ch: str) -> str:
    if is_cjk(ch):
        return "cjk_char"
    if ch.isspace():
        return "space"
    if ch.isdigit():
        return "digit"
    if ch.isalpha():
        return "latin_letter"
    return "other_symbol"


def exact_units(text: str, weights: UnitWeights | None = None) -> Fraction:
    weights = weights or UnitWeights()
    return sum((weights.exact(char_class(ch)) for ch in text), Fraction(0))


def unit_count(text: str, weights: UnitWeights | None = None) -> float:
    return float(exact_units(text, weights))


# -- dictionary tokenizer ------------------------------------------------------


@dataclass(frozen=True)
class Dictionary:
    words: frozenset[str]
    max_len: int = 0

    @classmethod
    def from_words(cls, words: Iterable[str]) -> Dictionary:
        cleaned = frozenset(w.strip() for w in words if w.strip())
        return cls(cleaned, max((len(w) for w in cleaned), default=0))

    def __contains__(self, word: object) -> bool:
        return word in self.words

    def __len__(self) -> int:
        return len(self.words)


def load_dictionary(path: str | Path) -> Dictionary:
    """One word per line, UTF-8; blank lines and ``#`` comments are skipped."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return Dictionary.from_words(line for line in lines if not line.lstrip().startswith("#"))


@lru_cache(maxsize=1)
def default_dictionary() -> Dictionary:
    text = resources.files("adcut.data").joinpath("words.txt").read_text(encoding="utf-8")
    return Dictionary.from_words(line for line in text.splitlines() if not line.startswith("#"))


def tokenize(text: str, dictionary: Dictionary) -> list[str]:
    """Greedy longest match, left to right; unknown characters become one-char words."""
    words = []
    i = 0
    n = len(text)
    while i < n:
        step = 1
        for size in range(min(dictionary.max_len, n - i), 1, -1):
            if text[i : i + size] in dictionary:
                step = size
                break
        words.append(text[i : i + step])
        i += step
    return words


def _word_spans(text: str, dictionary: Dictionary) -> list[tuple[int, int]]:
    spans = []
    pos = 0
    for word in tokenize(text, dictionary):
        if len(word) > 1:
            spans.append((pos, pos + len(word)))
        pos += len(word)
    return spans


# -- validation ------------------------------------------------------------------


@dataclass(frozen=True)
class SsaConfig:
    max_units_per_segment: float = 13
    per_span_divisor: float = 10
    weights: UnitWeights = field(default_factory=UnitWeights)
    dictionary: Dictionary | None = None
    punctuation: frozenset[str] = DEFAULT_PUNCTUATION

    def __post_init__(self) -> None:
        if not self.max_units_per_segment > 0:
            raise ValueError("max_units_per_segment must be > 0")
        if not self.per_span_divisor > 0:
            raise ValueError("per_span_divisor must be > 0")

    @property
    def words(self) -> Dictionary:
        return self.dictionary if self.dictionary is not None else default_dictionary()


@dataclass(frozen=True)
class Violation:
    rule: str  # "length" | "span_count" | "word_split"
    location: tuple


@dataclass(frozen=True)
class SsaVerdict:
    violations: tuple[Violation, ...] = ()

    @property
    def passed(self) -> bool:
        return not self.violations

    @property
    def value(self) -> int:
        return int(self.passed)

    def rules(self) -> set[str]:
        return {v.rule for v in self.violations}


def punctuation_free_spans(script: str, punctuation: frozenset[str]) -> list[tuple[int, int]]:
    spans = []
    start = None
    for i, ch in enumerate(script):
        if ch in punctuation:
            if start is not None:
                spans.append((start, i))
                start = None
        elif start is None:
            start = i
    if start is not None:
        spans.append((start, len(script)))
    return spans


def segment_bounds(segments: Sequence[str]) -> list[tuple[int, int]]:
    bounds = []
    pos = 0
    for seg in segments:
        bounds.append((pos, pos + len(seg)))
        pos += len(seg)
    return bounds


def validate_segments(script: str, segments: Sequence[str], cfg: SsaConfig | None = None) -> SsaVerdict:
    cfg = cfg or SsaConfig()
    if "".join(segments) != script:
        raise SegmentationError("segments do not re-concatenate to the script")
    limit = _exact(float(cfg.max_units_per_segment))
    divisor = _exact(float(cfg.per_span_divisor))
    bounds = segment_bounds(segments)
    violations: list[Violation] = []

    for i, seg in enumerate(segments):
        if exact_units(seg, cfg.weights) > limit:
            violations.append(Violation("length", (i, seg)))

    for start, end in punctuation_free_spans(script, cfg.punctuation):
        units = exact_units(script[start:end], cfg.weights)
        allowed = math.ceil(units / divisor)
        hits = sum(1 for a, b in bounds if a < end and start < b and b > a)
        if hits > allowed:
            violations.append(Violation("span_count", (start, end, hits, allowed)))

    cuts = {a for a, _ in bounds[1:]}
    for a, b in _word_spans(script, cfg.words):
        for cut in sorted(cuts):
            if a < cut < b:
                violations.append(Violation("word_split", (script[a:b], cut)))
                break

    return SsaVerdict(tuple(violations))


# -- baseline segmenter ------------------------------------------------------------


def _chunks(script: str, punctuation: frozenset[str]) -> list[tuple[int, int, int]]:
    """(start, text_end, end): a punctuation-free span followed by its trailing punctuation run."""
    out = []
    i = 0
    n = len(script)
    lead_end = i
    while lead_end < n and script[lead_end] in punctuation:
        lead_end += 1
    if lead_end:
        out.append((0, 0, lead_end))
    i = lead_end
    while i < n:
        j = i
        while j < n and script[j] not in punctuation:
            j += 1
        k = j
        while k < n and script[k] in punctuation:
            k += 1
        out.append((i, j, k))
        i = k
    return out


def _greedy_cuts(script: str, start: int, end: int, allowed: set[int], cfg: SsaConfig) -> list[int] | None:
    """Farthest-reaching cuts in [start, end]; None if some piece cannot fit the limit."""
    limit = _exact(float(cfg.max_units_per_segment))
    cuts = [start]
    pos = start
    while pos < end:
        best = None
        units = Fraction(0)
        for q in range(pos + 1, end + 1):
            units += cfg.weights.exact(char_class(script[q - 1]))
            if units > limit:
                break
            if q in allowed:
                best = q
        if best is None:
            return None
        cuts.append(best)
        pos = best
    return cuts


def auto_segment(script: str, cfg: SsaConfig | None = None) -> list[str]:
    """Split at punctuation, then break long spans at the latest word-safe point.

    Punctuation stays with the preceding segment unless that would overflow
    the length limit, in which case it becomes a segment of its own.
    """
    cfg = cfg or SsaConfig()
    if not script:
        raise SegmentationError("script must be non-empty")
    inside_word = {c for a, b in _word_spans(script, cfg.words) for c in range(a + 1, b)}
    for a, b in _word_spans(script, cfg.words):
        if exact_units(script[a:b], cfg.weights) > _exact(float(cfg.max_units_per_segment)):
            raise InfeasibleSegmentation(f"word {script[a:b]!r} alone exceeds the segment limit")
    divisor = _exact(float(cfg.per_span_divisor))

    cuts: list[int] = [0]
    for start, text_end, end in _chunks(script, cfg.punctuation):
        allowed = set(range(start + 1, text_end + 1)) - inside_word
        allowed.add(end)
        pieces = _greedy_cuts(script, start, end, allowed - set(range(text_end + 1, end)), cfg)
        if pieces is None:
            pieces = _greedy_cuts(script, start, text_end, allowed, cfg) if text_end > start else [start]
            if pieces is None:
                raise InfeasibleSegmentation(f"span {script[start:text_end]!r} cannot be cut under the limit")
            tail = _greedy_cuts(script, text_end, end, set(range(text_end + 1, end + 1)), cfg)
            if tail is None:
                raise InfeasibleSegmentation("punctuation run exceeds the segment limit")
            pieces = pieces + tail[1:]
        if text_end > start:
            units = exact_units(script[start:text_end], cfg.weights)
            span_pieces = sum(1 for a, b in zip(pieces, pieces[1:]) if a < text_end)
            if span_pieces > math.ceil(units / divisor):
                raise InfeasibleSegmentation(
                    f"span {script[start:text_end]!r} needs {span_pieces} segments, "
                    f"limit is {math.ceil(units / divisor)}"
                )
        cuts.extend(pieces[1:])

    segments = [script[a:b] for a, b in zip(cuts, cuts[1:]) if b > a]
    verdict = validate_segments(script, segments, cfg)
    if not verdict.passed:
        raise InfeasibleSegmentation(f"no passing segmentation found: {verdict.violations}")
    return segments
