"""Model output parsing and the renderable edit protocol.

The model is asked for a JSON array of ``{"clip", "script", "subtitles"}``
records. When a reply drifts from that, two fallbacks are tried in order:
the first bracketed JSON array embedded in surrounding prose, then a
line-oriented form::

    Clip 2: 今天给大家推荐一款巧克力 | 今天给大家 / 推荐一款巧克力

Results from a fallback are marked lenient.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from .manifest import ClipManifest, CreativeSequence, CreativeTuple, write_json_atomic
from .subtitle_seg import UnitWeights, exact_units

log = logging.getLogger(__name__)

PROTOCOL_VERSION = 1
LINE_SEPARATOR = " / "
_LINE_RE = re.compile(r"^\s*clip\s*#?\s*(\d+)\s*[:：]\s*(.*)$", re.IGNORECASE)


class ParseError(ValueError):
    """``kind`` is one of unparseable, unknown_clip, duplicate_clip, subtitle_mismatch, k_mismatch."""

    def __init__(self, kind: str, message: str, offset: int = 0):
        super().__init__(f"{kind} at byte {offset}: {message}")
        self.kind = kind
        self.offset = offset


class ProtocolError(ValueError):
    pass


class ProtocolVersionError(ProtocolError):
    pass


@dataclass(frozen=True)
class _Record:
    clip: int
    script: str
    subtitles: tuple[str, ...]
    offset: int  # character offset in the raw text


def _byte_offset(text: str, char_offset: int) -> int:
    return len(text[:char_offset].encode("utf-8"))


# -- strict grammar ------------------------------------------------------------------


def _decode_array(text: str, start: int) -> tuple[list[tuple[Any, int]], int]:
    """Decode a JSON array starting at ``text[start] == '['``, keeping each element's offset."""
    decoder = json.JSONDecoder()
    ws = re.compile(r"\s*")
    items: list[tuple[Any, int]] = []
    pos = ws.match(text, start + 1).end()
    if pos < len(text) and text[pos] == "]":
        return items, pos + 1
    while True:
        try:
            value, end = decoder.raw_decode(text, pos)
        except json.JSONDecodeError as exc:
            raise ParseError("unparseable", f"invalid JSON: {exc.msg}", _byte_offset(text, exc.pos)) from None
        items.append((value, pos))
        pos = ws.match(text, end).end()
        if pos >= len(text):
            raise ParseError("unparseable", "unterminated array", _byte_offset(text, pos))
        if text[pos] == "]":
            return items, pos + 1
        if text[pos] != ",":
            raise ParseError("unparseable", f"expected ',' or ']', found {text[pos]!r}", _byte_offset(text, pos))
        pos = ws.match(text, pos + 1).end()


def _records_from_items(text: str, items: list[tuple[Any, int]]) -> list[_Record]:
    records = []
    for value, offset in items:
        where = _byte_offset(text, offset)
        if not isinstance(value, dict):
            raise ParseError("unparseable", "array element is not an object", where)
        clip, script, subs = value.get("clip"), value.get("script"), value.get("subtitles")
        if isinstance(clip, str) and clip.strip().isdigit():
            clip = int(clip)
        if not isinstance(clip, int) or isinstance(clip, bool):
            raise ParseError("unparseable", "record needs an integer 'clip'", where)
        if not isinstance(script, str):
            raise ParseError("unparseable", "record needs a string 'script'", where)
        if not isinstance(subs, list) or not all(isinstance(s, str) for s in subs):
            raise ParseError("unparseable", "record needs a list of strings 'subtitles'", where)
        records.append(_Record(clip, script, tuple(subs), offset))
    return records


def _parse_strict(text: str) -> list[_Record]:
    start = len(text) - len(text.lstrip())
    if start >= len(text) or text[start] != "[":
        raise ParseError("unparseable", "reply is not a JSON array", _byte_offset(text, start))
    items, end = _decode_array(text, start)
    if text[end:].strip():
        raise ParseError("unparseable", "trailing text after the array", _byte_offset(text, end))
    return _records_from_items(text, items)


def _parse_embedded(text: str) -> list[_Record]:
    for match in re.finditer(r"\[", text):
        try:
            items, _ = _decode_array(text, match.start())
        except ParseError:
            continue
        if items and all(isinstance(v, dict) and "clip" in v for v, _ in items):
            return _records_from_items(text, items)
    raise ParseError("unparseable", "no embedded record array", 0)


def _parse_lines(text: str) -> list[_Record]:
    records = []
    offset = 0
    for line in text.splitlines(keepends=True):
        body = line.rstrip("\r\n")
        m = _LINE_RE.match(body)
        if m:
            rest = m.group(2)
            if "|" in rest:
                script, _, segs = rest.partition("|")
                script = script.strip()
                segs = segs.strip()
                subtitles = tuple(segs.split(LINE_SEPARATOR)) if segs else ()
            else:
                script, subtitles = rest.strip(), ()
            records.append(_Record(int(m.group(1)), script, subtitles, offset))
        offset += len(line)
    if not records:
        raise ParseError("unparseable", "no 'Clip <i>: ...' lines", 0)
    return records


# -- public API ------------------------------------------------------------------------


@dataclass(frozen=True)
class ParsedOutput:
    sequence: CreativeSequence
    lenient: bool


def parse_output_detailed(raw_text: str, manifest: ClipManifest, k: int | None = None) -> ParsedOutput:
    if not raw_text.strip():
        raise ParseError("unparseable", "empty reply", 0)
    lenient = False
    try:
        records = _parse_strict(raw_text)
    except ParseError as strict_error:
        lenient = True
        try:
            records = _parse_embedded(raw_text)
        except ParseError:
            try:
                records = _parse_lines(raw_text)
            except ParseError:
                raise strict_error from None
    seq = _to_sequence(raw_text, records, manifest, k)
    if lenient:
        log.info("parsed model reply with tolerant grammar (lenient=true)")
    return ParsedOutput(seq, lenient)


def parse_output(raw_text: str, manifest: ClipManifest, k: int | None = None) -> CreativeSequence:
    return parse_output_detailed(raw_text, manifest, k).sequence


def _to_sequence(text: str, records: list[_Record], manifest: ClipManifest, k: int | None) -> CreativeSequence:
    n = len(manifest.clips)
    seen: set[int] = set()
    tuples = []
    for rec in records:
        where = _byte_offset(text, rec.offset)
        if not 1 <= rec.clip <= n:
            raise ParseError("unknown_clip", f"clip index {rec.clip} is not in 1..{n}", where)
        if rec.clip in seen:
            raise ParseError("duplicate_clip", f"clip {rec.clip} selected twice", where)
        seen.add(rec.clip)
        if not rec.script:
            raise ParseError("subtitle_mismatch", f"clip {rec.clip} has an empty script", where)
        if not rec.subtitles or any(not s for s in rec.subtitles):
            raise ParseError("subtitle_mismatch", f"clip {rec.clip} has missing or empty subtitle segments", where)
        if "".join(rec.subtitles) != rec.script:
            raise ParseError("subtitle_mismatch", f"clip {rec.clip} subtitles do not re-concatenate to the script", where)
        tuples.append(CreativeTuple(manifest.by_index(rec.clip).clip_id, rec.script, rec.subtitles))
    if k is not None and len(tuples) != k:
        raise ParseError("k_mismatch", f"expected {k} clips, got {len(tuples)}", 0)
    return CreativeSequence(tuple(tuples))


def serialize_sequence(seq: CreativeSequence, manifest: ClipManifest) -> str:
    """Render a sequence in the strict grammar the parser accepts."""
    index = {c.clip_id: c.index for c in manifest.clips}
    records = [{"clip": index[t.clip_id], "script": t.script, "subtitles": list(t.subtitles)} for t in seq.tuples]
    return json.dumps(records, ensure_ascii=False, indent=1)


# -- edit protocol -----------------------------------------------------------------------


@dataclass(frozen=True)
class Cue:
    text: str
    start_s: float
    end_s: float


@dataclass(frozen=True)
class ProtocolEntry:
    clip_id: str
    source_in_s: float
    source_out_s: float
    script: str
    cues: tuple[Cue, ...]

    @property
    def duration_s(self) -> float:
        return self.source_out_s - self.source_in_s


@dataclass(frozen=True)
class EditProtocol:
    product_id: str
    entries: tuple[ProtocolEntry, ...]
    total_duration_s: float


def cue_windows(subtitles: tuple[str, ...] | list[str], duration_s: float, weights: UnitWeights | None = None) -> list[Cue]:
    """Split [0, duration] into consecutive windows proportional to each segment's units."""
    if not subtitles:
        raise ValueError("an entry needs at least one subtitle segment")
    units = [exact_units(s, weights) for s in subtitles]
    total = sum(units)
    if total == 0:
        units = [1] * len(subtitles)
        total = len(subtitles)
    cues = []
    acc = 0
    start = 0.0
    for i, (text, u) in enumerate(zip(subtitles, units)):
        acc += u
        end = duration_s if i == len(subtitles) - 1 else float(duration_s * acc / total)
        cues.append(Cue(text, start, end))
        start = end
    return cues


def to_edit_protocol(seq: CreativeSequence, manifest: ClipManifest, weights: UnitWeights | None = None) -> EditProtocol:
    seq.check_against(manifest)
    entries = []
    for t in seq.tuples:
        clip = manifest.by_id(t.clip_id)
        cues = cue_windows(t.subtitles, clip.duration_s, weights)
        entries.append(ProtocolEntry(t.clip_id, 0.0, clip.duration_s, t.script, tuple(cues)))
    total = sum(e.duration_s for e in entries)
    return EditProtocol(manifest.product.product_id, tuple(entries), total)


def validate_protocol(protocol: EditProtocol, tol: float = 1e-6) -> None:
    for n, entry in enumerate(protocol.entries):
        name = f"entry {n} ({entry.clip_id})"
        if entry.source_out_s <= entry.source_in_s:
            raise ProtocolError(f"{name}: source out time must be after in time")
        prev_end = 0.0
        for i, cue in enumerate(entry.cues):
            if cue.end_s < cue.start_s:
                raise ProtocolError(f"{name}: cue {i} ends before it starts")
            if cue.start_s < prev_end - tol:
                raise ProtocolError(f"{name}: cue {i} overlaps the previous cue")
            if cue.start_s < -tol or cue.end_s > entry.duration_s + tol:
                raise ProtocolError(f"{name}: cue {i} falls outside the clip duration")
            prev_end = cue.end_s
        if "".join(c.text for c in entry.cues) != entry.script:
            raise ProtocolError(f"{name}: cue texts do not re-concatenate to the script")
    total = sum(e.duration_s for e in protocol.entries)
    if abs(total - protocol.total_duration_s) > tol:
        raise ProtocolError(f"total_duration_s {protocol.total_duration_s} != sum of entries {total}")


def protocol_to_dict(protocol: EditProtocol) -> dict[str, Any]:
    return {
        "format_version": PROTOCOL_VERSION,
        "product_id": protocol.product_id,
        "total_duration_s": protocol.total_duration_s,
        "entries": [
            {
                "clip_id": e.clip_id,
                "in_s": e.source_in_s,
                "out_s": e.source_out_s,
                "script": e.script,
                "cues": [[c.text, c.start_s, c.end_s] for c in e.cues],
            }
            for e in protocol.entries
        ],
    }


def protocol_from_dict(data: Any) -> EditProtocol:
    if not isinstance(data, dict):
        raise ProtocolError("edit protocol must be a JSON object")
    version = data.get("format_version")
    if not isinstance(version, int) or version != PROTOCOL_VERSION:
        raise ProtocolVersionError(f"unsupported edit protocol format_version {version!r} (expected {PROTOCOL_VERSION})")
    try:
        entries = tuple(
            ProtocolEntry(
                str(e["clip_id"]),
                float(e["in_s"]),
                float(e["out_s"]),
                str(e["script"]),
                tuple(Cue(str(text), float(s), float(t)) for text, s, t in e["cues"]),
            )
            for e in data["entries"]
        )
        protocol = EditProtocol(str(data["product_id"]), entries, float(data["total_duration_s"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise ProtocolError(f"edit protocol schema violation: {exc!r}") from None
    validate_protocol(protocol)
    return protocol


def save_protocol(protocol: EditProtocol, path: str | Path) -> None:
    validate_protocol(protocol)
    write_json_atomic(path, protocol_to_dict(protocol))


def load_protocol(path: str | Path) -> EditProtocol:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ProtocolError(f"{path}: invalid JSON: {exc}") from None
    return protocol_from_dict(data)
