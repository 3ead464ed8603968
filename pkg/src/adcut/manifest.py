"""Data model and on-disk manifest format for products, clip pools and frames.

A manifest is one JSON document per sample::

    {
      "format_version": 1,
      "fps": 1,
      "product": {"product_id": "...", "name": "...", "selling_points": [...], "extra": {...}},
      "clips": [
        {"clip_id": "...", "index": 1, "duration_s": 6.0, "frame_dir": "frames/c1",
         "source_video_id": "...", "transcript": null, "transcript_spans": null}
      ]
    }

Frames live in one directory per clip, one image per frame index at the
declared fps (``000.jpg`` is t=0, ``001.jpg`` is t=1/fps, ...). Relative
``frame_dir`` values resolve against the manifest's own directory.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

FORMAT_VERSION = 1
FRAME_EXTENSIONS = (".jpg", ".png")


class ManifestError(ValueError):
    """Raised when a manifest document is missing, malformed or inconsistent."""


@dataclass(frozen=True)
class ProductInfo:
    product_id: str
    name: str
    selling_points: tuple[str, ...] = ()
    extra: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.product_id:
            raise ManifestError("product.product_id must be non-empty")
        if not self.name:
            raise ManifestError("product.name must be non-empty")


@dataclass(frozen=True)
class TranscriptSpan:
    text: str
    start_s: float
    end_s: float


@dataclass(frozen=True)
class ClipMeta:
    clip_id: str
    index: int
    duration_s: float
    frame_dir: str
    source_video_id: str
    transcript: str | None = None
    transcript_spans: tuple[TranscriptSpan, ...] | None = None

    def __post_init__(self) -> None:
        if not self.clip_id:
            raise ManifestError("clip_id must be non-empty")
        if self.index < 1:
            raise ManifestError(f"clip {self.clip_id}: index must be >= 1, got {self.index}")
        if not self.duration_s > 0:
            raise ManifestError(f"clip {self.index}: duration_s must be > 0, got {self.duration_s}")
        if self.transcript_spans:
            check_spans(self.transcript_spans, where=f"clip {self.index}")


@dataclass(frozen=True)
class ClipManifest:
    product: ProductInfo
    clips: tuple[ClipMeta, ...]
    fps: float = 1.0
    # directory that relative frame_dir entries resolve against
    root: Path | None = field(default=None, compare=False, repr=False)

    def __post_init__(self) -> None:
        if not self.fps > 0:
            raise ManifestError(f"fps must be > 0, got {self.fps}")
        seen: set[int] = set()
        for clip in self.clips:
            if clip.index in seen:
                raise ManifestError(f"duplicate clip index {clip.index}")
            seen.add(clip.index)
        if sorted(seen) != list(range(1, len(self.clips) + 1)):
            raise ManifestError(
                f"clip indices must be contiguous 1..{len(self.clips)}, got {sorted(seen)}"
            )
        ids = [c.clip_id for c in self.clips]
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        if dupes:
            raise ManifestError(f"duplicate clip_id {dupes[0]!r}")

    def by_index(self, index: int) -> ClipMeta:
        for clip in self.clips:
            if clip.index == index:
                return clip
        raise KeyError(index)

    def by_id(self, clip_id: str) -> ClipMeta:
        for clip in self.clips:
            if clip.clip_id == clip_id:
                return clip
        raise KeyError(clip_id)

    def frame_root(self, clip: ClipMeta) -> Path:
        path = Path(clip.frame_dir)
        if not path.is_absolute() and self.root is not None:
            path = self.root / path
        return path


@dataclass(frozen=True)
class CreativeTuple:
    clip_id: str
    script: str
    subtitles: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.script:
            raise ValueError(f"clip {self.clip_id}: script must be non-empty")
        if "".join(self.subtitles) != self.script:
            raise ValueError(f"clip {self.clip_id}: subtitles do not re-concatenate to the script")


@dataclass(frozen=True)
class CreativeSequence:
    tuples: tuple[CreativeTuple, ...]

    def __post_init__(self) -> None:
        ids = [t.clip_id for t in self.tuples]
        if len(set(ids)) != len(ids):
            raise ValueError("clip ids in a creative sequence must be distinct")

    @property
    def clip_ids(self) -> tuple[str, ...]:
        return tuple(t.clip_id for t in self.tuples)

    def check_against(self, manifest: ClipManifest) -> None:
        known = {c.clip_id for c in manifest.clips}
        for t in self.tuples:
            if t.clip_id not in known:
                raise ValueError(f"clip {t.clip_id!r} is not in the manifest")


def check_spans(spans: Iterable[TranscriptSpan], where: str = "transcript") -> None:
    prev_end = -math.inf
    for i, span in enumerate(spans):
        if span.end_s < span.start_s:
            raise ManifestError(f"{where}: span {i} ends before it starts")
        if span.start_s < prev_end:
            raise ManifestError(f"{where}: span {i} overlaps or is out of order")
        prev_end = span.end_s


def last_frame_index(duration_s: float, fps: float) -> int:
    """m = floor(T * fps), tolerant of float noise such as 0.3 * 10."""
    return math.floor(duration_s * fps + 1e-9)


def find_frame(frame_dir: Path, frame_index: int) -> Path | None:
    for ext in FRAME_EXTENSIONS:
        candidate = frame_dir / f"{frame_index:03d}{ext}"
        if candidate.is_file():
            return candidate
    return None


def check_frames(manifest: ClipManifest) -> None:
    for clip in manifest.clips:
        frame_dir = manifest.frame_root(clip)
        for idx in range(last_frame_index(clip.duration_s, manifest.fps) + 1):
            if find_frame(frame_dir, idx) is None:
                raise ManifestError(
                    f"clip {clip.index} ({clip.clip_id}): missing frame {idx:03d} "
                    f"(t={idx / manifest.fps:g}s) in {frame_dir}"
                )


# -- (de)serialization -------------------------------------------------------


def _require(obj: dict[str, Any], key: str, kind: type | tuple[type, ...], where: str) -> Any:
    if key not in obj:
        raise ManifestError(f"{where}: missing field {key!r}")
    value = obj[key]
    if isinstance(value, bool) and bool not in (kind if isinstance(kind, tuple) else (kind,)):
        raise ManifestError(f"{where}.{key}: expected {kind}, got bool")
    if not isinstance(value, kind):
        raise ManifestError(f"{where}.{key}: expected {kind}, got {type(value).__name__}")
    return value


def product_from_dict(data: Any, where: str = "product") -> ProductInfo:
    if not isinstance(data, dict):
        raise ManifestError(f"{where}: expected an object")
    points = data.get("selling_points", [])
    if not isinstance(points, list) or not all(isinstance(p, str) for p in points):
        raise ManifestError(f"{where}.selling_points: expected a list of strings")
    extra = data.get("extra", {})
    if not isinstance(extra, dict) or not all(isinstance(v, str) for v in extra.values()):
        raise ManifestError(f"{where}.extra: expected a string-to-string map")
    return ProductInfo(
        product_id=_require(data, "product_id", str, where),
        name=_require(data, "name", str, where),
        selling_points=tuple(points),
        extra=dict(extra),
    )


def product_to_dict(product: ProductInfo) -> dict[str, Any]:
    return {
        "product_id": product.product_id,
        "name": product.name,
        "selling_points": list(product.selling_points),
        "extra": dict(product.extra),
    }


def spans_from_list(data: Any, where: str) -> tuple[TranscriptSpan, ...]:
    if not isinstance(data, list):
        raise ManifestError(f"{where}: expected a list")
    spans = []
    for i, item in enumerate(data):
        if isinstance(item, dict):
            text, start, end = item.get("text"), item.get("start_s"), item.get("end_s")
        elif isinstance(item, list) and len(item) == 3:
            text, start, end = item
        else:
            raise ManifestError(f"{where}[{i}]: expected [text, start_s, end_s]")
        if not isinstance(text, str) or not isinstance(start, (int, float)) or not isinstance(end, (int, float)):
            raise ManifestError(f"{where}[{i}]: bad span types")
        spans.append(TranscriptSpan(text, float(start), float(end)))
    return tuple(spans)


def spans_to_list(spans: Iterable[TranscriptSpan]) -> list[list[Any]]:
    return [[s.text, s.start_s, s.end_s] for s in spans]


def clip_from_dict(data: Any, where: str) -> ClipMeta:
    if not isinstance(data, dict):
        raise ManifestError(f"{where}: expected an object")
    transcript = data.get("transcript")
    if transcript is not None and not isinstance(transcript, str):
        raise ManifestError(f"{where}.transcript: expected a string or null")
    spans = data.get("transcript_spans")
    try:
        return ClipMeta(
            clip_id=_require(data, "clip_id", str, where),
            index=_require(data, "index", int, where),
            duration_s=float(_require(data, "duration_s", (int, float), where)),
            frame_dir=_require(data, "frame_dir", str, where),
            source_video_id=_require(data, "source_video_id", str, where),
            transcript=transcript,
            transcript_spans=None if spans is None else spans_from_list(spans, f"{where}.transcript_spans"),
        )
    except ManifestError as exc:
        if str(exc).startswith(where):
            raise
        raise ManifestError(f"{where}: {exc}") from None


def clip_to_dict(clip: ClipMeta) -> dict[str, Any]:
    return {
        "clip_id": clip.clip_id,
        "index": clip.index,
        "duration_s": clip.duration_s,
        "frame_dir": clip.frame_dir,
        "source_video_id": clip.source_video_id,
        "transcript": clip.transcript,
        "transcript_spans": None if clip.transcript_spans is None else spans_to_list(clip.transcript_spans),
    }


def manifest_from_dict(data: Any, root: Path | None = None) -> ClipManifest:
    if not isinstance(data, dict):
        raise ManifestError("manifest: expected a JSON object at top level")
    version = data.get("format_version")
    if version != FORMAT_VERSION:
        raise ManifestError(f"manifest: unsupported format_version {version!r} (expected {FORMAT_VERSION})")
    fps = _require(data, "fps", (int, float), "manifest")
    clips_raw = _require(data, "clips", list, "manifest")
    clips = tuple(clip_from_dict(c, f"clips[{i}]") for i, c in enumerate(clips_raw))
    return ClipManifest(
        product=product_from_dict(data.get("product"), "product"),
        clips=clips,
        fps=float(fps),
        root=root,
    )


def manifest_to_dict(manifest: ClipManifest) -> dict[str, Any]:
    return {
        "format_version": FORMAT_VERSION,
        "fps": manifest.fps,
        "product": product_to_dict(manifest.product),
        "clips": [clip_to_dict(c) for c in manifest.clips],
    }


def load_manifest(path: str | Path, *, verify_frames: bool = True) -> ClipManifest:
    """Load and fully validate a manifest; never returns a partial object."""
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}") from None
    manifest = manifest_from_dict(data, root=path.parent)
    if verify_frames:
        check_frames(manifest)
    return manifest


def write_json_atomic(path: str | Path, payload: Any) -> None:
    path = Path(path)
    text = json.dumps(payload, ensure_ascii=False, indent=2) + "\n"
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def save_manifest(manifest: ClipManifest, path: str | Path) -> None:
    try:
        write_json_atomic(path, manifest_to_dict(manifest))
    except OSError as exc:
        raise ManifestError(f"cannot write manifest to {path}: {exc}") from exc
