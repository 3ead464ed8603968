"""Dual-resolution clip representation: one sharp middle frame plus a coarse frame sequence."""

from __future__ import annotations

import hashlib
import math
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

from PIL import Image

from .manifest import ClipManifest, ClipMeta, find_frame, last_frame_index

Resolution = tuple[int, int]  # (height, width)


class FrameError(FileNotFoundError):
    pass


@dataclass(frozen=True)
class ReprConfig:
    fps: float = 1.0
    max_frames: int = 5
    spatial_res: Resolution = (996, 560)
    temporal_res: Resolution = (560, 315)

    def __post_init__(self) -> None:
        if not self.fps > 0:
            raise ValueError(f"fps must be > 0, got {self.fps}")
        if self.max_frames < 1:
            raise ValueError(f"max_frames must be >= 1, got {self.max_frames}")
        for name in ("spatial_res", "temporal_res"):
            h, w = getattr(self, name)
            if h <= 0 or w <= 0:
                raise ValueError(f"{name} must be positive, got {h}x{w}")


@dataclass(frozen=True)
class FrameRef:
    """A source frame plus the resolution it should be presented at."""

    path: str
    time_s: float
    resolution: Resolution


@dataclass(frozen=True)
class ClipRepresentation:
    clip_id: str
    spatial: FrameRef
    temporal: tuple[FrameRef, ...]
    supplementary: str | None = None


def mid_frame_time(duration_s: float) -> int:
    if not duration_s > 0:
        raise ValueError(f"duration must be > 0, got {duration_s}")
    return math.floor(duration_s / 2)


def uniform_indices(m: int, max_frames: int) -> list[int]:
    """Indices into 0..m; everything when it fits, else endpoint-inclusive rounding."""
    if max_frames < 1:
        raise ValueError("max_frames must be >= 1")
    if m + 1 <= max_frames:
        return list(range(m + 1))
    if max_frames == 1:
        return [m // 2]
    picked: list[int] = []
    for i in range(max_frames):
        # exact rational arithmetic so .5 ties round up deterministically
        idx = (2 * i * m + (max_frames - 1)) // (2 * (max_frames - 1))
        if not picked or picked[-1] != idx:
            picked.append(idx)
    return picked


def temporal_frame_times(duration_s: float, fps: float, max_frames: int) -> list[float]:
    if not duration_s > 0 or not fps > 0 or max_frames < 1:
        raise ValueError(f"invalid sampling config: T={duration_s}, fps={fps}, l={max_frames}")
    m = last_frame_index(duration_s, fps)
    return [idx / fps for idx in uniform_indices(m, max_frames)]


def _frame_path(frame_dir: Path, clip: ClipMeta, time_s: float, store_fps: float) -> Path:
    idx = round(time_s * store_fps)
    found = find_frame(frame_dir, idx)
    if found is None:
        raise FrameError(f"clip {clip.index} ({clip.clip_id}): no frame for t={time_s:g}s in {frame_dir}")
    return found


def build_representation(
    clip: ClipMeta,
    cfg: ReprConfig,
    *,
    frame_dir: Path | None = None,
    store_fps: float | None = None,
) -> ClipRepresentation:
    """Reference the frames a clip is shown with; pixels are resized later, on demand."""
    frame_dir = Path(clip.frame_dir) if frame_dir is None else frame_dir
    store_fps = cfg.fps if store_fps is None else store_fps
    mid = mid_frame_time(clip.duration_s)
    spatial = FrameRef(str(_frame_path(frame_dir, clip, mid, store_fps)), float(mid), cfg.spatial_res)
    temporal = tuple(
        FrameRef(str(_frame_path(frame_dir, clip, t, store_fps)), t, cfg.temporal_res)
        for t in temporal_frame_times(clip.duration_s, cfg.fps, cfg.max_frames)
    )
    return ClipRepresentation(clip.clip_id, spatial, temporal)


def build_representations(manifest: ClipManifest, cfg: ReprConfig) -> list[tuple[int, ClipRepresentation]]:
    return [
        (clip.index, build_representation(clip, cfg, frame_dir=manifest.frame_root(clip), store_fps=manifest.fps))
        for clip in manifest.clips
    ]


def resize_image(src: str | Path, resolution: Resolution) -> Image.Image:
    """Stretch to exactly (height, width); no letterboxing."""
    height, width = resolution
    with Image.open(src) as img:
        return img.convert("RGB").resize((width, height), Image.Resampling.BICUBIC)


class ResizeCache:
    """On-disk cache of resized frames keyed by (clip, time, resolution, source file).

    Writes go through a temp file and ``os.replace`` so concurrent writers of
    the same entry are harmless.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def entry_path(self, clip_id: str, ref: FrameRef) -> Path:
        h, w = ref.resolution
        digest = hashlib.sha256(str(Path(ref.path).resolve()).encode()).hexdigest()[:12]
        safe = "".join(ch if ch.isalnum() or ch in "-_" else "_" for ch in clip_id)
        return self.root / safe / f"t{ref.time_s:g}_{h}x{w}_{digest}.png"

    def get(self, clip_id: str, ref: FrameRef) -> Path:
        target = self.entry_path(clip_id, ref)
        if target.is_file():
            return target
        target.parent.mkdir(parents=True, exist_ok=True)
        img = resize_image(ref.path, ref.resolution)
        fd, tmp = tempfile.mkstemp(dir=target.parent, suffix=".png")
        os.close(fd)
        try:
            img.save(tmp, format="PNG")
            os.replace(tmp, target)
        finally:
            Path(tmp).unlink(missing_ok=True)
        return target

    def materialize(self, rep: ClipRepresentation) -> list[Path]:
        return [self.get(rep.clip_id, rep.spatial)] + [self.get(rep.clip_id, r) for r in rep.temporal]
