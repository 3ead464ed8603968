"""Dataset construction (segment, filter, split) and training-task generation."""

from __future__ import annotations

import itertools
import json
import math
import random
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .gateway import Backend, BackendError, ChatPrompt, TextPart, render_template
from .manifest import (
    FORMAT_VERSION,
    ClipMeta,
    ManifestError,
    ProductInfo,
    TranscriptSpan,
    check_spans,
    clip_from_dict,
    clip_to_dict,
    product_from_dict,
    product_to_dict,
    spans_from_list,
    spans_to_list,
    write_json_atomic,
)

SENTENCE_END = frozenset("。！？!?.…")
TASK_KINDS = ("remix", "script_prediction", "script_segmentation", "compound")
DEFAULT_VISUAL_THRESHOLD = 0.5


@dataclass(frozen=True)
class SourceVideo:
    video_id: str
    product_id: str
    duration_s: float
    transcript_spans: tuple[TranscriptSpan, ...] | None = None
    frame_features: tuple[tuple[float, tuple[float, ...]], ...] | None = None
    clips: tuple[ClipMeta, ...] = ()
    # clip_id -> subtitle segments (ground truth for segmentation tasks)
    subtitles: dict[str, tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.duration_s > 0:
            raise ValueError(f"video {self.video_id}: duration must be > 0")


@dataclass(frozen=True)
class ClipSpan:
    start_s: float
    end_s: float
    script: str | None = None


# -- segmentation ----------------------------------------------------------------------


def segment_by_asr(video: SourceVideo, sentence_end: frozenset[str] = SENTENCE_END) -> list[ClipSpan]:
    """Group ASR spans into clips that each end on sentence-final punctuation."""
    spans = video.transcript_spans
    if not spans:
        raise ValueError(f"video {video.video_id}: no transcript spans")
    check_spans(spans, where=f"video {video.video_id}")
    clips: list[ClipSpan] = []
    group: list[TranscriptSpan] = []
    for span in spans:
        group.append(span)
        if span.text.rstrip() and span.text.rstrip()[-1] in sentence_end:
            clips.append(ClipSpan(group[0].start_s, group[-1].end_s, "".join(s.text for s in group)))
            group = []
    if group:
        clips.append(ClipSpan(group[0].start_s, group[-1].end_s, "".join(s.text for s in group)))
    return clips


def luminance_histogram(frame: np.ndarray, bins: int = 64) -> np.ndarray:
    """Normalized luminance histogram of an RGB (H, W, 3) or grayscale (H, W) uint8 frame."""
    arr = np.asarray(frame, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[..., :3] @ np.array([0.299, 0.587, 0.114])
    hist, _ = np.histogram(arr, bins=bins, range=(0.0, 256.0))
    return hist / max(hist.sum(), 1)


def feature_distance(a: Sequence[float], b: Sequence[float]) -> float:
    return float(np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)).sum())


def visual_boundaries(video: SourceVideo, threshold: float = DEFAULT_VISUAL_THRESHOLD) -> list[float]:
    series = video.frame_features
    if series is None or len(series) < 2:
        raise ValueError(f"video {video.video_id}: need at least 2 frames of features")
    return [
        t for (_, prev), (t, cur) in zip(series, series[1:]) if feature_distance(prev, cur) > threshold
    ]


def segment_by_visual(video: SourceVideo, threshold: float = DEFAULT_VISUAL_THRESHOLD) -> list[ClipSpan]:
    """Cut wherever consecutive-frame histograms differ by more than ``threshold`` (L1)."""
    cuts = [0.0] + visual_boundaries(video, threshold) + [video.duration_s]
    return [ClipSpan(a, b) for a, b in zip(cuts, cuts[1:]) if b > a]


# -- filtering -------------------------------------------------------------------------


@dataclass(frozen=True)
class FilterCriteria:
    max_duration_s: float = 120.0
    min_clips: int = 2
    max_clips: int = 8
    require_fluent: bool = False
    require_relevant: bool = False

    def __post_init__(self) -> None:
        if self.min_clips > self.max_clips:
            raise ValueError("min_clips must not exceed max_clips")


def _pass_fail(backend: Backend, template: str, **values: str) -> bool:
    reply = backend.complete(ChatPrompt((TextPart(render_template(template, **values)),))).raw_text.strip().upper()
    if reply not in ("PASS", "FAIL"):
        raise ValueError(f"judge replied {reply[:40]!r}, expected PASS or FAIL")
    return reply == "PASS"


def video_script(video: SourceVideo) -> str:
    if video.clips and any(c.transcript for c in video.clips):
        return "".join(c.transcript or "" for c in video.clips)
    return "".join(s.text for s in video.transcript_spans or ())


def filter_videos(
    videos: Iterable[SourceVideo],
    criteria: FilterCriteria | None = None,
    judge: Backend | None = None,
    products: Mapping[str, ProductInfo] | None = None,
) -> tuple[list[SourceVideo], list[tuple[SourceVideo, str]]]:
    criteria = criteria or FilterCriteria()
    kept: list[SourceVideo] = []
    dropped: list[tuple[SourceVideo, str]] = []
    for video in videos:
        if video.duration_s > criteria.max_duration_s:
            dropped.append((video, "duration"))
            continue
        if not criteria.min_clips <= len(video.clips) <= criteria.max_clips:
            dropped.append((video, "clip_count"))
            continue
        if judge is not None and (criteria.require_fluent or criteria.require_relevant):
            script = video_script(video)
            product = products.get(video.product_id) if products else None
            try:
                if criteria.require_fluent and not _pass_fail(judge, "fluency_v1", script=script):
                    dropped.append((video, "not_fluent"))
                    continue
                if criteria.require_relevant and not _pass_fail(
                    judge, "relevance_v1", script=script, product=product.name if product else video.product_id
                ):
                    dropped.append((video, "not_relevant"))
                    continue
            except (BackendError, ValueError):
                dropped.append((video, "judge_error"))
                continue
        kept.append(video)
    return kept, dropped


# -- splitting ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DatasetSplit:
    pretrain: tuple[SourceVideo, ...]
    sft: tuple[SourceVideo, ...]
    test: tuple[SourceVideo, ...]


def split_dataset(
    videos: Iterable[SourceVideo],
    test_products: int,
    max_per_product: int = 2,
    pretrain_fraction: float = 10 / 11,
    seed: int = 0,
) -> DatasetSplit:
    """Hold out one video from each of ``test_products`` sampled products; cap the rest per product."""
    if not 0 <= pretrain_fraction <= 1:
        raise ValueError("pretrain_fraction must be in [0, 1]")
    by_product: dict[str, list[SourceVideo]] = {}
    for v in sorted(videos, key=lambda v: (v.product_id, v.video_id)):
        by_product.setdefault(v.product_id, []).append(v)
    product_ids = sorted(by_product)
    if test_products > len(product_ids):
        raise ValueError(f"test_products={test_products} exceeds the {len(product_ids)} products available")
    rng = random.Random(seed)
    held_out = set(rng.sample(product_ids, test_products))
    test = [rng.choice(by_product[p]) for p in product_ids if p in held_out]
    train: list[SourceVideo] = []
    for p in product_ids:
        if p in held_out:
            continue
        pool = by_product[p]
        train.extend(rng.sample(pool, min(max_per_product, len(pool))))
    rng.shuffle(train)
    n_pretrain = round(len(train) * pretrain_fraction)
    return DatasetSplit(tuple(train[:n_pretrain]), tuple(train[n_pretrain:]), tuple(test))


# -- distractors and tasks -----------------------------------------------------------------


def sample_distractors(
    video: SourceVideo, catalog: Sequence[SourceVideo], count: int, rng: random.Random
) -> list[ClipMeta]:
    """Uniformly sampled clips of the same product taken from other videos."""
    pool = [
        c
        for other in sorted(catalog, key=lambda v: v.video_id)
        if other.product_id == video.product_id and other.video_id != video.video_id
        for c in other.clips
    ]
    return rng.sample(pool, min(count, len(pool)))


@dataclass(frozen=True)
class TaskSample:
    kind: str
    input: dict[str, Any]
    target: dict[str, Any]
    permutation_seed: int
    flags: tuple[str, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "input": self.input,
            "target": self.target,
            "permutation_seed": self.permutation_seed,
            "flags": list(self.flags),
        }


def distinct_permutations(items: Sequence[str], count: int, rng: random.Random) -> list[tuple[str, ...]]:
    """Up to ``count`` pairwise-distinct orderings; fewer only when fewer exist."""
    n_possible = math.factorial(len(items))
    if n_possible <= count:
        perms = list(itertools.permutations(items))
        rng.shuffle(perms)
        return perms
    seen: set[tuple[str, ...]] = set()
    out = []
    while len(out) < count:
        perm = list(items)
        rng.shuffle(perm)
        key = tuple(perm)
        if key not in seen:
            seen.add(key)
            out.append(key)
    return out


def build_tasks(
    video: SourceVideo,
    product: ProductInfo,
    distractors: Sequence[ClipMeta] = (),
    repetitions: int = 4,
    rng_seed: int = 0,
) -> list[TaskSample]:
    """Remix and compound tasks ``repetitions`` times each, plus one script-prediction and one segmentation task."""
    gt = [c.clip_id for c in sorted(video.clips, key=lambda c: c.index)]
    scripts = {c.clip_id: c.transcript for c in video.clips}
    missing = [cid for cid in gt if not scripts.get(cid)]
    if missing:
        raise ValueError(f"video {video.video_id}: clips without scripts: {missing}")
    pool = gt + [d.clip_id for d in distractors]
    prod = product_to_dict(product)
    rng = random.Random(rng_seed)

    def subs(cid: str) -> list[str]:
        return list(video.subtitles.get(cid, (scripts[cid],)))

    compound_target = {"sequence": [{"clip": cid, "script": scripts[cid], "subtitles": subs(cid)} for cid in gt]}
    tasks: list[TaskSample] = []
    for kind, target in (("remix", {"order": gt}), ("compound", compound_target)):
        perm_seed = rng.randrange(2**32)
        orders = distinct_permutations(pool, repetitions, random.Random(perm_seed))
        flags = ("degenerate_permutations",) if len(orders) < repetitions else ()
        for order in orders:
            tasks.append(TaskSample(kind, {"product": prod, "clips": list(order)}, target, perm_seed, flags))
    tasks.append(TaskSample("script_prediction", {"product": prod, "clips": gt}, {"scripts": [scripts[c] for c in gt]}, 0))
    tasks.append(
        TaskSample(
            "script_segmentation",
            {"product": prod, "clips": gt, "scripts": [scripts[c] for c in gt]},
            {"subtitles": [subs(c) for c in gt]},
            0,
        )
    )
    return tasks


def augment_tasks(tasks: Iterable[TaskSample], rewriter: Backend, template: str = "rewrite_v1") -> list[TaskSample]:
    """Attach rewritten ground-truth scripts to compound-task inputs as supplementary information.

    A failed rewrite skips the sample with a ``supplementary_failed`` flag instead of dropping it.
    """
    out = []
    for task in tasks:
        if task.kind != "compound":
            out.append(task)
            continue
        supplementary: dict[str, str] = {}
        try:
            for rec in task.target["sequence"]:
                prompt = ChatPrompt((TextPart(render_template(template, script=rec["script"])),))
                reply = rewriter.complete(prompt).raw_text.strip()
                if not reply:
                    raise BackendError("empty rewrite")
                supplementary[rec["clip"]] = reply
        except BackendError as exc:
            out.append(replace(task, flags=task.flags + (f"supplementary_failed: {exc}",)))
            continue
        out.append(replace(task, input={**task.input, "supplementary": supplementary}))
    return out


# -- catalog files --------------------------------------------------------------------------


@dataclass(frozen=True)
class Catalog:
    products: dict[str, ProductInfo]
    videos: tuple[SourceVideo, ...]
    root: Path | None = field(default=None, compare=False, repr=False)


def video_from_dict(data: Mapping[str, Any], where: str) -> SourceVideo:
    try:
        spans = data.get("transcript_spans")
        feats = data.get("frame_features")
        return SourceVideo(
            video_id=str(data["video_id"]),
            product_id=str(data["product_id"]),
            duration_s=float(data["duration_s"]),
            transcript_spans=None if spans is None else spans_from_list(spans, f"{where}.transcript_spans"),
            frame_features=None if feats is None else tuple((float(t), tuple(map(float, f))) for t, f in feats),
            clips=tuple(clip_from_dict(c, f"{where}.clips[{i}]") for i, c in enumerate(data.get("clips", []))),
            subtitles={k: tuple(v) for k, v in (data.get("subtitles") or {}).items()},
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ManifestError):
            raise
        raise ManifestError(f"{where}: {exc!r}") from None


def video_to_dict(video: SourceVideo) -> dict[str, Any]:
    return {
        "video_id": video.video_id,
        "product_id": video.product_id,
        "duration_s": video.duration_s,
        "transcript_spans": None if video.transcript_spans is None else spans_to_list(video.transcript_spans),
        "frame_features": None if video.frame_features is None else [[t, list(f)] for t, f in video.frame_features],
        "clips": [clip_to_dict(c) for c in video.clips],
        "subtitles": {k: list(v) for k, v in video.subtitles.items()},
    }


def load_catalog(path: str | Path) -> Catalog:
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"catalog not found: {path}")
    data = json.loads(path.read_text(encoding="utf-8"))
    if data.get("format_version") != FORMAT_VERSION:
        raise ManifestError(f"catalog: unsupported format_version {data.get('format_version')!r}")
    products = {}
    for i, p in enumerate(data.get("products", [])):
        info = product_from_dict(p, f"products[{i}]")
        if info.product_id in products:
            raise ManifestError(f"products[{i}]: duplicate product_id {info.product_id!r}")
        products[info.product_id] = info
    videos = tuple(video_from_dict(v, f"videos[{i}]") for i, v in enumerate(data.get("videos", [])))
    for v in videos:
        if v.product_id not in products:
            raise ManifestError(f"video {v.video_id}: unknown product_id {v.product_id!r}")
    return Catalog(products, videos, root=path.parent)


def save_catalog(catalog: Catalog, path: str | Path, videos: Iterable[SourceVideo] | None = None) -> None:
    chosen = list(catalog.videos if videos is None else videos)
    write_json_atomic(
        path,
        {
            "format_version": FORMAT_VERSION,
            "products": [product_to_dict(p) for p in catalog.products.values()],
            "videos": [video_to_dict(v) for v in chosen],
        },
    )


def with_clips(video: SourceVideo, spans: Sequence[ClipSpan], frame_dir_pattern: str = "frames/{clip_id}") -> SourceVideo:
    """Attach ClipMeta records for freshly segmented clip spans."""
    clips = []
    for i, span in enumerate(spans, 1):
        clip_id = f"{video.video_id}_c{i}"
        clips.append(
            ClipMeta(
                clip_id=clip_id,
                index=i,
                duration_s=span.end_s - span.start_s,
                frame_dir=frame_dir_pattern.format(clip_id=clip_id, video_id=video.video_id, index=i),
                source_video_id=video.video_id,
                transcript=span.script,
            )
        )
    return replace(video, clips=tuple(clips))


def write_tasks(tasks: Iterable[TaskSample], out_dir: str | Path) -> dict[str, Path]:
    out_dir = Path(out_dir)
    grouped: dict[str, list[dict[str, Any]]] = {k: [] for k in TASK_KINDS}
    for t in tasks:
        grouped[t.kind].append(t.to_dict())
    paths = {}
    for kind, items in grouped.items():
        path = out_dir / f"{kind}.json"
        write_json_atomic(path, {"format_version": FORMAT_VERSION, "kind": kind, "tasks": items})
        paths[kind] = path
    return paths
