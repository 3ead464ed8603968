"""Benchmark construction, inference runs and report generation."""

from __future__ import annotations

import hashlib
import json
import logging
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .clip_repr import ReprConfig, build_representations
from .dataset_tasks import SourceVideo, sample_distractors
from .gateway import Backend, BackendError, GenerationRequest, assemble_request, canonical_json, generate, run_bounded
from .manifest import (
    FORMAT_VERSION,
    ClipManifest,
    ClipMeta,
    CreativeSequence,
    CreativeTuple,
    ManifestError,
    ProductInfo,
    clip_from_dict,
    clip_to_dict,
    product_from_dict,
    product_to_dict,
    write_json_atomic,
)
from .metrics import (
    JudgeParseError,
    MetricReport,
    WcdConfig,
    aggregate,
    judge,
    sequence_ssa,
    sequence_wcd,
    sra,
)
from .protocol import ParseError, parse_output_detailed, serialize_sequence
from .subtitle_seg import SsaConfig, auto_segment

log = logging.getLogger(__name__)


class BenchConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BenchSample:
    sample_id: str
    manifest: ClipManifest
    gt_clip_ids: tuple[str, ...]
    gt_scripts: dict[str, str] = field(default_factory=dict)
    distractor_ids: tuple[str, ...] = ()
    flags: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        pool = {c.clip_id: c for c in self.manifest.clips}
        missing = [g for g in self.gt_clip_ids if g not in pool]
        if missing:
            raise ValueError(f"sample {self.sample_id}: ground-truth clips missing from pool: {missing}")
        gt_sources = {pool[g].source_video_id for g in self.gt_clip_ids}
        for d in self.distractor_ids:
            if pool[d].source_video_id in gt_sources:
                raise ValueError(f"sample {self.sample_id}: distractor {d} comes from the ground-truth video")


def build_bench(
    test_set: Sequence[SourceVideo],
    catalog: Sequence[SourceVideo],
    products: Mapping[str, ProductInfo],
    distractor_count: int = 2,
    seed: int = 0,
    fps: float = 1.0,
    root: Path | None = None,
) -> list[BenchSample]:
    """One sample per test video: its clips plus same-product distractors, shuffled and re-indexed."""
    samples = []
    for video in sorted(test_set, key=lambda v: v.video_id):
        if not video.clips:
            raise ValueError(f"video {video.video_id} has no clips")
        rng = random.Random(f"{seed}:{video.video_id}")
        distractors = sample_distractors(video, catalog, distractor_count, rng) if distractor_count else []
        flags: tuple[str, ...] = ()
        if len(distractors) < distractor_count:
            flags = (f"distractors_short:{len(distractors)}/{distractor_count}",)
            log.warning("sample %s: only %d of %d distractors available", video.video_id, len(distractors), distractor_count)
        gt = [c for c in sorted(video.clips, key=lambda c: c.index)]
        pool = gt + distractors
        rng.shuffle(pool)
        clips = tuple(
            ClipMeta(c.clip_id, i, c.duration_s, c.frame_dir, c.source_video_id, c.transcript, c.transcript_spans)
            for i, c in enumerate(pool, 1)
        )
        manifest = ClipManifest(products[video.product_id], clips, fps, root=root)
        samples.append(
            BenchSample(
                sample_id=video.video_id,
                manifest=manifest,
                gt_clip_ids=tuple(c.clip_id for c in gt),
                gt_scripts={c.clip_id: c.transcript for c in gt if c.transcript},
                distractor_ids=tuple(d.clip_id for d in distractors),
                flags=flags,
            )
        )
    return samples


# -- sample files -------------------------------------------------------------------------


def sample_to_dict(s: BenchSample) -> dict[str, Any]:
    return {
        "sample_id": s.sample_id,
        "fps": s.manifest.fps,
        "product": product_to_dict(s.manifest.product),
        "clips": [clip_to_dict(c) for c in s.manifest.clips],
        "gt_clip_ids": list(s.gt_clip_ids),
        "gt_scripts": dict(s.gt_scripts),
        "distractor_ids": list(s.distractor_ids),
        "flags": list(s.flags),
    }


def save_samples(samples: Iterable[BenchSample], path: str | Path) -> None:
    write_json_atomic(path, {"format_version": FORMAT_VERSION, "samples": [sample_to_dict(s) for s in samples]})


def load_samples(path: str | Path) -> list[BenchSample]:
    path = Path(path)
    data = json.loads(path.read_text(encoding="utf-8"))
    if data.get("format_version") != FORMAT_VERSION:
        raise ManifestError(f"{path}: unsupported format_version {data.get('format_version')!r}")
    out = []
    for i, s in enumerate(data["samples"]):
        clips = tuple(clip_from_dict(c, f"samples[{i}].clips[{j}]") for j, c in enumerate(s["clips"]))
        manifest = ClipManifest(product_from_dict(s["product"]), clips, float(s["fps"]), root=path.parent)
        out.append(
            BenchSample(
                s["sample_id"],
                manifest,
                tuple(s["gt_clip_ids"]),
                dict(s.get("gt_scripts") or {}),
                tuple(s.get("distractor_ids") or ()),
                tuple(s.get("flags") or ()),
            )
        )
    return out


# -- running -------------------------------------------------------------------------------


@dataclass(frozen=True)
class BenchConfig:
    repr: ReprConfig = field(default_factory=ReprConfig)
    ssa: SsaConfig = field(default_factory=SsaConfig)
    wcd: WcdConfig = field(default_factory=WcdConfig)
    k_from_gt: bool = False
    template: str = "compose_v1"
    judge_fps: float = 1.0
    concurrency: int = 4
    seed: int = 0

    def to_dict(self) -> dict[str, Any]:
        words = sorted(self.ssa.words.words)
        return {
            "repr": {
                "fps": self.repr.fps,
                "max_frames": self.repr.max_frames,
                "spatial_res": list(self.repr.spatial_res),
                "temporal_res": list(self.repr.temporal_res),
            },
            "ssa": {
                "max_units_per_segment": self.ssa.max_units_per_segment,
                "per_span_divisor": self.ssa.per_span_divisor,
                "weights": vars(self.ssa.weights),
                "punctuation": "".join(sorted(self.ssa.punctuation)),
                "dictionary_sha256": hashlib.sha256("\n".join(words).encode()).hexdigest(),
            },
            "wcd": {"chars_per_second": self.wcd.chars_per_second},
            "k_from_gt": self.k_from_gt,
            "template": self.template,
            "judge_fps": self.judge_fps,
            "seed": self.seed,
        }

    def config_hash(self) -> str:
        return hashlib.sha256(canonical_json(self.to_dict()).encode()).hexdigest()


def request_for(sample: BenchSample, cfg: BenchConfig) -> GenerationRequest:
    reps = build_representations(sample.manifest, cfg.repr)
    k = len(sample.gt_clip_ids) if cfg.k_from_gt else None
    request = assemble_request(sample.manifest.product, reps, k=k, template=cfg.template, seed=cfg.seed)
    if request.has_supplementary():
        raise AssertionError("benchmark requests must not carry supplementary information")
    return request


def mock_reply_table(samples: Iterable[BenchSample], cfg: BenchConfig, policy: str = "gt") -> dict[str, str]:
    """Prompt key -> reply that replays each sample's ground truth (``policy="reversed"`` flips the order).

    Feeding this to a MockBackend gives a model whose scores are known in advance.
    """
    if policy not in ("gt", "reversed"):
        raise ValueError(f"unknown mock policy {policy!r}")
    table: dict[str, str] = {}
    for s in samples:
        order = list(s.gt_clip_ids)
        if policy == "reversed":
            order.reverse()
        tuples = []
        for cid in order:
            script = s.gt_scripts.get(cid) or s.manifest.by_id(cid).transcript or "。"
            tuples.append(CreativeTuple(cid, script, tuple(auto_segment(script, cfg.ssa))))
        table[request_for(s, cfg).to_prompt().key()] = serialize_sequence(CreativeSequence(tuple(tuples)), s.manifest)
    return table


def evaluate_reply(
    sample: BenchSample,
    raw_text: str,
    cfg: BenchConfig,
    judge_backend: Backend | None = None,
) -> MetricReport:
    """Score one model reply against a sample's ground truth."""
    k = len(sample.gt_clip_ids) if cfg.k_from_gt else None
    try:
        parsed = parse_output_detailed(raw_text, sample.manifest, k)
    except ParseError as exc:
        return MetricReport(sample.sample_id, sra=0, error=f"parse:{exc.kind}: {exc}")
    seq = parsed.sequence
    mean_wcd, per_clip = sequence_wcd(seq, sample.manifest, cfg.wcd)
    scores = None
    judge_error = None
    if judge_backend is not None:
        try:
            scores = judge(seq, sample.manifest, judge_backend, cfg.judge_fps)
        except (BackendError, JudgeParseError, FileNotFoundError) as exc:
            judge_error = f"{type(exc).__name__}: {exc}"
    return MetricReport(
        sample_id=sample.sample_id,
        sra=sra(sample.gt_clip_ids, seq.clip_ids),
        wcd=mean_wcd,
        ssa=sequence_ssa(seq, cfg.ssa),
        judge=scores,
        wcd_per_clip=per_clip,
        judge_error=judge_error,
        lenient=parsed.lenient,
    )


def _run_one(sample: BenchSample, model: Backend, judge_backend: Backend | None, cfg: BenchConfig) -> MetricReport:
    request = request_for(sample, cfg)
    try:
        response = generate(request, model)
    except BackendError as exc:
        return MetricReport(sample.sample_id, sra=0, error=f"backend:{type(exc).__name__}: {exc}")
    return evaluate_reply(sample, response.raw_text, cfg, judge_backend)


@dataclass(frozen=True)
class BenchReport:
    rows: tuple[MetricReport, ...]
    aggregate: dict[str, Any]
    metadata: dict[str, Any]

    def to_dict(self) -> dict[str, Any]:
        return {
            "format_version": FORMAT_VERSION,
            "metadata": dict(self.metadata),
            "aggregate": dict(self.aggregate),
            "rows": [r.to_dict() for r in self.rows],
        }

    def digest(self) -> str:
        return hashlib.sha256(canonical_json(self.to_dict()).encode()).hexdigest()


def run_bench(
    samples: Sequence[BenchSample],
    model_backend: Backend,
    judge_backend: Backend | None = None,
    cfg: BenchConfig | None = None,
) -> BenchReport:
    """Represent, generate, parse and score every sample; per-sample failures become error rows."""
    cfg = cfg or BenchConfig()
    if not samples:
        raise BenchConfigError("no benchmark samples")
    ids = [s.sample_id for s in samples]
    if len(set(ids)) != len(ids):
        raise BenchConfigError("duplicate sample ids")
    outcomes = run_bounded(lambda s: _run_one(s, model_backend, judge_backend, cfg), samples, cfg.concurrency)
    rows = []
    for sample, outcome in zip(samples, outcomes):
        if outcome.ok:
            rows.append(outcome.value)
        else:
            err = outcome.error
            if isinstance(err, (AssertionError, ValueError)) and not isinstance(err, FileNotFoundError):
                raise err
            rows.append(MetricReport(sample.sample_id, sra=0, error=f"{type(err).__name__}: {err}"))
    rows.sort(key=lambda r: r.sample_id)
    metadata = {
        "backend_id": model_backend.backend_id,
        "judge_id": None if judge_backend is None else judge_backend.backend_id,
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
    }
    return BenchReport(tuple(rows), aggregate(rows), metadata)


def write_report(report: BenchReport, path: str | Path) -> None:
    write_json_atomic(path, report.to_dict())


def load_report(path: str | Path) -> BenchReport:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if data.get("format_version") != FORMAT_VERSION:
        raise ManifestError(f"{path}: unsupported report format_version {data.get('format_version')!r}")
    rows = tuple(MetricReport.from_dict(r) for r in data["rows"])
    recomputed = aggregate(rows)
    if canonical_json(recomputed) != canonical_json(data["aggregate"]):
        raise ValueError(f"{path}: aggregate row does not match the per-sample rows")
    return BenchReport(rows, recomputed, dict(data["metadata"]))


def render_summary(report: BenchReport) -> str:
    agg = report.aggregate

    def fmt(v: Any) -> str:
        return "-" if v is None else f"{v:.4f}"

    cols = ("sra", "vsc", "fact", "coh", "logic", "wcd", "ssa")
    header = "| Backend | " + " | ".join(c.upper() if c in ("sra", "wcd", "ssa", "vsc") else c.capitalize() for c in cols) + " |"
    line = "|" + "---|" * (len(cols) + 1)
    row = f"| {report.metadata.get('backend_id', '?')} | " + " | ".join(fmt(agg[c]) for c in cols) + " |"
    notes = (
        f"samples={agg['samples']} errors={agg['errors']} judged={agg['judged']} "
        f"unjudged={agg['unjudged']} judge_errors={agg['judge_errors']}"
    )
    return "\n".join([header, line, row, "", notes, f"config_hash={report.metadata.get('config_hash')}"])
