"""Benchmark metrics: SRA, WCD and SSA computed locally; VSC/Fact/Coh/Logic from a judge model."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Any, Iterable, Mapping, Sequence

from .clip_repr import temporal_frame_times
from .gateway import Backend, ChatPrompt, ImagePart, TextPart, product_block, render_template
from .manifest import ClipManifest, CreativeSequence, find_frame
from .subtitle_seg import SsaConfig, is_cjk, validate_segments

JUDGE_FIELDS = ("VSC", "Fact", "Coh", "Logic")


class JudgeParseError(ValueError):
    pass


class JudgeRangeError(JudgeParseError):
    pass


def sra(ground_truth: Sequence[Any], predicted: Sequence[Any]) -> int:
    """1 iff the predicted clip sequence reproduces the ground truth exactly, position by position."""
    if len(ground_truth) != len(predicted):
        return 0
    return int(all(g == s for g, s in zip(ground_truth, predicted)))


def word_count(script: str) -> int:
    """CJK characters count one each; each run of letters/digits counts one; the rest is free."""
    count = 0
    in_run = False
    for ch in script:
        if is_cjk(ch):
            count += 1
            in_run = False
        elif ch.isalnum():
            if not in_run:
                count += 1
            in_run = True
        else:
            in_run = False
    return count


@dataclass(frozen=True)
class WcdConfig:
    chars_per_second: float = 4.5

    def __post_init__(self) -> None:
        if not self.chars_per_second > 0:
            raise ValueError("chars_per_second must be > 0")


def target_word_count(duration_s: float, cfg: WcdConfig | None = None) -> int:
    cfg = cfg or WcdConfig()
    exact = Decimal(repr(duration_s)) * Decimal(repr(cfg.chars_per_second))
    return int(exact.quantize(Decimal(1), rounding=ROUND_HALF_UP))


def wcd(script: str, clip_duration_s: float, cfg: WcdConfig | None = None) -> float:
    if not clip_duration_s > 0:
        raise ValueError("clip duration must be > 0")
    return float(abs(word_count(script) - target_word_count(clip_duration_s, cfg)))


def sequence_wcd(seq: CreativeSequence, manifest: ClipManifest, cfg: WcdConfig | None = None) -> tuple[float, dict[str, float]]:
    """Mean per-clip WCD over the selected clips, plus the per-clip breakdown."""
    per_clip = {t.clip_id: wcd(t.script, manifest.by_id(t.clip_id).duration_s, cfg) for t in seq.tuples}
    mean = sum(per_clip.values()) / len(per_clip) if per_clip else 0.0
    return mean, per_clip


def sequence_ssa(seq: CreativeSequence, cfg: SsaConfig | None = None) -> int:
    """A sample passes only if every clip's subtitle segmentation passes."""
    return int(all(validate_segments(t.script, t.subtitles, cfg).passed for t in seq.tuples))


# -- judge -----------------------------------------------------------------------------


@dataclass(frozen=True)
class JudgeScores:
    vsc: int
    fact: int
    coh: int
    logic: int
    raw_reply: str = field(default="", compare=False, repr=False)

    def as_dict(self) -> dict[str, int]:
        return {"vsc": self.vsc, "fact": self.fact, "coh": self.coh, "logic": self.logic}


_PAIR_RE = re.compile(r"([A-Za-z]+)\s*:\s*([^\s,;]*)")
_SEP_RE = re.compile(r"[\s,;]*")


def parse_judge_reply(reply: str) -> JudgeScores:
    """Strict grammar: ``VSC:<n> Fact:<n> Coh:<n> Logic:<n>``, separators of spaces, commas or semicolons.

    Each field exactly once, in any order, integer 0..2. Nothing else may appear.
    """
    text = reply.strip()
    values: dict[str, int] = {}
    pos = 0
    while pos < len(text):
        m = _PAIR_RE.match(text, pos)
        if not m:
            raise JudgeParseError(f"unexpected text at position {pos}: {text[pos:pos + 20]!r}")
        name, raw = m.group(1), m.group(2)
        if name not in JUDGE_FIELDS:
            raise JudgeParseError(f"unknown field {name!r}")
        if name in values:
            raise JudgeParseError(f"field {name} given twice")
        if not re.fullmatch(r"[+-]?\d+", raw):
            raise JudgeParseError(f"field {name}: {raw!r} is not an integer score")
        score = int(raw)
        if not 0 <= score <= 2:
            raise JudgeRangeError(f"field {name}: score {score} outside 0..2")
        values[name] = score
        pos = _SEP_RE.match(text, m.end()).end()
    for name in JUDGE_FIELDS:
        if name not in values:
            raise JudgeParseError(f"missing field {name}")
    return JudgeScores(values["VSC"], values["Fact"], values["Coh"], values["Logic"], raw_reply=reply)


def judge_prompt(seq: CreativeSequence, manifest: ClipManifest, fps: float = 1.0, template: str = "judge_v1") -> ChatPrompt:
    """Every frame at ``fps`` for each selected clip, with no cap, then its script and subtitles."""
    parts: list[Any] = [TextPart(product_block(manifest.product))]
    for n, t in enumerate(seq.tuples, 1):
        clip = manifest.by_id(t.clip_id)
        frame_dir = manifest.frame_root(clip)
        parts.append(TextPart(f"Part {n} frames:"))
        for time_s in temporal_frame_times(clip.duration_s, fps, 10**9):
            path = find_frame(frame_dir, round(time_s * manifest.fps))
            if path is None:
                raise FileNotFoundError(f"clip {clip.clip_id}: no frame for t={time_s:g}s")
            parts.append(ImagePart(str(path), (560, 315), time_s, clip.clip_id))
        parts.append(TextPart(f"Part {n} script: {t.script}"))
        parts.append(TextPart(f"Part {n} subtitles: " + " / ".join(t.subtitles)))
    parts.append(TextPart(render_template(template)))
    return ChatPrompt(tuple(parts))


def judge(seq: CreativeSequence, manifest: ClipManifest, backend: Backend, fps: float = 1.0) -> JudgeScores:
    reply = backend.complete(judge_prompt(seq, manifest, fps)).raw_text
    return parse_judge_reply(reply)


# -- reports -----------------------------------------------------------------------------


@dataclass(frozen=True)
class MetricReport:
    sample_id: str
    sra: int
    wcd: float | None = None
    ssa: int | None = None
    judge: JudgeScores | None = None
    wcd_per_clip: dict[str, float] = field(default_factory=dict)
    error: str | None = None
    judge_error: str | None = None
    lenient: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {
            "sample_id": self.sample_id,
            "sra": self.sra,
            "wcd": self.wcd,
            "ssa": self.ssa,
            "judge": None if self.judge is None else self.judge.as_dict(),
            "wcd_per_clip": dict(self.wcd_per_clip),
            "error": self.error,
            "judge_error": self.judge_error,
            "lenient": self.lenient,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> MetricReport:
        j = data.get("judge")
        return cls(
            sample_id=data["sample_id"],
            sra=int(data["sra"]),
            wcd=data.get("wcd"),
            ssa=data.get("ssa"),
            judge=None if j is None else JudgeScores(j["vsc"], j["fact"], j["coh"], j["logic"]),
            wcd_per_clip=dict(data.get("wcd_per_clip") or {}),
            error=data.get("error"),
            judge_error=data.get("judge_error"),
            lenient=bool(data.get("lenient", False)),
        )


def _mean(values: list[float]) -> float | None:
    return math.fsum(values) / len(values) if values else None


def aggregate(reports: Iterable[MetricReport]) -> dict[str, Any]:
    """Column means over samples.

    SRA covers every sample (a parse failure scores 0). WCD and SSA cover
    samples that parsed; judge means cover samples with judge scores.
    """
    rows = list(reports)
    if not rows:
        raise ValueError("cannot aggregate zero reports")
    scored = [r for r in rows if r.error is None]
    judged = [r for r in scored if r.judge is not None]
    out: dict[str, Any] = {
        "samples": len(rows),
        "errors": len(rows) - len(scored),
        "judged": len(judged),
        "unjudged": len(scored) - len(judged),
        "judge_errors": sum(1 for r in scored if r.judge_error is not None),
        "sra": _mean([r.sra for r in rows]),
        "wcd": _mean([r.wcd for r in scored if r.wcd is not None]),
        "ssa": _mean([r.ssa for r in scored if r.ssa is not None]),
    }
    for name in ("vsc", "fact", "coh", "logic"):
        out[name] = _mean([getattr(r.judge, name) for r in judged])
    return out
