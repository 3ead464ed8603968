"""Command-line entry point: ``adcut <subcommand> [flags]``.

Configuration is layered: built-in defaults, then ``--config FILE`` (JSON),
then explicit flags. The effective configuration and its hash are echoed to
stderr and written next to every output. Data goes to files under ``--out``;
logs and errors go to stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import random
import sys
from pathlib import Path
from typing import Any, Sequence

from . import bench as bench_mod
from .clip_repr import ReprConfig, ResizeCache, build_representations
from .dataset_tasks import (
    DEFAULT_VISUAL_THRESHOLD,
    FilterCriteria,
    augment_tasks,
    build_tasks,
    filter_videos,
    load_catalog,
    sample_distractors,
    save_catalog,
    segment_by_asr,
    segment_by_visual,
    split_dataset,
    with_clips,
    write_tasks,
)
from .gateway import (
    AuditLog,
    Backend,
    MockBackend,
    RemoteBackend,
    ReplayCache,
    assemble_request,
    canonical_json,
    generate,
)
from .manifest import load_manifest, save_manifest, write_json_atomic
from .metrics import WcdConfig
from .protocol import parse_output_detailed, save_protocol, serialize_sequence, to_edit_protocol
from .subtitle_seg import SsaConfig, UnitWeights, auto_segment, load_dictionary, validate_segments

log = logging.getLogger("adcut")

DEFAULTS: dict[str, Any] = {
    "out": "out",
    "seed": 0,
    "log_level": "INFO",
    "concurrency": 4,
    "backend": "mock",
    "judge": "off",
    "model": "gpt-4o",
    "judge_model": "gpt-4o",
    "api_base": None,
    "timeout_s": 120.0,
    "max_attempts": 3,
    "backoff_s": 1.0,
    "cache_dir": None,
    "audit_dir": None,
    "mock_responses": None,
    "mock_policy": "gt",
    "judge_responses": None,
    "fps": 1.0,
    "max_frames": 5,
    "spatial_res": "996x560",
    "temporal_res": "560x315",
    "dictionary": None,
    "max_units": 13.0,
    "span_divisor": 10.0,
    "chars_per_second": 4.5,
    "k": None,
    "distractors": 2,
    "repetitions": 4,
    "test_products": 1,
    "max_per_product": 2,
    "pretrain_fraction": 10 / 11,
    "threshold": DEFAULT_VISUAL_THRESHOLD,
    "mode": "asr",
    "require_fluent": False,
    "require_relevant": False,
}


class CliError(Exception):
    pass


def parse_res(text: str) -> tuple[int, int]:
    try:
        h, w = (int(x) for x in str(text).lower().split("x"))
    except ValueError:
        raise CliError(f"resolution must look like HEIGHTxWIDTH, got {text!r}") from None
    return h, w


# -- argument parsing ----------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    # default=None everywhere so we can tell which flags were given explicitly
    p.add_argument("--config", help="JSON file of option overrides")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--log-level", default=None)
    p.add_argument("--concurrency", type=int, default=None)


def _backend_flags(p: argparse.ArgumentParser, judge: bool = False) -> None:
    p.add_argument("--backend", choices=("remote", "mock", "replay"), default=None)
    p.add_argument("--model", default=None)
    p.add_argument("--api-base", default=None)
    p.add_argument("--timeout-s", type=float, default=None)
    p.add_argument("--max-attempts", type=int, default=None)
    p.add_argument("--cache-dir", default=None)
    p.add_argument("--audit-dir", default=None)
    p.add_argument("--mock-responses", default=None, help="JSON {prompt_key: reply} plus optional 'default'")
    p.add_argument("--mock-policy", choices=("gt", "reversed"), default=None)
    if judge:
        p.add_argument("--judge", choices=("remote", "mock", "off"), default=None)
        p.add_argument("--judge-model", default=None)
        p.add_argument("--judge-responses", default=None)


def _repr_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--fps", type=float, default=None)
    p.add_argument("--max-frames", type=int, default=None)
    p.add_argument("--spatial-res", default=None)
    p.add_argument("--temporal-res", default=None)


def _metric_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dictionary", default=None, help="word list, one word per line")
    p.add_argument("--max-units", type=float, default=None)
    p.add_argument("--span-divisor", type=float, default=None)
    p.add_argument("--chars-per-second", type=float, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adcut", description="Advertisement video composition and evaluation")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("ingest", help="validate a manifest and write its normalized form")
    _common(p)
    p.add_argument("--manifest", required=True)

    p = sub.add_parser("segment", help="cut catalog videos into clips (ASR or visual)")
    _common(p)
    p.add_argument("--catalog", required=True)
    p.add_argument("--mode", choices=("asr", "visual"), default=None)
    p.add_argument("--threshold", type=float, default=None)

    p = sub.add_parser("filter", help="apply duration / clip-count / script-quality criteria")
    _common(p)
    _backend_flags(p, judge=True)
    p.add_argument("--catalog", required=True)
    p.add_argument("--require-fluent", action="store_true", default=None)
    p.add_argument("--require-relevant", action="store_true", default=None)

    p = sub.add_parser("split", help="split a catalog into pretrain / sft / test")
    _common(p)
    p.add_argument("--catalog", required=True)
    p.add_argument("--test-products", type=int, default=None)
    p.add_argument("--max-per-product", type=int, default=None)
    p.add_argument("--pretrain-fraction", type=float, default=None)

    p = sub.add_parser("tasks", help="build remix / script / segmentation / compound training tasks")
    _common(p)
    _backend_flags(p)
    p.add_argument("--catalog", required=True)
    p.add_argument("--repetitions", type=int, default=None)
    p.add_argument("--distractors", type=int, default=None)
    p.add_argument("--augment", action="store_true", help="attach rewritten scripts via --backend")

    p = sub.add_parser("represent", help="build clip representations and resized frames")
    _common(p)
    _repr_flags(p)
    p.add_argument("--manifest", required=True)

    p = sub.add_parser("generate", help="send one composition request to a backend")
    _common(p)
    _repr_flags(p)
    _backend_flags(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--k", type=int, default=None)

    p = sub.add_parser("parse", help="parse a model reply into a creative sequence")
    _common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--response", required=True, help="reply text file or generate's response.json")
    p.add_argument("--k", type=int, default=None)

    p = sub.add_parser("render-protocol", help="turn a creative sequence into an edit protocol")
    _common(p)
    _metric_flags(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--sequence", required=True)

    p = sub.add_parser("ssa", help="check a subtitle segmentation (or propose one)")
    _common(p)
    _metric_flags(p)
    p.add_argument("--script", required=True)
    p.add_argument("--segments", help="JSON list of segments, or segments joined by ' / '")

    p = sub.add_parser("evaluate", help="score saved predictions against benchmark samples")
    _common(p)
    _backend_flags(p, judge=True)
    _metric_flags(p)
    p.add_argument("--predictions", required=True, help="JSON {sample_id: reply text}")
    p.add_argument("--ground-truth", required=True, help="benchmark samples file")
    p.add_argument("--k", choices=("from-gt", "unset"), default=None)

    p = sub.add_parser("bench", help="build the benchmark and run a model over it")
    _common(p)
    _repr_flags(p)
    _backend_flags(p, judge=True)
    _metric_flags(p)
    p.add_argument("--test-set", required=True, help="catalog (or benchmark samples file) to evaluate")
    p.add_argument("--catalog", help="catalog to draw distractors from (default: the test set)")
    p.add_argument("--distractors", type=int, default=None)
    p.add_argument("--k", choices=("from-gt", "unset"), default=None)

    p = sub.add_parser("report", help="render a saved report as a summary table")
    _common(p)
    p.add_argument("--report", required=True)
    return parser


# -- configuration -----------------------------------------------------------------------


def effective_config(args: argparse.Namespace) -> dict[str, Any]:
    cfg = dict(DEFAULTS)
    if getattr(args, "config", None):
        path = Path(args.config)
        try:
            file_cfg = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read config {path}: {exc}") from None
        unknown = set(file_cfg) - set(DEFAULTS)
        if unknown:
            raise CliError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(file_cfg)
    for key, value in vars(args).items():
        if key in DEFAULTS and value is not None:
            cfg[key] = value
    cfg["command"] = args.command
    return cfg


def config_hash(cfg: dict[str, Any]) -> str:
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()


def ssa_config(cfg: dict[str, Any]) -> SsaConfig:
    dictionary = load_dictionary(cfg["dictionary"]) if cfg["dictionary"] else None
    return SsaConfig(
        max_units_per_segment=float(cfg["max_units"]),
        per_span_divisor=float(cfg["span_divisor"]),
        weights=UnitWeights(),
        dictionary=dictionary,
    )


def repr_config(cfg: dict[str, Any]) -> ReprConfig:
    return ReprConfig(
        fps=float(cfg["fps"]),
        max_frames=int(cfg["max_frames"]),
        spatial_res=parse_res(cfg["spatial_res"]),
        temporal_res=parse_res(cfg["temporal_res"]),
    )


def bench_config(cfg: dict[str, Any]) -> bench_mod.BenchConfig:
    return bench_mod.BenchConfig(
        repr=repr_config(cfg),
        ssa=ssa_config(cfg),
        wcd=WcdConfig(float(cfg["chars_per_second"])),
        k_from_gt=cfg.get("k") == "from-gt",
        concurrency=int(cfg["concurrency"]),
        seed=int(cfg["seed"]),
    )


def _load_json(path: str) -> Any:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read {path}: {exc}") from None


def make_backend(cfg: dict[str, Any], kind: str, *, model_key: str = "model", responses_key: str = "mock_responses",
                 default_reply: str | None = None, responder=None) -> Backend:
    backend: Backend
    if kind == "mock":
        responses, default = {}, default_reply
        if cfg.get(responses_key):
            data = _load_json(cfg[responses_key])
            default = data.pop("default", default)
            responses = data.get("responses", data)
        backend = MockBackend(responses, responder=responder, default=default)
    elif kind == "remote":
        backend = RemoteBackend(
            model=cfg[model_key],
            base_url=cfg["api_base"],
            timeout_s=float(cfg["timeout_s"]),
            max_attempts=int(cfg["max_attempts"]),
            backoff_s=float(cfg["backoff_s"]),
            image_cache=ResizeCache(Path(cfg["out"]) / "frame_cache"),
        )
        if cfg["cache_dir"]:
            backend = ReplayCache(cfg["cache_dir"], backend)
    elif kind == "replay":
        if not cfg["cache_dir"]:
            raise CliError("--backend replay needs --cache-dir")
        backend = ReplayCache(cfg["cache_dir"])
    else:
        raise CliError(f"unknown backend {kind!r}")
    if cfg["audit_dir"]:
        backend = AuditLog(backend, cfg["audit_dir"])
    return backend


# -- subcommands -------------------------------------------------------------------------------


def cmd_ingest(args, cfg, out: Path) -> dict[str, Any]:
    manifest = load_manifest(args.manifest)
    save_manifest(manifest, out / "manifest.json")
    return {"clips": len(manifest.clips), "product_id": manifest.product.product_id}


def cmd_segment(args, cfg, out: Path) -> dict[str, Any]:
    catalog = load_catalog(args.catalog)
    videos = []
    for v in catalog.videos:
        spans = segment_by_asr(v) if cfg["mode"] == "asr" else segment_by_visual(v, float(cfg["threshold"]))
        videos.append(with_clips(v, spans))
    save_catalog(catalog, out / "catalog.json", videos)
    return {"videos": len(videos), "clips": sum(len(v.clips) for v in videos)}


def cmd_filter(args, cfg, out: Path) -> dict[str, Any]:
    catalog = load_catalog(args.catalog)
    criteria = FilterCriteria(require_fluent=bool(cfg["require_fluent"]), require_relevant=bool(cfg["require_relevant"]))
    judge = None
    if cfg["judge"] != "off":
        judge = make_backend(cfg, cfg["judge"], model_key="judge_model", responses_key="judge_responses", default_reply="PASS")
    kept, dropped = filter_videos(catalog.videos, criteria, judge, catalog.products)
    save_catalog(catalog, out / "catalog.json", kept)
    write_json_atomic(out / "dropped.json", [{"video_id": v.video_id, "reason": r} for v, r in dropped])
    return {"kept": len(kept), "dropped": len(dropped)}


def cmd_split(args, cfg, out: Path) -> dict[str, Any]:
    catalog = load_catalog(args.catalog)
    split = split_dataset(
        catalog.videos,
        int(cfg["test_products"]),
        int(cfg["max_per_product"]),
        float(cfg["pretrain_fraction"]),
        int(cfg["seed"]),
    )
    for name in ("pretrain", "sft", "test"):
        save_catalog(catalog, out / f"{name}.json", getattr(split, name))
    return {name: len(getattr(split, name)) for name in ("pretrain", "sft", "test")}


def cmd_tasks(args, cfg, out: Path) -> dict[str, Any]:
    catalog = load_catalog(args.catalog)
    tasks = []
    for v in sorted(catalog.videos, key=lambda v: v.video_id):
        rng = random.Random(f"{cfg['seed']}:{v.video_id}")
        distractors = sample_distractors(v, catalog.videos, int(cfg["distractors"]), rng)
        tasks.extend(build_tasks(v, catalog.products[v.product_id], distractors, int(cfg["repetitions"]), rng.randrange(2**32)))
    if args.augment:
        tasks = augment_tasks(tasks, make_backend(cfg, cfg["backend"]))
    paths = write_tasks(tasks, out)
    return {kind: str(p) for kind, p in paths.items()} | {"tasks": len(tasks)}


def cmd_represent(args, cfg, out: Path) -> dict[str, Any]:
    manifest = load_manifest(args.manifest)
    rcfg = repr_config(cfg)
    reps = build_representations(manifest, rcfg)
    cache = ResizeCache(out / "frames")
    listing = []
    for index, rep in reps:
        paths = cache.materialize(rep)
        listing.append(
            {
                "index": index,
                "clip_id": rep.clip_id,
                "spatial": {"time_s": rep.spatial.time_s, "source": rep.spatial.path, "resized": str(paths[0])},
                "temporal": [
                    {"time_s": r.time_s, "source": r.path, "resized": str(p)} for r, p in zip(rep.temporal, paths[1:])
                ],
            }
        )
    write_json_atomic(out / "representations.json", listing)
    return {"clips": len(listing)}


def cmd_generate(args, cfg, out: Path) -> dict[str, Any]:
    manifest = load_manifest(args.manifest)
    reps = build_representations(manifest, repr_config(cfg))
    request = assemble_request(manifest.product, reps, k=cfg["k"], seed=int(cfg["seed"]))
    backend = make_backend(cfg, cfg["backend"])
    response = generate(request, backend)
    write_json_atomic(out / "request.json", json.loads(request.serialize()))
    write_json_atomic(out / "response.json", response.to_dict())
    return {"backend_id": response.backend_id, "chars": len(response.raw_text)}


def cmd_parse(args, cfg, out: Path) -> dict[str, Any]:
    manifest = load_manifest(args.manifest)
    path = Path(args.response)
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".json":
        try:
            data = json.loads(text)
            if isinstance(data, dict) and "raw_text" in data:
                text = data["raw_text"]
        except json.JSONDecodeError:
            pass
    parsed = parse_output_detailed(text, manifest, cfg["k"])
    (out / "sequence.json").parent.mkdir(parents=True, exist_ok=True)
    (out / "sequence.json").write_text(serialize_sequence(parsed.sequence, manifest) + "\n", encoding="utf-8")
    return {"clips": list(parsed.sequence.clip_ids), "lenient": parsed.lenient}


def cmd_render_protocol(args, cfg, out: Path) -> dict[str, Any]:
    manifest = load_manifest(args.manifest)
    text = Path(args.sequence).read_text(encoding="utf-8")
    seq = parse_output_detailed(text, manifest).sequence
    protocol = to_edit_protocol(seq, manifest, ssa_config(cfg).weights)
    save_protocol(protocol, out / "protocol.json")
    return {"entries": len(protocol.entries), "total_duration_s": protocol.total_duration_s}


def cmd_ssa(args, cfg, out: Path) -> dict[str, Any]:
    scfg = ssa_config(cfg)
    if args.segments is None:
        segments = auto_segment(args.script, scfg)
    else:
        try:
            segments = json.loads(args.segments)
        except json.JSONDecodeError:
            segments = args.segments.split(" / ")
    verdict = validate_segments(args.script, segments, scfg)
    return {
        "exit_code": 0 if verdict.passed else 1,
        "pass": verdict.passed,
        "ssa": verdict.value,
        "segments": segments,
        "violations": [{"rule": v.rule, "location": list(v.location)} for v in verdict.violations],
    }


def _judge_backend(cfg: dict[str, Any]) -> Backend | None:
    if cfg["judge"] == "off":
        return None
    return make_backend(
        cfg, cfg["judge"], model_key="judge_model", responses_key="judge_responses",
        default_reply="VSC:2 Fact:2 Coh:2 Logic:2",
    )


def _finish_report(report: bench_mod.BenchReport, out: Path) -> dict[str, Any]:
    bench_mod.write_report(report, out / "report.json")
    summary = bench_mod.render_summary(report)
    (out / "summary.md").write_text(summary + "\n", encoding="utf-8")
    print(summary, file=sys.stderr)
    return {"report": str(out / "report.json"), "report_sha256": report.digest(), "aggregate": report.aggregate}


def cmd_evaluate(args, cfg, out: Path) -> dict[str, Any]:
    samples = bench_mod.load_samples(args.ground_truth)
    predictions = _load_json(args.predictions)
    bcfg = bench_config(cfg)
    judge = _judge_backend(cfg)
    rows = []
    for s in sorted(samples, key=lambda s: s.sample_id):
        if s.sample_id not in predictions:
            rows.append(bench_mod.MetricReport(s.sample_id, sra=0, error="missing prediction"))
            continue
        rows.append(bench_mod.evaluate_reply(s, predictions[s.sample_id], bcfg, judge))
    metadata = {"backend_id": "predictions", "judge_id": None if judge is None else judge.backend_id,
                "config_hash": bcfg.config_hash(), "seed": bcfg.seed}
    report = bench_mod.BenchReport(tuple(rows), bench_mod.aggregate(rows), metadata)
    return _finish_report(report, out)


def cmd_bench(args, cfg, out: Path) -> dict[str, Any]:
    bcfg = bench_config(cfg)
    data = _load_json(args.test_set)
    if "samples" in data:
        samples = bench_mod.load_samples(args.test_set)
    else:
        test = load_catalog(args.test_set)
        pool = load_catalog(args.catalog) if args.catalog else test
        samples = bench_mod.build_bench(
            test.videos, pool.videos, {**pool.products, **test.products},
            int(cfg["distractors"]), int(cfg["seed"]), float(cfg["fps"]), root=test.root,
        )
    bench_mod.save_samples(samples, out / "samples.json")
    responder_table = None
    if cfg["backend"] == "mock" and not cfg["mock_responses"]:
        responder_table = bench_mod.mock_reply_table(samples, bcfg, cfg["mock_policy"])
    model = make_backend(cfg, cfg["backend"])
    if responder_table is not None and isinstance(model, MockBackend):
        model.responses = responder_table
    report = bench_mod.run_bench(samples, model, _judge_backend(cfg), bcfg)
    return _finish_report(report, out)


def cmd_report(args, cfg, out: Path) -> dict[str, Any]:
    report = bench_mod.load_report(args.report)
    summary = bench_mod.render_summary(report)
    print(summary)
    return {"aggregate": report.aggregate}


COMMANDS = {
    "ingest": cmd_ingest,
    "segment": cmd_segment,
    "filter": cmd_filter,
    "split": cmd_split,
    "tasks": cmd_tasks,
    "represent": cmd_represent,
    "generate": cmd_generate,
    "parse": cmd_parse,
    "render-protocol": cmd_render_protocol,
    "ssa": cmd_ssa,
    "evaluate": cmd_evaluate,
    "bench": cmd_bench,
    "report": cmd_report,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = effective_config(args)
        logging.basicConfig(level=str(cfg["log_level"]).upper(), stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
        digest = config_hash(cfg)
        print(json.dumps({"effective_config": cfg, "config_hash": digest}, ensure_ascii=False), file=sys.stderr)
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        write_json_atomic(out / "effective_config.json", {"config": cfg, "config_hash": digest})
        result = COMMANDS[args.command](args, cfg, out)
    except Exception as exc:  # reported as a machine-readable error line
        log.debug("command failed", exc_info=True)
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}, ensure_ascii=False), file=sys.stderr)
        return 2 if isinstance(exc, CliError) else 1
    code = int(result.pop("exit_code", 0))
    print(json.dumps({"ok": code == 0, "command": args.command, "config_hash": digest, **result},
                     ensure_ascii=False, default=str))
    return code


if __name__ == "__main__":
    sys.exit(main())
