import json
import random

import numpy as np
import pytest

from adcut.dataset_tasks import (
    ClipSpan,
    FilterCriteria,
    SourceVideo,
    augment_tasks,
    build_tasks,
    distinct_permutations,
    feature_distance,
    filter_videos,
    load_catalog,
    luminance_histogram,
    sample_distractors,
    save_catalog,
    segment_by_asr,
    segment_by_visual,
    split_dataset,
    with_clips,
    write_tasks,
)
from adcut.gateway import BackendRefusal, MockBackend
from adcut.manifest import ClipMeta, TranscriptSpan
from conftest import PRODUCT, make_catalog


def _video(vid="v1", pid="p1", duration=60.0, n_clips=4, scripts=None):
    clips = tuple(
        ClipMeta(f"{vid}_c{i}", i, duration / n_clips, f"frames/{vid}_c{i}", vid,
                 (scripts or ["好吃", "丝滑", "低糖", "下单"] * 3)[i - 1])
        for i in range(1, n_clips + 1)
    )
    return SourceVideo(vid, pid, duration, clips=clips)


# -- segmentation ------------------------------------------------------------------------


def test_asr_segmentation_groups_on_sentence_end():
    spans = (TranscriptSpan("A。", 0, 3), TranscriptSpan("B，", 3, 6), TranscriptSpan("C。", 6, 9))
    clips = segment_by_asr(SourceVideo("v", "p", 9, transcript_spans=spans))
    assert clips == [ClipSpan(0, 3, "A。"), ClipSpan(3, 9, "B，C。")]


def test_asr_trailing_fragment_becomes_a_clip():
    spans = (TranscriptSpan("好吃。", 0, 2), TranscriptSpan("快来买", 2, 5))
    assert segment_by_asr(SourceVideo("v", "p", 5, transcript_spans=spans))[-1] == ClipSpan(2, 5, "快来买")


def test_asr_overlapping_spans_rejected():
    spans = (TranscriptSpan("A。", 0, 3), TranscriptSpan("B。", 2, 6))
    with pytest.raises(ValueError):
        segment_by_asr(SourceVideo("v", "p", 6, transcript_spans=spans))


def _synthetic_features(cut_frame, n_frames=12, seed=0):
    """Noisy dark frames, then noisy bright frames from ``cut_frame`` on."""
    rng = np.random.default_rng(seed)
    feats = []
    for i in range(n_frames):
        base = 40 if i < cut_frame else 200
        frame = np.clip(rng.normal(base, 6, size=(9, 16, 3)), 0, 255).astype(np.uint8)
        feats.append((float(i), tuple(luminance_histogram(frame))))
    return tuple(feats)


@pytest.mark.parametrize("cut", [3, 7, 10])
def test_visual_segmentation_finds_the_hard_cut(cut):
    feats = _synthetic_features(cut, seed=cut)
    video = SourceVideo("v", "p", 12.0, frame_features=feats)
    # oracle: the single largest consecutive-frame jump
    jumps = [feature_distance(a[1], b[1]) for a, b in zip(feats, feats[1:])]
    expected = feats[int(np.argmax(jumps)) + 1][0]
    spans = segment_by_visual(video)
    assert expected == cut
    assert [s.start_s for s in spans] == [0.0, expected]
    assert spans[-1].end_s == 12.0


def test_histogram_is_normalized():
    h = luminance_histogram(np.zeros((4, 4), dtype=np.uint8))
    assert h.sum() == pytest.approx(1.0)
    assert h[0] == 1.0


def test_with_clips_assigns_ids():
    v = with_clips(SourceVideo("vid", "p", 9), [ClipSpan(0, 3, "A。"), ClipSpan(3, 9, "B。")])
    assert [c.clip_id for c in v.clips] == ["vid_c1", "vid_c2"]
    assert v.clips[1].duration_s == 6 and v.clips[1].transcript == "B。"


# -- filtering -----------------------------------------------------------------------------


def test_filter_rules():
    long_video = _video("long", duration=130)
    single = _video("single", n_clips=1)
    ok = _video("ok", duration=60, n_clips=4)
    kept, dropped = filter_videos([long_video, single, ok])
    assert kept == [ok]
    assert [(v.video_id, why) for v, why in dropped] == [("long", "duration"), ("single", "clip_count")]


def test_filter_is_idempotent():
    videos = [_video(f"v{i}", duration=30 * i, n_clips=i) for i in range(1, 10)]
    kept, _ = filter_videos(videos)
    again, dropped = filter_videos(kept)
    assert again == kept and dropped == []


def test_filter_with_judge():
    a, b = _video("a", scripts=["好吃"] * 4), _video("b", scripts=["难吃"] * 4)

    def responder(prompt):
        return "FAIL" if "难吃" in prompt.text else "PASS"

    criteria = FilterCriteria(require_fluent=True, require_relevant=True)
    kept, dropped = filter_videos([a, b], criteria, MockBackend(responder=responder), {"p1": PRODUCT})
    assert kept == [a]
    assert dropped[0][1] == "not_fluent"


def test_filter_judge_garbage_is_an_error_reason():
    kept, dropped = filter_videos([_video()], FilterCriteria(require_fluent=True), MockBackend(default="maybe"))
    assert kept == [] and dropped[0][1] == "judge_error"


# -- split ------------------------------------------------------------------------------------


def _pool(n_products, per_product):
    return [_video(f"p{p}v{v}", f"p{p}") for p in range(n_products) for v in range(per_product)]


def test_split_is_disjoint_and_holds_out_products():
    split = split_dataset(_pool(20, 3), test_products=5, seed=1)
    test_products = {v.product_id for v in split.test}
    assert len(split.test) == 5 and len(test_products) == 5
    train = split.pretrain + split.sft
    assert not test_products & {v.product_id for v in train}
    ids = [v.video_id for v in train + split.test]
    assert len(ids) == len(set(ids))


def test_split_caps_videos_per_product():
    split = split_dataset(_pool(1, 5) + _pool(2, 1)[1:], test_products=1, seed=3)
    train = split.pretrain + split.sft
    counts = {}
    for v in train:
        counts[v.product_id] = counts.get(v.product_id, 0) + 1
    assert all(c <= 2 for c in counts.values())


def test_split_ratio():
    split = split_dataset(_pool(55, 2), test_products=0)
    assert (len(split.pretrain), len(split.sft)) == (100, 10)


def test_split_is_seeded():
    pool = _pool(10, 3)
    assert split_dataset(pool, 3, seed=5) == split_dataset(list(reversed(pool)), 3, seed=5)


def test_split_too_many_test_products():
    with pytest.raises(ValueError):
        split_dataset(_pool(2, 1), test_products=3)


# -- tasks -------------------------------------------------------------------------------------


def test_build_tasks_counts_and_distinct_permutations(tmp_path):
    catalog = make_catalog(tmp_path)
    video = catalog.videos[0]
    distractors = sample_distractors(video, catalog.videos, 2, random.Random(0))
    assert all(d.source_video_id != video.video_id for d in distractors)
    tasks = build_tasks(video, catalog.products[video.product_id], distractors, rng_seed=4)
    kinds = [t.kind for t in tasks]
    assert kinds.count("remix") == 4 and kinds.count("compound") == 4
    assert kinds.count("script_prediction") == 1 and kinds.count("script_segmentation") == 1
    remix_orders = [tuple(t.input["clips"]) for t in tasks if t.kind == "remix"]
    assert len(set(remix_orders)) == 4
    assert all(len(o) == 6 for o in remix_orders)
    gt = [c.clip_id for c in video.clips]
    assert all(t.target == {"order": gt} for t in tasks if t.kind == "remix")


def test_build_tasks_deterministic(tmp_path):
    catalog = make_catalog(tmp_path)
    v = catalog.videos[0]
    p = catalog.products[v.product_id]
    assert build_tasks(v, p, rng_seed=9) == build_tasks(v, p, rng_seed=9)
    assert build_tasks(v, p, rng_seed=9) != build_tasks(v, p, rng_seed=10)


def test_single_clip_flags_degenerate_permutations():
    video = _video(n_clips=1)
    tasks = build_tasks(video, PRODUCT)
    remix = [t for t in tasks if t.kind == "remix"]
    assert len(remix) == 1
    assert "degenerate_permutations" in remix[0].flags


def test_distinct_permutations_when_few_exist():
    perms = distinct_permutations(["a", "b", "c"], 10, random.Random(0))
    assert sorted(perms) == sorted(set(perms)) and len(perms) == 6


def test_build_tasks_requires_scripts():
    with pytest.raises(ValueError, match="without scripts"):
        build_tasks(_video(scripts=["好", "", "行", "棒"]), PRODUCT)


def test_augment_tasks_adds_supplementary():
    tasks = build_tasks(_video(), PRODUCT)
    rewriter = MockBackend(responder=lambda p: "改写：" + p.text.strip().rsplit("\n", 1)[-1])
    out = augment_tasks(tasks, rewriter)
    compound = [t for t in out if t.kind == "compound"]
    gt = {rec["clip"] for rec in compound[0].target["sequence"]}
    assert all(set(t.input["supplementary"]) == gt for t in compound)
    assert compound[0].input["supplementary"]["v1_c2"] == "改写：丝滑"
    assert all("supplementary" not in t.input for t in out if t.kind != "compound")


def test_augment_failure_flags_instead_of_dropping():
    tasks = build_tasks(_video(), PRODUCT)

    class Failing(MockBackend):
        def complete(self, prompt):
            raise BackendRefusal("policy", status=400)

    out = augment_tasks(tasks, Failing())
    assert len(out) == len(tasks)
    flagged = [t for t in out if t.kind == "compound"]
    assert all(any(f.startswith("supplementary_failed") for f in t.flags) for t in flagged)


def test_write_tasks_one_file_per_kind(tmp_path):
    paths = write_tasks(build_tasks(_video(), PRODUCT), tmp_path)
    assert set(paths) == {"remix", "script_prediction", "script_segmentation", "compound"}
    data = json.loads(paths["remix"].read_text(encoding="utf-8"))
    assert len(data["tasks"]) == 4


def test_catalog_round_trip(tmp_path):
    catalog = make_catalog(tmp_path, n_products=1, videos_per_product=2)
    loaded = load_catalog(tmp_path / "catalog.json")
    assert loaded == catalog
    save_catalog(loaded, tmp_path / "sub.json", loaded.videos[:1])
    assert len(load_catalog(tmp_path / "sub.json").videos) == 1
