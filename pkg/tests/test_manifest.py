import json
import shutil

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adcut.manifest import (
    ClipManifest,
    ClipMeta,
    CreativeSequence,
    CreativeTuple,
    ManifestError,
    ProductInfo,
    TranscriptSpan,
    load_manifest,
    manifest_from_dict,
    manifest_to_dict,
    save_manifest,
)
from conftest import PRODUCT, make_manifest


def test_load_six_clips(six_clip_manifest, tmp_path):
    m = load_manifest(tmp_path / "manifest.json")
    assert len(m.clips) == 6
    assert sorted(c.index for c in m.clips) == list(range(1, 7))
    assert m == six_clip_manifest


def test_duplicate_index_rejected(six_clip_manifest, tmp_path):
    data = json.loads((tmp_path / "manifest.json").read_text())
    data["clips"][3]["index"] = 3
    (tmp_path / "manifest.json").write_text(json.dumps(data))
    with pytest.raises(ManifestError, match="duplicate clip index 3"):
        load_manifest(tmp_path / "manifest.json")


def test_missing_frame_names_the_clip(six_clip_manifest, tmp_path):
    (tmp_path / "frames" / "v1_c2" / "000.jpg").unlink()
    with pytest.raises(ManifestError, match=r"clip 2 .*missing frame 000"):
        load_manifest(tmp_path / "manifest.json")


def test_missing_last_frame_detected(six_clip_manifest, tmp_path):
    # 4.5 s at 1 fps needs frames 0..4
    (tmp_path / "frames" / "v1_c3" / "004.jpg").unlink()
    with pytest.raises(ManifestError, match="clip 3"):
        load_manifest(tmp_path / "manifest.json")


def test_missing_file():
    with pytest.raises(ManifestError, match="not found"):
        load_manifest("/nonexistent/manifest.json")


@pytest.mark.parametrize(
    "mutate, message",
    [
        (lambda d: d["clips"][0].pop("duration_s"), r"clips\[0\]: missing field 'duration_s'"),
        (lambda d: d["clips"][1].__setitem__("duration_s", "6"), r"clips\[1\]\.duration_s"),
        (lambda d: d["clips"][0].__setitem__("duration_s", 0), "duration_s must be > 0"),
        (lambda d: d["product"].__setitem__("name", ""), "name must be non-empty"),
        (lambda d: d.__setitem__("format_version", 99), "format_version"),
        (lambda d: d["clips"][5].__setitem__("clip_id", "v1_c1"), "duplicate clip_id"),
        (lambda d: d["clips"][5].__setitem__("index", 9), "contiguous"),
    ],
)
def test_schema_violations_name_the_field(six_clip_manifest, tmp_path, mutate, message):
    data = json.loads((tmp_path / "manifest.json").read_text())
    mutate(data)
    (tmp_path / "manifest.json").write_text(json.dumps(data))
    with pytest.raises(ManifestError, match=message):
        load_manifest(tmp_path / "manifest.json")


def test_overlapping_transcript_spans_rejected():
    with pytest.raises(ManifestError, match="overlaps"):
        ClipMeta("c", 1, 5.0, "f", "v", transcript_spans=(TranscriptSpan("a", 0, 3), TranscriptSpan("b", 2, 4)))


def test_round_trip(six_clip_manifest, tmp_path):
    save_manifest(six_clip_manifest, tmp_path / "copy.json")
    assert load_manifest(tmp_path / "copy.json") == six_clip_manifest


def test_empty_clip_list_round_trips(tmp_path):
    m = ClipManifest(PRODUCT, (), 1.0)
    save_manifest(m, tmp_path / "empty.json")
    loaded = load_manifest(tmp_path / "empty.json")
    assert loaded.clips == ()
    assert loaded == m


def test_unicode_name_is_byte_identical(tmp_path):
    name = "德芙丝滑牛奶巧克力 🍫 限定版"
    m = make_manifest(tmp_path, [2], product=ProductInfo("p", name))
    save_manifest(m, tmp_path / "copy.json")
    loaded = load_manifest(tmp_path / "copy.json")
    assert loaded.product.name.encode("utf-8") == name.encode("utf-8")
    assert name in (tmp_path / "copy.json").read_text(encoding="utf-8")


def test_unwritable_destination(six_clip_manifest, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(ManifestError, match="cannot write"):
        save_manifest(six_clip_manifest, blocker / "sub" / "m.json")


def test_relative_frame_dir_follows_the_manifest(six_clip_manifest, tmp_path):
    moved = tmp_path.parent / (tmp_path.name + "_moved")
    shutil.copytree(tmp_path, moved)
    assert len(load_manifest(moved / "manifest.json").clips) == 6


def test_creative_tuple_requires_exact_concatenation():
    CreativeTuple("c", "你好世界", ("你好", "世界"))
    with pytest.raises(ValueError):
        CreativeTuple("c", "你好世界", ("你好", " 世界"))
    with pytest.raises(ValueError):
        CreativeSequence((CreativeTuple("c", "a", ("a",)), CreativeTuple("c", "b", ("b",))))


_text = st.text(min_size=1, max_size=12)


@st.composite
def manifests(draw):
    n = draw(st.integers(0, 6))
    durations = draw(st.lists(st.floats(0.1, 120, allow_nan=False), min_size=n, max_size=n))
    clips = tuple(
        ClipMeta(f"c{i}", i, d, f"frames/c{i}", draw(_text), draw(st.none() | _text))
        for i, d in enumerate(durations, 1)
    )
    product = ProductInfo(
        draw(_text), draw(_text), tuple(draw(st.lists(_text, max_size=3))), draw(st.dictionaries(_text, _text, max_size=3))
    )
    return ClipManifest(product, clips, draw(st.sampled_from([1.0, 2.0, 25.0])))


@settings(max_examples=200, deadline=None)
@given(manifests())
def test_dict_round_trip_property(m):
    assert manifest_from_dict(json.loads(json.dumps(manifest_to_dict(m)))) == m
