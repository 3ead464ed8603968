from __future__ import annotations

from pathlib import Path

import pytest
from PIL import Image

from adcut.dataset_tasks import Catalog, SourceVideo, save_catalog
from adcut.manifest import ClipManifest, ClipMeta, ProductInfo, last_frame_index, save_manifest

PRODUCT = ProductInfo("p1", "醇香巧克力", ("丝滑口感", "低糖"), {"brand": "Cocoa"})


def write_frames(frame_dir: Path, duration_s: float, fps: float = 1.0, color=(200, 30, 30), size=(16, 9)) -> None:
    frame_dir.mkdir(parents=True, exist_ok=True)
    for idx in range(last_frame_index(duration_s, fps) + 1):
        shade = (color[0], color[1], (color[2] + 10 * idx) % 256)
        Image.new("RGB", size, shade).save(frame_dir / f"{idx:03d}.jpg")


def make_manifest(root: Path, durations, fps: float = 1.0, product: ProductInfo = PRODUCT, video_id: str = "v1",
                  transcripts=None) -> ClipManifest:
    clips = []
    for i, d in enumerate(durations, 1):
        rel = f"frames/{video_id}_c{i}"
        write_frames(root / rel, d, fps, color=(20 * i % 256, 100, 50))
        clips.append(
            ClipMeta(
                clip_id=f"{video_id}_c{i}",
                index=i,
                duration_s=float(d),
                frame_dir=rel,
                source_video_id=video_id,
                transcript=None if transcripts is None else transcripts[i - 1],
            )
        )
    manifest = ClipManifest(product, tuple(clips), fps, root=root)
    save_manifest(manifest, root / "manifest.json")
    return manifest


@pytest.fixture
def six_clip_manifest(tmp_path: Path) -> ClipManifest:
    return make_manifest(tmp_path, [6, 3, 4.5, 2, 8, 5])


SCRIPTS = [
    "今天给大家推荐一款巧克力",
    "口感丝滑，入口即化",
    "低糖配方，健康无负担",
    "办公室零食的首选",
    "送礼也很有面子",
    "赶紧下单吧",
]


def make_catalog(root: Path, n_products: int = 2, videos_per_product: int = 3, clips_per_video: int = 4,
                 clip_duration: float = 3.0) -> Catalog:
    """Products with several videos each; every clip has frames and a script."""
    products = {}
    videos = []
    for p in range(1, n_products + 1):
        pid = f"p{p}"
        products[pid] = ProductInfo(pid, f"商品{p}", ("好用",))
        for v in range(1, videos_per_product + 1):
            vid = f"{pid}v{v}"
            clips = []
            for c in range(1, clips_per_video + 1):
                cid = f"{vid}_c{c}"
                rel = f"frames/{cid}"
                write_frames(root / rel, clip_duration, color=(30 * c % 256, 40 * v % 256, 50 * p % 256))
                clips.append(ClipMeta(cid, c, clip_duration, rel, vid, SCRIPTS[(c - 1) % len(SCRIPTS)]))
            videos.append(SourceVideo(vid, pid, clip_duration * clips_per_video, clips=tuple(clips)))
    catalog = Catalog(products, tuple(videos), root=root)
    save_catalog(catalog, root / "catalog.json")
    return catalog


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        title, ok, detail = RESULTS[n]
        terminalreporter.write_line(f"ACCEPTANCE {n}: {'PASS' if ok else 'FAIL'} - {title} ({detail})")
