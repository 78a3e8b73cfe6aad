"""Cross-package acceptance gate: two criteria, one [PASS]/[FAIL] line
each. Both sides of the handoff must be installed: this tool writes the
files, the consumer package reads them, and nothing but the files
crosses the boundary.
"""

import json

import numpy as np
import pytest

pytest.importorskip("assetprep")
stylevox = pytest.importorskip("stylevox")

from click.testing import CliRunner
from PIL import Image

from assetprep.export import export_reference_features, export_weights
from assetprep.formats import read_features
from assetprep.masks import gen_masks
from assetprep.vgg import DEFAULT_TAPS

from stylevox.cli import main as consumer_cli
from stylevox.datagen import TwoSphereSpec, build_two_sphere_scene
from stylevox.imgio import read_image
from stylevox.style import extract_features, load_weights

PARITY_TOL = 1e-4


def emit(capsys, criterion, ok, detail):
    with capsys.disabled():
        print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}")


def fixed_photos(out_dir):
    """Three fixed 64x64 test images: a smooth gradient, seeded noise,
    and concentric rings. Deterministic by construction."""
    h = w = 64
    yy, xx = np.mgrid[0:h, 0:w] / (h - 1.0)
    gradient = np.stack([xx, yy, 0.5 * (xx + yy)], axis=2)
    noise = np.random.default_rng(2024).uniform(0.0, 1.0, (h, w, 3))
    r = np.hypot(yy - 0.5, xx - 0.5)
    rings = np.stack([0.5 + 0.5 * np.cos(24 * r), 1.0 - r, r], axis=2)
    paths = []
    for name, img in [("gradient", gradient), ("noise", noise), ("rings", rings)]:
        path = out_dir / f"{name}.png"
        arr = (np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
        Image.fromarray(arr).save(path)
        paths.append(path)
    return paths


def test_feature_parity(tmp_path, capsys):
    """Criterion 10: the consumer's extractor, loading this tool's
    exported weights, reproduces this tool's reference activations."""
    weights = tmp_path / "vgg.s2fw"
    manifest = export_weights(None, weights, source="seeded", seed=0)
    tap_index = {t["layer"]: t["index"] for t in manifest.taps}
    taps = [tap_index[name] for name in DEFAULT_TAPS]

    extractor = load_weights(weights, taps=taps)
    worst = 0.0
    checked = 0
    for photo in fixed_photos(tmp_path):
        written = export_reference_features(weights, photo, tmp_path / "refs", taps=taps)
        maps = extract_features(extractor, read_image(photo))
        assert [m.layer for m in maps] == [f"relu{i}" for i in taps]
        for fmap, idx in zip(maps, taps):
            ref = read_features(written[idx]).astype(np.float64)
            got = fmap.values.astype(np.float64)
            assert got.shape == ref.shape
            rel = float(np.linalg.norm(got - ref) / np.linalg.norm(ref))
            worst = max(worst, rel)
            checked += 1

    ok = checked == 9 and worst <= PARITY_TOL
    emit(capsys, 10, ok,
         f"3 images x 3 taps {tuple(DEFAULT_TAPS)}: worst relative error "
         f"{worst:.2e} (<= {PARITY_TOL:.0e})")
    assert ok


def test_mask_round_trip(tmp_path, capsys):
    """Criterion 11: generated masks load in the consumer's retention
    command with zero schema errors on a 10-frame scene."""
    scene_dir = tmp_path / "scene"
    build_two_sphere_scene(scene_dir, TwoSphereSpec(n_frames=10), step=1.0 / 128.0)
    out_dir = tmp_path / "generated_masks"
    report = gen_masks(scene_dir / "images", out_dir)
    assert report["frames"] == 10
    assert report["objects"], "the detector found nothing in a two-object scene"

    runner = CliRunner()
    result = runner.invoke(
        consumer_cli,
        ["filter-masks", "--scene", str(scene_dir / "scene.json"), "--masks", str(out_dir)],
    )
    schema_clean = result.exit_code == 0
    doc = json.loads(result.output) if schema_clean else {}
    shape_ok = schema_clean and doc.get("n_frames") == 10 and set(doc) >= {
        "threshold", "n_frames", "retained", "dropped"
    }
    ok = shape_ok and (len(doc["retained"]) + len(doc["dropped"])) >= 1
    detail = (
        f"{len(report['objects'])} generated objects, detections/frame "
        f"{report['detections']}, consumer load exit {result.exit_code}, "
        f"{len(doc.get('retained', {}))} retained / {len(doc.get('dropped', {}))} dropped"
        if schema_clean else f"consumer refused the layout: {result.output.strip()}"
    )
    emit(capsys, 11, ok, detail)
    assert ok
