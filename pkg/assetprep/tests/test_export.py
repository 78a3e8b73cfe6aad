"""Weight export, manifests, and the reference forward pass."""

import numpy as np
import pytest

pytest.importorskip("assetprep")

from PIL import Image

from assetprep.errors import ContractViolation
from assetprep.export import (
    ExportManifest,
    export_reference_features,
    export_weights,
    file_sha256,
    manifest_path,
)
from assetprep.formats import Conv, read_features, read_weights, write_weights
from assetprep.vgg import ARCHITECTURE, DEFAULT_LAYERS, DEFAULT_TAPS, resolve_chain


def write_png(path, values):
    Image.fromarray((np.clip(values, 0.0, 1.0) * 255).astype(np.uint8)).save(path)


class TestChainValidation:
    def test_published_conv_shapes(self):
        # spot checks against the published architecture table
        by_name = {e.name: e for e in ARCHITECTURE}
        assert (by_name["conv1_1"].in_channels, by_name["conv1_1"].out_channels) == (3, 64)
        assert (by_name["conv2_1"].in_channels, by_name["conv2_1"].out_channels) == (64, 128)
        assert (by_name["conv3_3"].in_channels, by_name["conv3_3"].out_channels) == (256, 256)
        assert (by_name["conv5_3"].in_channels, by_name["conv5_3"].out_channels) == (512, 512)
        assert sum(1 for e in ARCHITECTURE if e.kind == "conv") == 13
        assert sum(1 for e in ARCHITECTURE if e.kind == "pool") == 5

    def test_empty_list_refused(self):
        with pytest.raises(ContractViolation, match="empty"):
            resolve_chain([])

    def test_unknown_name(self):
        with pytest.raises(ContractViolation, match="unknown layer name: conv9_9"):
            resolve_chain(["conv9_9"])

    def test_duplicate_name(self):
        with pytest.raises(ContractViolation, match="duplicate"):
            resolve_chain(["conv1_1", "conv1_1"])

    def test_channel_chain_enforced(self):
        with pytest.raises(ContractViolation, match="input channels"):
            resolve_chain(["conv2_1"])
        # skipping the relu is fine (channels still line up)...
        assert len(resolve_chain(["conv1_1", "conv2_1"])) == 2
        # ...skipping a whole block is not
        with pytest.raises(ContractViolation, match="input channels"):
            resolve_chain(["conv1_1", "conv3_1"])

    def test_default_chain_is_valid(self):
        entries = resolve_chain(DEFAULT_LAYERS)
        assert entries[0].name == "conv1_1"
        assert entries[-1].name == "relu3_3"


class TestExportWeights:
    def test_single_conv_file(self, tmp_path):
        # one named layer: one conv, 3 -> 64 channels, 3x3 kernel
        path = tmp_path / "one.s2fw"
        export_weights(["conv1_1"], path, seed=4)
        layers = read_weights(path)
        assert len(layers) == 1
        assert layers[0].weight.shape == (64, 3, 3, 3)
        assert layers[0].bias.shape == (64,)
        assert (layers[0].stride, layers[0].pad) == (1, 1)

    def test_manifest_contents(self, tmp_path):
        path = tmp_path / "w.s2fw"
        manifest = export_weights(None, path, seed=0)
        assert manifest.source == "seeded:vgg16:0"
        assert [row["name"] for row in manifest.layers] == list(DEFAULT_LAYERS)
        assert [row["index"] for row in manifest.layers] == list(range(len(DEFAULT_LAYERS)))
        tap_names = [t["layer"] for t in manifest.taps]
        assert set(DEFAULT_TAPS) <= set(tap_names)
        assert manifest.hashes == {"w.s2fw": file_sha256(path)}
        loaded = ExportManifest.load(manifest_path(path))
        assert loaded.source == manifest.source
        assert loaded.taps == manifest.taps

    def test_deterministic_across_runs(self, tmp_path):
        a = tmp_path / "a.s2fw"
        b = tmp_path / "b.s2fw"
        export_weights(None, a, seed=7)
        export_weights(None, b, seed=7)
        assert file_sha256(a) == file_sha256(b)
        assert manifest_path(a).read_text().replace("a.s2fw", "x") == \
            manifest_path(b).read_text().replace("b.s2fw", "x")

    def test_seed_changes_weights(self, tmp_path):
        a = tmp_path / "a.s2fw"
        b = tmp_path / "b.s2fw"
        export_weights(["conv1_1"], a, seed=1)
        export_weights(["conv1_1"], b, seed=2)
        assert file_sha256(a) != file_sha256(b)

    def test_subchain_matches_full_export(self, tmp_path):
        # layer draws are keyed by position, not by chain membership
        export_weights(["conv1_1"], tmp_path / "sub.s2fw", seed=9)
        export_weights(None, tmp_path / "full.s2fw", seed=9)
        sub = read_weights(tmp_path / "sub.s2fw")[0]
        full = read_weights(tmp_path / "full.s2fw")[0]
        assert np.array_equal(sub.weight, full.weight)
        assert np.array_equal(sub.bias, full.bias)

    def test_unknown_source(self, tmp_path):
        with pytest.raises(ContractViolation, match="unknown weight source"):
            export_weights(["conv1_1"], tmp_path / "w.s2fw", source="guesswork")


class TestReferenceFeatures:
    def test_zero_image_gives_relu_of_bias(self, tmp_path):
        # zero input + zero padding: conv output is the bias everywhere,
        # so the post-relu tap is a stack of constant channels
        path = tmp_path / "w.s2fw"
        export_weights(["conv1_1", "relu1_1"], path, seed=3)
        bias = read_weights(path)[0].bias
        write_png(tmp_path / "zero.png", np.zeros((10, 12, 3)))
        written = export_reference_features(path, tmp_path / "zero.png", tmp_path, taps=[1])
        got = read_features(written[1])
        assert got.shape == (10, 12, 64)
        expected = np.maximum(bias, 0.0)
        assert np.array_equal(got, np.broadcast_to(expected, got.shape))
        assert np.any(expected == 0.0) and np.any(expected > 0.0)

    def test_identity_kernel_returns_input(self, tmp_path):
        # 1x1 identity conv: features must equal the image exactly
        eye = np.zeros((3, 3, 1, 1), dtype=np.float32)
        for c in range(3):
            eye[c, c, 0, 0] = 1.0
        path = tmp_path / "id.s2fw"
        write_weights([Conv(eye, np.zeros(3, dtype=np.float32))], path)
        rng = np.random.default_rng(5)
        img = rng.uniform(0.0, 1.0, (9, 7, 3))
        write_png(tmp_path / "img.png", img)
        written = export_reference_features(path, tmp_path / "img.png", tmp_path, taps=[0])
        decoded = np.asarray(Image.open(tmp_path / "img.png"), dtype=np.float64) / 255.0
        assert np.array_equal(read_features(written[0]), decoded.astype(np.float32))

    def test_default_tap_is_deepest_relu(self, tmp_path):
        path = tmp_path / "w.s2fw"
        export_weights(["conv1_1", "relu1_1", "conv1_2", "relu1_2"], path, seed=0)
        write_png(tmp_path / "img.png", np.full((8, 8, 3), 0.5))
        written = export_reference_features(path, tmp_path / "img.png", tmp_path / "out")
        assert list(written) == [3]
        assert written[3].name == "img.tap03.s2fm"

    def test_unreadable_image(self, tmp_path):
        path = tmp_path / "w.s2fw"
        export_weights(["conv1_1", "relu1_1"], path, seed=0)
        bogus = tmp_path / "not_an_image.png"
        bogus.write_bytes(b"plain text")
        with pytest.raises(ContractViolation, match="unreadable"):
            export_reference_features(path, bogus, tmp_path)

    def test_relu_free_chain_has_no_default_tap(self, tmp_path):
        path = tmp_path / "w.s2fw"
        export_weights(["conv1_1"], path, seed=0)
        write_png(tmp_path / "img.png", np.full((8, 8, 3), 0.5))
        with pytest.raises(ContractViolation, match="no relu"):
            export_reference_features(path, tmp_path / "img.png", tmp_path)

    def test_tap_out_of_range(self, tmp_path):
        path = tmp_path / "w.s2fw"
        export_weights(["conv1_1"], path, seed=0)
        write_png(tmp_path / "img.png", np.full((8, 8, 3), 0.5))
        with pytest.raises(ContractViolation, match="out of range"):
            export_reference_features(path, tmp_path / "img.png", tmp_path, taps=[5])
