"""Weight and reference-feature export.

export_weights turns a named layer chain into an S2FW file plus a JSON
manifest; export_reference_features replays an exported file through
the reference forward pass and dumps tap activations as S2FM files.
The manifest carries what the anonymous binary cannot: which published
layer sits at which chain index, where the weights came from, and a
digest per emitted file. Exports are deterministic for a fixed source,
so two runs must hash identically.
"""

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .errors import ContractViolation
from .features import last_relu_index, run_chain
from .formats import read_weights, write_features, write_weights
from .images import read_image, write_bytes
from .vgg import DEFAULT_LAYERS, build_layers, resolve_chain

MANIFEST_SUFFIX = ".manifest.json"


@dataclass
class ExportManifest:
    """Sidecar for one S2FW export."""

    source: str
    layers: list  # [{name, kind, index, channels...}] in chain order
    taps: list  # [{layer, index}] for every relu in the chain
    hashes: dict = field(default_factory=dict)  # file name -> sha256 hex

    def to_json(self) -> str:
        doc = {
            "source": self.source,
            "layers": self.layers,
            "taps": self.taps,
            "hashes": self.hashes,
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    def save(self, path) -> None:
        write_bytes(path, self.to_json().encode())

    @classmethod
    def load(cls, path) -> "ExportManifest":
        doc = json.loads(Path(path).read_text())
        return cls(doc["source"], doc["layers"], doc["taps"], doc["hashes"])


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def manifest_path(weights_path) -> Path:
    weights_path = Path(weights_path)
    return weights_path.with_name(weights_path.name + MANIFEST_SUFFIX)


def export_weights(
    layer_names=None,
    out_path="weights.s2fw",
    source: str = "seeded",
    seed: int = 0,
) -> ExportManifest:
    """Write the named chain (default: everything through relu3_3) as an
    S2FW file and its manifest next to it. Returns the manifest."""
    entries = resolve_chain(DEFAULT_LAYERS if layer_names is None else layer_names)
    layers, source_id = build_layers(entries, source, seed)
    out_path = Path(out_path)
    if out_path.parent and not out_path.parent.exists():
        out_path.parent.mkdir(parents=True, exist_ok=True)
    write_weights(layers, out_path)

    rows = []
    for idx, entry in enumerate(entries):
        row = {"name": entry.name, "kind": entry.kind, "index": idx}
        if entry.kind == "conv":
            row["in_channels"] = entry.in_channels
            row["out_channels"] = entry.out_channels
        rows.append(row)
    taps = [{"layer": e.name, "index": i} for i, e in enumerate(entries) if e.kind == "relu"]
    manifest = ExportManifest(
        source=source_id,
        layers=rows,
        taps=taps,
        hashes={out_path.name: file_sha256(out_path)},
    )
    manifest.save(manifest_path(out_path))
    return manifest


def export_reference_features(
    weights_path,
    image_path,
    out_dir,
    taps: Optional[list] = None,
) -> dict:
    """Run one image through an exported chain and write an S2FM file
    per tap. taps are chain indices (see the manifest); the default is
    the deepest relu, mirroring the consumer's default. Returns
    {tap index: written path}."""
    layers = read_weights(weights_path)
    if taps is None:
        taps = [last_relu_index(layers)]
    image_path = Path(image_path)
    image = read_image(image_path)
    grabbed = run_chain(layers, image, taps)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = {}
    for idx in sorted(grabbed):
        path = out_dir / f"{image_path.stem}.tap{idx:02d}.s2fm"
        write_features(grabbed[idx], path)
        written[idx] = path
    return written


__all__ = [
    "ExportManifest",
    "export_weights",
    "export_reference_features",
    "file_sha256",
    "manifest_path",
    "MANIFEST_SUFFIX",
]
