"""Command line entry points.

One binary, three subcommands (export-weights, export-features,
gen-masks). Exit codes follow the downstream convention: 0 success,
2 bad input or usage, 3 model or write failure. Every command
validates its inputs before writing anything.
"""

import functools
import sys

import click

from . import __version__
from .errors import ContractViolation, FormatError, ModelError
from .export import export_reference_features, export_weights, manifest_path
from .masks import LINK_IOU, gen_masks
from .detect import CONFIDENCE, CONTRAST, MIN_AREA
from .vgg import DEFAULT_LAYERS

EXIT_USAGE = 2
EXIT_RUNTIME = 3


def _fail(code, message):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _guarded(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (ContractViolation, FormatError) as exc:
            _fail(EXIT_USAGE, exc)
        except FileNotFoundError as exc:
            _fail(EXIT_USAGE, exc)
        except ModelError as exc:
            _fail(EXIT_RUNTIME, exc)
        except OSError as exc:
            _fail(EXIT_RUNTIME, exc)

    return wrapper


def _split_csv(text):
    return [part.strip() for part in text.split(",") if part.strip()]


@click.group()
@click.version_option(version=__version__)
def main():
    """Asset preparation: weight exports, reference features, masks."""


@main.command("export-weights")
@click.option("--out", "out_path", required=True, type=click.Path(), help="S2FW file to write")
@click.option("--layers", "layers_spec", default="", help="comma-separated layer names; "
              f"default {DEFAULT_LAYERS[0]}..{DEFAULT_LAYERS[-1]}")
@click.option("--source", type=click.Choice(["seeded", "torchvision"]), default="seeded",
              show_default=True, help="where the weight values come from")
@click.option("--seed", type=int, default=0, show_default=True,
              help="generator seed for the seeded source")
@_guarded
def cmd_export_weights(out_path, layers_spec, source, seed):
    """Export a conv chain as S2FW plus a JSON manifest."""
    names = _split_csv(layers_spec) if layers_spec else None
    manifest = export_weights(names, out_path, source=source, seed=seed)
    digest = next(iter(manifest.hashes.values()))
    click.echo(f"wrote {out_path} ({len(manifest.layers)} layers, sha256 {digest[:12]}...)")
    click.echo(f"manifest: {manifest_path(out_path)}")


@main.command("export-features")
@click.option("--weights", "weights_path", required=True, type=click.Path(),
              help="S2FW file from export-weights")
@click.option("--image", "image_paths", required=True, multiple=True, type=click.Path(),
              help="input image; repeat for several")
@click.option("--taps", "taps_spec", default="", help="comma-separated chain indices; "
              "default is the deepest relu")
@click.option("--out", "out_dir", required=True, type=click.Path(), help="directory for S2FM files")
@_guarded
def cmd_export_features(weights_path, image_paths, taps_spec, out_dir):
    """Dump reference activations for one or more images."""
    taps = None
    if taps_spec:
        try:
            taps = [int(t) for t in _split_csv(taps_spec)]
        except ValueError:
            raise ContractViolation("--taps wants comma-separated integers")
    total = 0
    for image_path in image_paths:
        written = export_reference_features(weights_path, image_path, out_dir, taps)
        total += len(written)
    click.echo(f"wrote {total} feature maps to {out_dir}")


@main.command("gen-masks")
@click.option("--images", "images_dir", required=True, type=click.Path(),
              help="directory of frames in name order")
@click.option("--out", "out_dir", required=True, type=click.Path(),
              help="mask layout destination (must be empty or absent)")
@click.option("--backend", type=click.Choice(["classical", "neural", "auto"]),
              default="classical", show_default=True)
@click.option("--confidence", type=float, default=CONFIDENCE, show_default=True,
              help="discard detections scoring below this")
@click.option("--contrast", type=float, default=CONTRAST, show_default=True,
              help="classical backend: minimum luminance contrast")
@click.option("--min-area", type=int, default=MIN_AREA, show_default=True,
              help="classical backend: minimum component pixels")
@click.option("--link-iou", type=float, default=LINK_IOU, show_default=True,
              help="minimum box IoU to keep an identity across frames")
@click.option("--segmenter-checkpoint", type=click.Path(), default=None,
              help="neural backend: segmenter checkpoint file")
@_guarded
def cmd_gen_masks(images_dir, out_dir, backend, confidence, contrast, min_area,
                  link_iou, segmenter_checkpoint):
    """Detect objects, link identities, and write the mask layout."""
    report = gen_masks(
        images_dir,
        out_dir,
        backend=backend,
        confidence=confidence,
        contrast=contrast,
        min_area=min_area,
        link_iou=link_iou,
        segmenter_checkpoint=segmenter_checkpoint,
    )
    n_objects = len(report["objects"])
    click.echo(
        f"{report['backend']} backend: {n_objects} objects across "
        f"{report['frames']} frames -> {out_dir}"
    )


if __name__ == "__main__":
    main()
