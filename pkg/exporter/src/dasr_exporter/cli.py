"""Command line for the checkpoint exporter."""

from __future__ import annotations

import sys
from pathlib import Path

import click

from .backbones import SUPPORTED
from .export import export as run_export
from .verify import verify as run_verify


@click.group()
def main():
    """Convert torchvision backbones into engine weight containers."""


@main.command()
@click.option("--model", "model_name", required=True,
              type=click.Choice(SUPPORTED))
@click.option("--out-dir", required=True, type=click.Path())
@click.option("--seed", default=0, show_default=True,
              help="init seed when no checkpoint/pretrained weights are used")
@click.option("--checkpoint", default=None, type=click.Path(exists=True),
              help="local state-dict .pth file")
@click.option("--pretrained", is_flag=True,
              help="download the torchvision pretrained snapshot")
def export(model_name, out_dir, seed, checkpoint, pretrained):
    """Emit <model>.dasrc, <model>.graph.txt and <model>.manifest.json."""
    try:
        manifest = run_export(model_name, out_dir, seed=seed,
                              checkpoint=checkpoint, pretrained=pretrained)
    except ValueError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)
    except Exception as exc:  # download failure, unreadable checkpoint
        click.echo(f"error: export failed: {exc}", err=True)
        sys.exit(3)
    click.echo(f"exported {model_name}: {manifest['conv_count']} conv "
               f"tensors, {len(manifest['tensors'])} tensors total -> "
               f"{out_dir}")


@main.command()
@click.option("--container", "container_path", required=True,
              type=click.Path(exists=True))
@click.option("--graph", "graph_path", required=True,
              type=click.Path(exists=True))
@click.option("--manifest", "manifest_path", required=True,
              type=click.Path(exists=True))
@click.option("--image", "images", multiple=True, required=True,
              type=click.Path(exists=True))
@click.option("--tolerance", default=1e-3, show_default=True)
def verify(container_path, graph_path, manifest_path, images, tolerance):
    """Compare engine activations against the source framework."""
    report = run_verify(container_path, graph_path, manifest_path,
                        [Path(p) for p in images], tolerance=tolerance)
    for layer, dev in report.per_layer.items():
        click.echo(f"{layer} {dev:.3e}")
    if report.passed:
        click.echo(f"PASS max deviation {report.max_deviation:.3e} over "
                   f"{report.images} image(s)")
    else:
        click.echo(f"FAIL first diverging layer: {report.first_diverging} "
                   f"(deviation {report.per_layer[report.first_diverging]:.3e}"
                   f" > {tolerance})", err=True)
        sys.exit(4)


if __name__ == "__main__":
    main()
