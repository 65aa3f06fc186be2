"""geosift-sidecar command line interface."""

import logging
import sys
from typing import Optional, Tuple

import click

from . import ops
from .config import SidecarConfig, SidecarError


class _Cmd(click.Group):
    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except SidecarError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(1)
        except OSError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(2)


@click.group(cls=_Cmd)
@click.option("-v", "--verbose", is_flag=True, help="Enable debug logging.")
def main(verbose: bool) -> None:
    """Produce pipeline input files from a directory of images."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )


_images_opt = click.option("--images", required=True,
                           type=click.Path(exists=True, file_okay=False))
_out_opt = click.option("--out", "-o", required=True, type=click.Path())
_batch_opt = click.option("--batch-size", type=int, default=8, show_default=True)
_device_opt = click.option("--device", default="cpu", show_default=True)
_weights_opt = click.option("--pretrained/--no-pretrained", default=True,
                            help="Download published weights, or use a random "
                                 "initialization (testing only).")


@main.command()
@_images_opt
@_out_opt
@_batch_opt
@_device_opt
@_weights_opt
def embed(images, out, batch_size, device, pretrained):
    """Extract one 4096-d feature vector per image."""
    from .models import build_embedder

    config = SidecarConfig(
        image_dir=images, embeddings_out=out, batch_size=batch_size, device=device
    )
    ids, skipped = ops.extract_embeddings(
        config, build_embedder(pretrained=pretrained, device=device)
    )
    click.echo(f"embedded: {len(ids)}  skipped: {len(skipped)}")


@main.command()
@_images_opt
@_out_opt
@_batch_opt
@_device_opt
@_weights_opt
def detect(images, out, batch_size, device, pretrained):
    """Run object detection and record every reported box."""
    from .models import build_detector, detector_class_names

    config = SidecarConfig(
        image_dir=images, detections_out=out, batch_size=batch_size, device=device
    )
    ids, skipped = ops.detect_objects(
        config,
        build_detector(pretrained=pretrained, device=device),
        detector_class_names(pretrained=pretrained),
    )
    click.echo(f"images: {len(ids)}  skipped: {len(skipped)}")


@main.command()
@_images_opt
@_out_opt
@_batch_opt
@_device_opt
@_weights_opt
@click.option("--checkpoint", "checkpoints", multiple=True, required=True,
              help="model_id=path; repeat for an ensemble.")
def predict(images, out, batch_size, device, pretrained, checkpoints):
    """Emit three-class probability vectors from fine-tuned heads."""
    from .models import build_embedder

    parsed = {}
    for spec in checkpoints:
        if "=" not in spec:
            raise SidecarError(f"bad --checkpoint {spec!r}; expected model_id=path")
        model_id, path = spec.split("=", 1)
        parsed[model_id] = path
    config = SidecarConfig(
        image_dir=images, predictions_out=out, batch_size=batch_size, device=device
    )
    ids, skipped = ops.predict_classes(
        config, parsed, build_embedder(pretrained=pretrained, device=device)
    )
    click.echo(f"images: {len(ids)}  models: {len(parsed)}  skipped: {len(skipped)}")


if __name__ == "__main__":
    main()
