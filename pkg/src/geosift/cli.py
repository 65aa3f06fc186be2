"""geosift command line interface.

One subcommand per pipeline stage plus `run` for the whole pipeline,
`sweep`, `evaluate`, `votes`, and `ingest-osm`. Logs go to stderr;
report tables to stdout; data only to files. Exit codes: 0 success,
1 validation error, 2 I/O error.
"""

import json
import logging
import os
import sys
from typing import List, Optional

import click

from . import detfilter, evaluation, exif, osm, pipeline, sightline
from .manifest import (
    ImageRecord,
    Thresholds,
    ValidationError,
    read_manifest,
    write_manifest,
)
from .simfilter import read_embeddings

log = logging.getLogger("geosift")


def _fail(message: str, code: int) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _guard_output(path: str, force: bool) -> None:
    if os.path.exists(path) and not force:
        raise ValidationError(f"output {path} exists; pass --force to overwrite")


def _write_out(records: List[ImageRecord], path: str, force: bool) -> None:
    _guard_output(path, force)
    write_manifest(records, path)


def _default_threads() -> int:
    env = os.environ.get("GEOSIFT_THREADS")
    if env:
        return int(env)
    return os.cpu_count() or 1


class _Cmd(click.Group):
    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except ValidationError as exc:
            _fail(str(exc), 1)
        except OSError as exc:
            _fail(str(exc), 2)


@click.group(cls=_Cmd)
@click.option("-v", "--verbose", is_flag=True, help="Enable debug logging.")
@click.option("--threads", type=int, default=None,
              help="Worker count; defaults to GEOSIFT_THREADS or CPU count.")
def main(verbose: bool, threads: Optional[int]) -> None:
    """Filter geotagged image collections down to verified building images."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if threads is None:
        threads = _default_threads()
    # Results are deterministic regardless of the worker count.
    os.environ.setdefault("OMP_NUM_THREADS", str(threads))


_manifest_opt = click.option("--manifest", "-m", required=True, type=click.Path(exists=True))
_out_opt = click.option("--out", "-o", required=True, type=click.Path())
_force_opt = click.option("--force", is_flag=True, help="Overwrite existing outputs.")


@main.command()
@_manifest_opt
@click.option("--embeddings", required=True, type=click.Path(exists=True),
              help="Candidate embedding file.")
@click.option("--seed", required=True, type=click.Path(exists=True),
              help="Seed embedding file.")
@click.option("--t-sim", type=float, default=Thresholds().t_sim, show_default=True)
@_out_opt
@_force_opt
def similarity(manifest, embeddings, seed, t_sim, out, force):
    """Stage 1: gate on maximum seed similarity."""
    records = read_manifest(manifest)
    outcome = pipeline.stage_similarity(
        records, read_embeddings(seed), read_embeddings(embeddings), t_sim
    )
    _write_out(outcome.survivors, out, force)
    log.info("similarity: %d -> %d", outcome.processed, len(outcome.survivors))


@main.command()
@_manifest_opt
@click.option("--detections", required=True, type=click.Path(exists=True))
@click.option("--t-size", type=float, default=Thresholds().t_size, show_default=True)
@click.option("--t-score", type=float, default=Thresholds().t_score, show_default=True)
@click.option("--strict-thresholds", is_flag=True,
              help="Use strict > instead of inclusive >= at the gates.")
@_out_opt
@_force_opt
def detect(manifest, detections, t_size, t_score, strict_thresholds, out, force):
    """Stage 2: gate on a qualifying house/building detection."""
    records = read_manifest(manifest)
    outcome = pipeline.stage_detection(
        records, detfilter.read_detections(detections), t_size, t_score, strict_thresholds
    )
    _write_out(outcome.survivors, out, force)
    log.info("detect: %d -> %d", outcome.processed, len(outcome.survivors))


@main.command("unique-location")
@_manifest_opt
@_out_opt
@_force_opt
def unique_location(manifest, out, force):
    """Stage 3: reject images whose exact coordinates are shared."""
    records = read_manifest(manifest)
    outcome = pipeline.stage_unique_location(records)
    _write_out(outcome.survivors, out, force)
    log.info("unique-location: %d -> %d", outcome.processed, len(outcome.survivors))


@main.command()
@_manifest_opt
@click.option("--exif-dir", required=True, type=click.Path(exists=True, file_okay=False))
@_out_opt
@_force_opt
def direction(manifest, exif_dir, out, force):
    """Stage 4: require a compass direction in the EXIF data."""
    records = read_manifest(manifest)
    exif_by_id = exif.load_exif_dir(exif_dir, [r.image_id for r in records])
    outcome = pipeline.stage_direction(records, exif_by_id)
    _write_out(outcome.survivors, out, force)
    log.info("direction: %d -> %d", outcome.processed, len(outcome.survivors))


@main.command("sightline")
@_manifest_opt
@click.option("--buildings", required=True, type=click.Path(exists=True))
@click.option("--mapping", type=click.Path(exists=True), default=None,
              help="Tag mapping file; defaults to the shipped table.")
@click.option("--t-dist", type=float, default=Thresholds().t_dist, show_default=True)
@click.option("--max-range", type=float, default=sightline.DEFAULT_MAX_RANGE_M,
              show_default=True)
@_out_opt
@_force_opt
def sightline_cmd(manifest, buildings, mapping, t_dist, max_range, out, force):
    """Stage 5: assign a line-of-sight building and require a label."""
    records = read_manifest(manifest)
    table = osm.TagMappingTable.load(mapping)
    footprints = osm.ingest_buildings(buildings, table)
    index = sightline.BuildingIndex(footprints)
    outcome = pipeline.stage_sightline(records, index, t_dist, max_range)
    labeled = pipeline.stage_labeled(outcome.survivors, footprints)
    _write_out(labeled.survivors, out, force)
    log.info(
        "sightline: %d -> %d assigned -> %d labeled",
        outcome.processed, len(outcome.survivors), len(labeled.survivors),
    )


@main.command()
@_manifest_opt
@click.option("--embeddings", required=True, type=click.Path(exists=True))
@click.option("--seed", required=True, type=click.Path(exists=True))
@click.option("--detections", required=True, type=click.Path(exists=True))
@click.option("--exif-dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--buildings", required=True, type=click.Path(exists=True))
@click.option("--mapping", type=click.Path(exists=True), default=None)
@click.option("--t-sim", type=float, default=Thresholds().t_sim, show_default=True)
@click.option("--t-score", type=float, default=Thresholds().t_score, show_default=True)
@click.option("--t-size", type=float, default=Thresholds().t_size, show_default=True)
@click.option("--t-dist", type=float, default=Thresholds().t_dist, show_default=True)
@click.option("--max-range", type=float, default=sightline.DEFAULT_MAX_RANGE_M,
              show_default=True)
@click.option("--strict-thresholds", is_flag=True)
@click.option("--cache", "cache_path", type=click.Path(), default=None,
              help="Write the parameter cache here for later sweeps.")
@click.option("--funnel-out", type=click.Path(), default=None,
              help="Write the funnel as JSON lines.")
@_out_opt
@_force_opt
def run(manifest, embeddings, seed, detections, exif_dir, buildings, mapping,
        t_sim, t_score, t_size, t_dist, max_range, strict_thresholds,
        cache_path, funnel_out, out, force):
    """Run the full five-stage pipeline and print the funnel report."""
    records = read_manifest(manifest)
    table = osm.TagMappingTable.load(mapping)
    footprints = osm.ingest_buildings(buildings, table)
    thresholds = Thresholds(t_sim=t_sim, t_score=t_score, t_size=t_size, t_dist=t_dist)
    exif_by_id = exif.load_exif_dir(exif_dir, [r.image_id for r in records])
    survivors, cache, funnel = pipeline.run_pipeline(
        records,
        read_embeddings(seed),
        read_embeddings(embeddings),
        detfilter.read_detections(detections),
        exif_by_id,
        footprints,
        thresholds,
        max_range=max_range,
        strict=strict_thresholds,
    )
    _write_out(survivors, out, force)
    if cache_path:
        _guard_output(cache_path, force)
        cache.save(cache_path)
    if funnel_out:
        _guard_output(funnel_out, force)
        with open(funnel_out, "w", encoding="utf-8") as fh:
            for row in funnel.to_records():
                fh.write(json.dumps(row) + "\n")
    click.echo(funnel.format_table())


def _parse_grid(spec: str) -> List[float]:
    """Parse "start:stop:step" (inclusive) or a comma-separated list."""
    if ":" in spec:
        parts = spec.split(":")
        if len(parts) != 3:
            raise ValidationError(f"bad grid {spec!r}; expected start:stop:step")
        start, stop, step = (float(p) for p in parts)
        if step <= 0:
            raise ValidationError("grid step must be positive")
        values = []
        v = start
        while v <= stop + 1e-12:
            values.append(round(v, 12))
            v += step
        return values
    return [float(p) for p in spec.split(",") if p.strip()]


@main.command("sweep")
@click.option("--cache", "cache_path", required=True, type=click.Path(exists=True))
@click.option("--param", required=True,
              type=click.Choice(list(pipeline.SWEEPABLE)))
@click.option("--grid", required=True, help='e.g. "0.70:0.85:0.01" or "0.3,0.5,0.7"')
@click.option("--predictions", required=True, type=click.Path(exists=True))
@click.option("--json-out", type=click.Path(), default=None)
@_force_opt
def sweep_cmd(cache_path, param, grid, predictions, json_out, force):
    """Sweep one threshold over a grid using the cached parameters."""
    cache = pipeline.ParameterCache.load(cache_path)
    result = pipeline.sweep(
        cache, param, _parse_grid(grid), cache.thresholds,
        evaluation.read_predictions(predictions),
    )
    if json_out:
        _guard_output(json_out, force)
        with open(json_out, "w", encoding="utf-8") as fh:
            for row in result.to_records():
                fh.write(json.dumps(row) + "\n")
    click.echo(result.format_table())


@main.command()
@_manifest_opt
@click.option("--predictions", required=True, type=click.Path(exists=True))
@click.option("--ensemble", is_flag=True,
              help="Average all models' probability vectors per image.")
@click.option("--json-out", type=click.Path(), default=None)
@_force_opt
def evaluate(manifest, predictions, ensemble, json_out, force):
    """Score predictions against the manifest's weak labels."""
    records = read_manifest(manifest)
    labels = {r.image_id: r.weak_label for r in records if r.weak_label is not None}
    per_image = evaluation.read_predictions(predictions)
    reports = {}
    if ensemble:
        pairs = [
            (labels[iid], evaluation.ensemble_mean(preds).argmax_class())
            for iid, preds in per_image.items() if iid in labels
        ]
        if not pairs:
            raise ValidationError("no predictions overlap labeled manifest records")
        reports["ensemble"] = evaluation.compute_metrics(pairs)
    else:
        by_model = {}
        for preds in per_image.values():
            for p in preds:
                by_model.setdefault(p.model_id, []).append(p)
        for model_id, preds in sorted(by_model.items()):
            pairs = [
                (labels[p.image_id], p.argmax_class())
                for p in preds if p.image_id in labels
            ]
            if pairs:
                reports[model_id] = evaluation.compute_metrics(pairs)
        if not reports:
            raise ValidationError("no predictions overlap labeled manifest records")
    for name, report in reports.items():
        click.echo(f"# {name}")
        click.echo(report.format_table())
    if json_out:
        _guard_output(json_out, force)
        with open(json_out, "w", encoding="utf-8") as fh:
            json.dump({name: r.to_dict() for name, r in reports.items()}, fh, indent=2)


@main.command()
@click.option("--votes", "votes_path", required=True, type=click.Path(exists=True))
@click.option("--manifest", "-m", type=click.Path(exists=True), default=None,
              help="Optional manifest to cross-check vote image ids.")
@click.option("--subset-out", type=click.Path(), default=None,
              help="Write the validated image/label subset as JSON lines.")
@_force_opt
def votes(votes_path, manifest, subset_out, force):
    """Aggregate three-vote human validation and report label accuracy."""
    records = evaluation.read_votes(votes_path)
    if manifest:
        known = {r.image_id for r in read_manifest(manifest)}
        missing = {v.image_id for v in records} - known
        if missing:
            log.warning("%d voted image(s) not present in manifest", len(missing))
    outcomes = evaluation.aggregate_votes(records)
    kinds = [o.kind for o in outcomes.values()]
    n_unsure = sum(1 for o in outcomes.values() if o.all_unsure)
    click.echo(
        f"images: {len(outcomes)}  confirmed: "
        f"{sum(1 for k in kinds if k is evaluation.OutcomeKind.CONFIRMED_ORIGINAL)}  "
        f"relabeled: {sum(1 for k in kinds if k is evaluation.OutcomeKind.CONFIRMED_NEW)}  "
        f"inconsistent: {sum(1 for k in kinds if k is evaluation.OutcomeKind.INCONSISTENT)}  "
        f"(all-unsure: {n_unsure})"
    )
    click.echo(evaluation.osm_accuracy_report(outcomes).format_table())
    if subset_out:
        _guard_output(subset_out, force)
        with open(subset_out, "w", encoding="utf-8") as fh:
            for image_id, label in evaluation.validated_subset(outcomes).items():
                fh.write(json.dumps({"image_id": image_id, "label": label.value}) + "\n")


@main.command("ingest-osm")
@click.option("--buildings", required=True, type=click.Path(exists=True))
@click.option("--mapping", type=click.Path(exists=True), default=None)
@click.option("--out", "-o", type=click.Path(), default=None,
              help="Write footprints with mapped classes as JSON lines.")
@_force_opt
def ingest_osm(buildings, mapping, out, force):
    """Validate building footprints and homogenize their tags."""
    table = osm.TagMappingTable.load(mapping)
    footprints = osm.ingest_buildings(buildings, table)
    by_class = {}
    for b in footprints:
        key = b.mapped_class.value if b.mapped_class else "unlabeled"
        by_class[key] = by_class.get(key, 0) + 1
    click.echo(f"footprints: {len(footprints)}")
    for key in sorted(by_class):
        click.echo(f"  {key}: {by_class[key]}")
    if out:
        _guard_output(out, force)
        with open(out, "w", encoding="utf-8") as fh:
            for b in footprints:
                fh.write(json.dumps({
                    "building_id": b.building_id,
                    "tags": b.tags,
                    "mapped_class": b.mapped_class.value if b.mapped_class else None,
                    "n_vertices": len(b.exterior),
                }) + "\n")


if __name__ == "__main__":
    main()
