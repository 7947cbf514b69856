"""Command-line surface: extraction, indexing, search, VLAD, evaluation.

Exit codes: 0 success, 2 configuration error, 3 I/O or file-format error,
4 data error. Every binary artifact gets a JSON manifest sidecar; repeated
runs with identical inputs and seeds produce byte-identical outputs.
"""

from __future__ import annotations

import functools
import hashlib
import json
import sys
from pathlib import Path

import click
import numpy as np

from . import model_io, retrieval, vlad
from .descriptor import (
    Descriptor,
    fit_whitening,
    finalize,
    identity_whitening,
    load_whitening,
    read_store,
    save_whitening,
    write_store,
)
from .errors import ConfigError, DataError, DasrError, IOFormatError
from .graph import forward, mean_activation_map
from .ingest import (
    PreprocessSpec,
    load_image,
    preprocess,
    render_box,
    render_heatmap,
    render_regions,
)
from .pipeline import (
    ImageExtraction,
    extract_image,
    extract_many,
    list_images,
    query_descriptor,
    to_records,
)
from .regions import DetectorConfig

EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DATA = 4


def _fail(message: str, code: int):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as exc:
            _fail(str(exc), EXIT_CONFIG)
        except IOFormatError as exc:
            _fail(str(exc), EXIT_IO)
        except (DataError, DasrError) as exc:
            _fail(str(exc), EXIT_DATA)
        except OSError as exc:
            _fail(str(exc), EXIT_IO)

    return wrapper


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_manifest(path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _parse_bbox(text: str):
    try:
        t, l, b, r = (int(v) for v in text.split(","))
    except ValueError:
        raise ConfigError(f"--bbox must be 'top,left,bottom,right', got {text!r}")
    return t, l, b, r


def _load_network(weights, graph_path):
    container = model_io.load_container(weights)
    return model_io.load_graph(graph_path, container)


def write_regions_file(path, extractions: list[ImageExtraction]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# image top left bottom right cy cx semi_major semi_minor "
                 "orientation score\n")
        for ext in extractions:
            for region in ext.regions:
                t, l, b, r = region.bbox
                e = region.ellipse
                fh.write(f"{ext.image_id} {t} {l} {b} {r} "
                         f"{e.center[0]:.4f} {e.center[1]:.4f} "
                         f"{e.semi_major:.4f} {e.semi_minor:.4f} "
                         f"{e.orientation:.4f} {region.score:.6f}\n")


def read_regions_file(path) -> dict[str, list[tuple[int, int, int, int]]]:
    detections: dict[str, list] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for raw in fh:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 11:
                raise IOFormatError(f"{path}: malformed region record {line!r}")
            box = tuple(int(v) for v in parts[1:5])
            detections.setdefault(parts[0], []).append(box)
    return detections


@click.group()
def main():
    """Salient instance region detection and retrieval."""


_network_options = [
    click.option("--weights", required=True, type=click.Path(), help="weight container"),
    click.option("--graph", "graph_path", required=True, type=click.Path(),
                 help="graph description file"),
]

_detector_options = [
    click.option("--tau", default=0.1, show_default=True,
                 help="probability-map threshold"),
    click.option("--beta", default=0.3, show_default=True,
                 help="NMS IoU threshold"),
    click.option("--mode", default="dasr-star", show_default=True,
                 type=click.Choice(["dasr", "dasr-star"])),
    click.option("--tap", default=None, help="descriptor layer (default: graph tap)"),
    click.option("--long-side", default=512, show_default=True,
                 help="resize target for the image long side"),
    click.option("--chunk", default=8, show_default=True,
                 help="seeds back-propagated per batch"),
]


def _add(options):
    def deco(fn):
        for opt in reversed(options):
            fn = opt(fn)
        return fn
    return deco


@main.command()
@_add(_network_options)
@click.option("--images", multiple=True, required=True, type=click.Path(),
              help="image file or directory (repeatable)")
@click.option("--out", required=True, type=click.Path(), help="descriptor store")
@_add(_detector_options)
@click.option("--workers", default=1, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--render", "render_dir", default=None, type=click.Path(),
              help="write heat-map and region overlays here")
@click.option("--verbose", is_flag=True)
@handle_errors
def extract(weights, graph_path, images, out, tau, beta, mode, tap, long_side,
            chunk, workers, seed, render_dir, verbose):
    """Detect salient regions and pool instance descriptors."""
    graph = _load_network(weights, graph_path)
    config = DetectorConfig(tau=tau, beta=beta, mode=mode)
    files = list_images(list(images))
    if not files:
        raise DataError("no input images found")
    extractions = extract_many(graph, files, config, tap=tap,
                               long_side=long_side, chunk=chunk,
                               workers=workers)
    records = []
    for ext in extractions:
        records.extend(to_records(ext))
        if verbose:
            click.echo(f"{ext.image_id}: {ext.diagnostics}")
    write_store(out, records, finalized=False)
    write_regions_file(str(out) + ".regions.txt", extractions)
    if render_dir:
        rdir = Path(render_dir)
        rdir.mkdir(parents=True, exist_ok=True)
        spec = PreprocessSpec.from_graph_preprocessing(graph.preprocessing,
                                                       long_side)
        for path, ext in zip(files, extractions):
            img = preprocess(load_image(path), spec)
            # undo normalization for display
            display = np.clip((img * np.asarray(spec.scale, dtype=np.float32)
                               + np.asarray(spec.mean, dtype=np.float32)) * 255.0,
                              0, 255).astype(np.uint8)
            render_heatmap(display, ext.mean_map, rdir / f"{ext.image_id}.heat.png")
            render_regions(display, ext.regions, rdir / f"{ext.image_id}.regions.png")
    manifest = {
        "kind": "descriptor-store",
        "stage": "l2",
        "config": {"tau": tau, "beta": beta, "mode": mode,
                   "tap": tap or graph.tap, "long_side": long_side,
                   "seed": seed, "chunk": chunk},
        "images": [{"id": ext.image_id, "path": str(path),
                    "height": ext.image_hw[0], "width": ext.image_hw[1],
                    "regions": len(ext.regions)}
                   for path, ext in zip(files, extractions)],
        "record_count": len(records),
        "store_sha256": _sha256(out),
    }
    _write_manifest(str(out) + ".manifest.json", manifest)
    click.echo(f"extracted {len(records)} regions from {len(files)} images "
               f"-> {out}")


@main.command("train-whiten")
@click.option("--store", required=True, type=click.Path())
@click.option("--out", required=True, type=click.Path())
@handle_errors
def train_whiten(store, out):
    """Fit the PCA-whitening model on a descriptor store."""
    records, _ = read_store(store)
    if not records:
        raise DataError(f"store {store} is empty")
    samples = np.stack([r.vector for r in records])
    model = fit_whitening(samples)
    save_whitening(out, model)
    _write_manifest(str(out) + ".manifest.json", {
        "kind": "whitening-model", "dim": int(model.dim),
        "samples": len(records), "source": str(store),
        "model_sha256": _sha256(out),
    })
    click.echo(f"whitening model ({model.dim} dims, {len(records)} samples) "
               f"-> {out}")


@main.command()
@click.option("--store", "stores", multiple=True, required=True,
              type=click.Path())
@click.option("--whiten", "whiten_path", default=None, type=click.Path())
@click.option("--out", required=True, type=click.Path())
@handle_errors
def index(stores, whiten_path, out):
    """Finalize descriptors (whiten + l2) into a searchable index."""
    records: list[Descriptor] = []
    paths: dict[str, str] = {}
    for store in stores:
        recs, finalized = read_store(store)
        if finalized:
            raise DataError(f"store {store} is already finalized")
        records.extend(recs)
        manifest_path = Path(str(store) + ".manifest.json")
        if manifest_path.exists():
            payload = json.loads(manifest_path.read_text())
            for entry in payload.get("images", []):
                paths[entry["id"]] = entry["path"]
    if not records:
        raise DataError("no descriptors to index")
    model = load_whitening(whiten_path) if whiten_path else \
        identity_whitening(records[0].vector.shape[0])
    out_records = [
        Descriptor(vector=finalize(r.vector, model), image_id=r.image_id,
                   region_id=r.region_id, normalized=True, bbox=r.bbox)
        for r in records
    ]
    write_store(out, out_records, finalized=True)
    roster = sorted({r.image_id for r in out_records})
    _write_manifest(str(out) + ".manifest.json", {
        "kind": "instance-index", "images": len(roster), "roster": roster,
        "paths": paths, "records": len(out_records),
        "whiten": str(whiten_path) if whiten_path else None,
        "store_sha256": _sha256(out),
    })
    click.echo(f"indexed {len(out_records)} descriptors over {len(roster)} "
               f"images -> {out}")


@main.command()
@_add(_network_options)
@click.option("--index", "index_path", required=True, type=click.Path())
@click.option("--image", "image_path", required=True, type=click.Path())
@click.option("--bbox", default=None,
              help="query box 'top,left,bottom,right' in original pixels")
@click.option("--whiten", "whiten_path", default=None, type=click.Path())
@click.option("--vlad-model", default=None, type=click.Path(),
              help="search an encoded image-level store instead")
@_add(_detector_options)
@click.option("--topk", default=0, show_default=True, help="0 keeps all hits")
@click.option("--query-id", default=None)
@click.option("--out", required=True, type=click.Path())
@click.option("--render", "render_dir", default=None, type=click.Path())
@click.option("--seed", default=0, show_default=True)
@click.option("--verbose", is_flag=True)
@handle_errors
def search(weights, graph_path, index_path, image_path, bbox, whiten_path,
           vlad_model, tau, beta, mode, tap, long_side, chunk, topk, query_id,
           out, render_dir, seed, verbose):
    """Rank indexed images against a query instance (or whole image)."""
    graph = _load_network(weights, graph_path)
    records, finalized = read_store(index_path)
    if not finalized:
        raise DataError(f"{index_path} is not finalized; run `dasr index`")
    idx = retrieval.InstanceIndex(records)
    image = load_image(image_path)
    qid = query_id or Path(image_path).stem
    model = load_whitening(whiten_path) if whiten_path else None
    if vlad_model:
        codebook, rotation = vlad.load_model(vlad_model)
        config = DetectorConfig(tau=tau, beta=beta, mode=mode)
        ext = extract_image(graph, image, qid, config, tap=tap,
                            long_side=long_side, chunk=chunk)
        if not ext.vectors:
            raise DataError("no regions detected on the query image")
        wm = model or identity_whitening(ext.vectors[0].shape[0])
        finals = np.stack([finalize(v, wm) for v in ext.vectors])
        encoded = vlad.encode(finals, codebook, rotation)
        if not encoded.valid:
            raise DataError("query image produced an empty VLAD vector")
        qvec = encoded.vector
        qbox_scaled = (0, 0, ext.image_hw[0], ext.image_hw[1])
    else:
        if not bbox:
            raise ConfigError("--bbox is required for instance search")
        qbox = _parse_bbox(bbox)
        raw, qbox_scaled = query_descriptor(graph, image, qbox, tap=tap,
                                            long_side=long_side)
        wm = model or identity_whitening(raw.shape[0])
        qvec = finalize(raw, wm)
    ranked = retrieval.search(qvec, idx, query_id=qid)
    if topk and topk > 0:
        ranked.hits = ranked.hits[:topk]
    retrieval.write_results(out, ranked)
    if verbose:
        for rank, hit in enumerate(ranked.hits[:10], start=1):
            click.echo(f"{rank:3d} {hit.image_id} {hit.score:.4f} {hit.bbox}")
    manifest = {
        "kind": "search-results", "query_id": qid, "image": str(image_path),
        "bbox": list(qbox_scaled), "index": str(index_path),
        "hits": len(ranked.hits), "topk": topk, "seed": seed,
        "results_sha256": _sha256(out),
    }
    _write_manifest(str(out) + ".manifest.json", manifest)
    if render_dir:
        rdir = Path(render_dir)
        rdir.mkdir(parents=True, exist_ok=True)
        spec = PreprocessSpec.from_graph_preprocessing(graph.preprocessing,
                                                       long_side)
        display = np.clip((preprocess(image, spec)
                           * np.asarray(spec.scale, dtype=np.float32)
                           + np.asarray(spec.mean, dtype=np.float32)) * 255.0,
                          0, 255).astype(np.uint8)
        render_box(display, qbox_scaled, rdir / f"{qid}.query.png")
        index_manifest = Path(str(index_path) + ".manifest.json")
        if index_manifest.exists():
            paths = json.loads(index_manifest.read_text()).get("paths", {})
            for rank, hit in enumerate(ranked.hits[:5], start=1):
                src = paths.get(hit.image_id)
                if not src or not Path(src).exists():
                    continue
                hit_disp = np.clip(
                    (preprocess(load_image(src), spec)
                     * np.asarray(spec.scale, dtype=np.float32)
                     + np.asarray(spec.mean, dtype=np.float32)) * 255.0,
                    0, 255).astype(np.uint8)
                render_box(hit_disp, hit.bbox,
                           rdir / f"{qid}.hit{rank}.{hit.image_id}.png")
    click.echo(f"query {qid}: {len(ranked.hits)} ranked images -> {out}")


@main.command("train-vlad")
@click.option("--index", "index_path", required=True, type=click.Path(),
              help="finalized descriptor store")
@click.option("--k", default=4, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--rotation-store", default=None, type=click.Path(),
              help="held-out finalized store for the PCA rotation")
@click.option("--out", required=True, type=click.Path())
@handle_errors
def train_vlad(index_path, k, seed, rotation_store, out):
    """Train the VLAD codebook (and optional PCA rotation)."""
    records, finalized = read_store(index_path)
    if not finalized:
        raise DataError(f"{index_path} is not finalized; run `dasr index`")
    if not records:
        raise DataError("no descriptors for codebook training")
    samples = np.stack([r.vector for r in records])
    codebook = vlad.train_codebook(samples, k, seed=seed)
    rotation = None
    if rotation_store:
        held, finalized = read_store(rotation_store)
        if not finalized:
            raise DataError(f"{rotation_store} is not finalized")
        per_image: dict[str, list[np.ndarray]] = {}
        for rec in held:
            per_image.setdefault(rec.image_id, []).append(rec.vector)
        accs = [vlad.accumulate(np.stack(vecs), codebook)
                for vecs in per_image.values()]
        rotation = vlad.fit_rotation(np.stack(accs))
    vlad.save_model(out, codebook, rotation)
    _write_manifest(str(out) + ".manifest.json", {
        "kind": "vlad-model", "codebook": codebook.metadata,
        "rotation": bool(rotation is not None),
        "rotation_store": str(rotation_store) if rotation_store else None,
        "model_sha256": _sha256(out),
    })
    click.echo(f"VLAD model k={k} -> {out}")


@main.command()
@click.option("--index", "index_path", required=True, type=click.Path(),
              help="finalized descriptor store")
@click.option("--model", "model_path", required=True, type=click.Path())
@click.option("--out", required=True, type=click.Path())
@handle_errors
def encode(index_path, model_path, out):
    """Aggregate each image's descriptors into one VLAD vector."""
    records, finalized = read_store(index_path)
    if not finalized:
        raise DataError(f"{index_path} is not finalized; run `dasr index`")
    codebook, rotation = vlad.load_model(model_path)
    per_image: dict[str, list[np.ndarray]] = {}
    for rec in records:
        per_image.setdefault(rec.image_id, []).append(rec.vector)
    out_records = []
    skipped = []
    for image_id in sorted(per_image):
        encoded = vlad.encode(np.stack(per_image[image_id]), codebook, rotation)
        if not encoded.valid:
            skipped.append(image_id)
            continue
        out_records.append(Descriptor(vector=encoded.vector, image_id=image_id,
                                      region_id=0, normalized=True,
                                      bbox=(0, 0, 0, 0)))
    write_store(out, out_records, finalized=True)
    _write_manifest(str(out) + ".manifest.json", {
        "kind": "vlad-store", "images": len(out_records), "skipped": skipped,
        "model": str(model_path), "store_sha256": _sha256(out),
    })
    click.echo(f"encoded {len(out_records)} images -> {out}")


@main.command("eval")
@click.option("--metric", required=True, type=click.Choice(["map@k", "recall-iou"]))
@click.option("--gt", "gt_path", required=True, type=click.Path())
@click.option("--results", "results_paths", multiple=True, type=click.Path(),
              help="results file or directory (map@k)")
@click.option("--regions", "regions_path", default=None, type=click.Path(),
              help="regions file from extract (recall-iou)")
@click.option("--topk", default=0, show_default=True, help="0 means all")
@click.option("--out", default=None, type=click.Path())
@handle_errors
def eval_cmd(metric, gt_path, results_paths, regions_path, topk, out):
    """Score ranked results (mAP@k) or detections (recall-IoU)."""
    gt = retrieval.parse_ground_truth(gt_path)
    lines = []
    if metric == "map@k":
        files: list[Path] = []
        for entry in results_paths:
            p = Path(entry)
            if p.is_dir():
                files.extend(sorted(p.glob("*.txt")))
            else:
                files.append(p)
        if not files:
            raise ConfigError("--results is required for map@k")
        ranked = [retrieval.read_results(p) for p in files]
        score = retrieval.map_at_k(ranked, gt, k=topk if topk > 0 else None)
        lines.append(f"map@{topk if topk > 0 else 'all'} {score:.6f}")
    else:
        if not regions_path:
            raise ConfigError("--regions is required for recall-iou")
        detections = read_regions_file(regions_path)
        curve = retrieval.recall_iou_curve(detections, gt.boxes_by_image())
        for t, recall in curve:
            lines.append(f"{t:.1f} {recall:.6f}")
    text = "\n".join(lines) + "\n"
    click.echo(text, nl=False)
    if out:
        Path(out).write_text(text, encoding="utf-8")
        _write_manifest(str(out) + ".manifest.json", {
            "kind": "evaluation", "metric": metric, "gt": str(gt_path),
            "topk": topk, "report_sha256": _sha256(out),
        })


@main.command()
@_add(_network_options)
@click.option("--image", "image_path", required=True, type=click.Path())
@click.option("--layer", default="@tap",
              help="layer name, or @tap / @start / @mean-map / @all")
@click.option("--long-side", default=512, show_default=True)
@click.option("--out", required=True, type=click.Path())
@handle_errors
def dump(weights, graph_path, image_path, layer, long_side, out):
    """Write layer activation tensors to a weight container."""
    graph = _load_network(weights, graph_path)
    spec = PreprocessSpec.from_graph_preprocessing(graph.preprocessing,
                                                   long_side)
    tensor = preprocess(load_image(image_path), spec)
    cache = forward(graph, tensor)
    if layer == "@all":
        tensors = dict(cache)
        detail = f"{len(tensors)} layers"
    elif layer == "@mean-map":
        name = graph.start + ".mean"
        tensors = {name: mean_activation_map(cache, graph.start)}
        detail = name
    else:
        name = {"@tap": graph.tap, "@start": graph.start}.get(layer, layer)
        if name not in cache:
            raise ConfigError(f"layer {name!r} not present in graph")
        tensors = {name: cache[name]}
        detail = f"{name} {tuple(cache[name].shape)}"
    model_io.write_container(out, tensors)
    _write_manifest(str(out) + ".manifest.json", {
        "kind": "activation-dump", "layer": layer,
        "tensors": {k: list(v.shape) for k, v in tensors.items()},
        "image": str(image_path), "long_side": long_side,
        "container_sha256": _sha256(out),
    })
    click.echo(f"dumped {detail} -> {out}")


if __name__ == "__main__":
    main()
