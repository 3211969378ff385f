"""Command-line pipeline for face-region relevance analysis.

Subcommands map one-to-one onto pipeline stages:

  explain      run each configured classifier over face images, fit local
               surrogates, write per-image relevance PGMs + predictions
  standardize  warp relevance images into the canonical face frame
  aggregate    average standardized images into per-fold / per-model /
               global class heatmaps
  masks        rasterize expression masks from the action-unit tables
  compare      threshold heatmaps and score them against the masks
  cluster      build per-expression model dendrograms from heatmap distances
  pipeline     all of the above in order, plus a run manifest

Exit codes: 0 success, 1 finished with per-item failures, 2 usage or
configuration error. Per-item failures are reported on stderr and never
abort the surrounding run; every stage persists whatever it produced.

Output trees use paths relative to the manifest that names them, so a
finished run can be moved or compared byte-for-byte across directories.
"""

from __future__ import annotations

import argparse
import json
import sys
import threading
import time
from collections import defaultdict
from pathlib import Path

from . import clustering, ekman, heatmaps, metrics, pgm
from .config import ModelSpec, RunConfig, UsageError, apply_env_seed, load_config
from .expressions import EXPRESSIONS
from .explainer import explain
from .geometry import (
    StandardLayout,
    augment_landmarks,
    default_layout,
    delaunay,
    fit_piecewise_affine,
    load_landmarks_csv,
    load_layout,
    rasterize_triangles,
    warp_to_standard,
)
from .heatmaps import LEVELS, ManifestEntry
from .oracle import OracleError, OraclePool
from .slic import slic
from .synthetic import derive_seed

RELEVANCE_MANIFEST = "relevance_manifest.json"
STANDARDIZED_MANIFEST = "standardized_manifest.json"


# ---------------------------------------------------------------------------
# shared plumbing

def _resolve_layout(cfg: RunConfig) -> StandardLayout:
    if cfg.layout == "default":
        return default_layout((cfg.width, cfg.height))
    try:
        return load_layout(cfg.layout, (cfg.width, cfg.height))
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot load layout {cfg.layout}: {exc}") from exc


def _config_from_args(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.master_seed = args.seed
    if getattr(args, "jobs", None) is not None:
        cfg.jobs = args.jobs
    if getattr(args, "quota", None) is not None:
        cfg.quota = args.quota
    if getattr(args, "level", None) not in (None, "all"):
        cfg.level = args.level
    if getattr(args, "linkage", None) is not None:
        cfg.linkage = args.linkage
    if getattr(args, "oracle_cmd", None) is not None:
        cfg.models = [ModelSpec(id="external", cmd=args.oracle_cmd)]
    apply_env_seed(cfg)
    cfg.validate()
    return cfg


def _report(stage: str, label: str, exc: Exception, failures: list[str]) -> None:
    print(f"xfg {stage}: {label}: {exc}", file=sys.stderr)
    failures.append(label)


def _parallel(items, work, jobs: int, caught=(ValueError, OSError)):
    """Run work(item) over items with ``jobs`` pull workers.

    Returns (results, errors): dicts keyed by item index. Work on each
    item is self-contained, so the outputs are identical for any jobs.
    """
    results: dict[int, object] = {}
    errors: dict[int, Exception] = {}
    if jobs == 1 or len(items) <= 1:
        for i, item in enumerate(items):
            try:
                results[i] = work(item)
            except caught as exc:
                errors[i] = exc
        return results, errors
    lock = threading.Lock()
    cursor = {"i": 0}

    def loop():
        while True:
            with lock:
                i = cursor["i"]
                if i >= len(items):
                    return
                cursor["i"] += 1
            try:
                results[i] = work(items[i])
            except caught as exc:
                errors[i] = exc

    threads = [threading.Thread(target=loop) for _ in range(min(jobs, len(items)))]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    return results, errors


def _oracle_parallel(items, make_oracle, work, jobs: int):
    """Like _parallel but each worker owns one oracle handle.

    External oracles hold a child process with one in-flight request, so
    handles are never shared between workers.
    """
    caught = (OracleError, ValueError, OSError)
    results: dict[int, object] = {}
    errors: dict[int, Exception] = {}
    n_workers = max(1, min(jobs, len(items)))
    oracles = []
    try:
        for _ in range(n_workers):
            oracles.append(make_oracle())
        if n_workers == 1:
            for i, item in enumerate(items):
                try:
                    results[i] = work(oracles[0], item)
                except caught as exc:
                    errors[i] = exc
        else:
            lock = threading.Lock()
            cursor = {"i": 0}

            def loop(oracle):
                while True:
                    with lock:
                        i = cursor["i"]
                        if i >= len(items):
                            return
                        cursor["i"] += 1
                    try:
                        results[i] = work(oracle, items[i])
                    except caught as exc:
                        errors[i] = exc

            threads = [threading.Thread(target=loop, args=(o,)) for o in oracles]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
    finally:
        for o in oracles:
            try:
                o.close()
            except Exception:
                pass
    return results, errors


def _group_label(group: dict) -> str:
    label = group.get("model", "global")
    if "fold" in group:
        label = f"{label}/{group['fold']}"
    return label


def _scan_heatmaps(heat_dir: Path) -> list[Path]:
    paths = sorted(Path(heat_dir).glob("*.pgm"))
    if not paths:
        raise UsageError(f"no heatmaps (*.pgm with .json sidecars) in {heat_dir}")
    return paths


# ---------------------------------------------------------------------------
# stages

def stage_explain(cfg: RunConfig, images_dir: Path, out_root: Path) -> list[str]:
    images_dir = Path(images_dir)
    if not images_dir.is_dir():
        raise UsageError(f"image directory {images_dir} does not exist")
    images = sorted(images_dir.glob("*.pgm"))
    if not images:
        raise UsageError(f"no .pgm images in {images_dir}")
    if not cfg.models:
        raise UsageError("no models configured (add [[models]] or --oracle-cmd)")
    out_root = Path(out_root)
    (out_root / "predictions").mkdir(parents=True, exist_ok=True)
    chash = cfg.config_hash()
    failures: list[str] = []
    entries: list[ManifestEntry] = []
    # Images and their segmentations are model-independent; cache them so a
    # multi-model run pays for each face once.
    image_cache: dict[str, object] = {}
    labels_cache: dict[str, object] = {}

    def load_image(path: Path):
        img = image_cache.get(path.stem)
        if img is None:
            img = pgm.read_relevance(path)
            image_cache[path.stem] = img
        return img

    def load_labels(path: Path):
        lab = labels_cache.get(path.stem)
        if lab is None:
            lab = slic(load_image(path), cfg.slic_k, cfg.slic_compactness,
                       cfg.slic_iterations)
            labels_cache[path.stem] = lab
        return lab

    for spec in cfg.models:
        tag = f"{spec.id}/{spec.fold}"

        def make(spec=spec):
            if cfg.oracle_pool > 1:
                return OraclePool(
                    lambda: spec.build_oracle(cfg.oracle_timeout), cfg.oracle_pool
                )
            return spec.build_oracle(cfg.oracle_timeout)

        def classify_one(oracle, path):
            rec = oracle.classify(load_image(path))
            return rec.predicted, [float(p) for p in rec.probs]

        try:
            anchors, errors = _oracle_parallel(images, make, classify_one, cfg.jobs)
        except (OracleError, OSError) as exc:
            _report("explain", tag, exc, failures)
            continue
        for i in sorted(errors):
            _report("explain", f"{tag}:{images[i].stem}", errors[i], failures)

        # Quota: walk in sorted image order, keep the first N per predicted class.
        kept: dict[int, bool] = {}
        per_class = defaultdict(int)
        for i in range(len(images)):
            if i not in anchors:
                continue
            c = anchors[i][0]
            take = not cfg.quota or per_class[c] < cfg.quota
            if take:
                per_class[c] += 1
            kept[i] = take

        def explain_one(oracle, item, spec=spec):
            i, path = item
            img = load_image(path)
            labels = load_labels(path)
            seed = derive_seed(cfg.master_seed, path.stem)
            expl = explain(
                img, oracle, labels, seed,
                n_samples=cfg.n_samples, ridge=cfg.ridge, sigma=cfg.sigma,
                batch=cfg.batch,
            )
            rel = f"relevance/{spec.id}/{spec.fold}/{path.stem}.pgm"
            fp = out_root / rel
            fp.parent.mkdir(parents=True, exist_ok=True)
            pgm.write_relevance(fp, expl.relevance)
            return rel, expl.explained_class

        todo = [(i, images[i]) for i in range(len(images)) if kept.get(i)]
        try:
            done, errors = _oracle_parallel(todo, make, explain_one, cfg.jobs)
        except (OracleError, OSError) as exc:
            _report("explain", tag, exc, failures)
            continue
        for j in sorted(errors):
            _report("explain", f"{tag}:{todo[j][1].stem}", errors[j], failures)
        for j in sorted(done):
            rel, cls = done[j]
            entries.append(
                ManifestEntry(rel, spec.id, spec.fold, EXPRESSIONS[cls],
                              todo[j][1].stem)
            )

        records = [
            {
                "image_id": images[i].stem,
                "predicted": EXPRESSIONS[anchors[i][0]],
                "probs": anchors[i][1],
                "kept": bool(kept.get(i)),
            }
            for i in range(len(images)) if i in anchors
        ]
        payload = {"config_hash": chash, "model": spec.id, "fold": spec.fold,
                   "records": records}
        (out_root / "predictions" / f"{spec.id}__{spec.fold}.json").write_text(
            json.dumps(payload, indent=1, sort_keys=True) + "\n", encoding="utf-8"
        )

    entries.sort(key=lambda e: e.sort_key())
    heatmaps.save_manifest(out_root / RELEVANCE_MANIFEST, entries)
    return failures


def stage_standardize(cfg: RunConfig, manifest_path: Path, landmarks_dir: Path,
                      out_root: Path) -> list[str]:
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise UsageError(f"manifest {manifest_path} does not exist")
    entries = heatmaps.load_manifest(manifest_path)
    if not entries:
        raise UsageError(f"manifest {manifest_path} is empty")
    landmarks_dir = Path(landmarks_dir)
    out_root = Path(out_root)
    layout = _resolve_layout(cfg)
    tri = delaunay(layout.points)
    raster = rasterize_triangles(layout, tri)
    mdir = manifest_path.parent
    maps: dict[tuple, object] = {}  # (image_id, w, h) -> fitted map

    def work(e: ManifestEntry):
        rel = pgm.read_relevance(mdir / e.path)
        h, w = rel.shape
        key = (e.image_id, w, h)
        pmap = maps.get(key)
        if pmap is None:
            lm = load_landmarks_csv(landmarks_dir / f"{e.image_id}.csv", w, h)
            pmap = fit_piecewise_affine(augment_landmarks(lm), layout, tri)
            maps[key] = pmap
        std = warp_to_standard(rel, pmap, layout, (w, h), raster)
        rp = f"standardized/{e.model}/{e.fold}/{e.image_id}.pgm"
        fp = out_root / rp
        fp.parent.mkdir(parents=True, exist_ok=True)
        pgm.write_relevance(fp, std)
        return ManifestEntry(rp, e.model, e.fold, e.class_name, e.image_id)

    done, errors = _parallel(entries, work, cfg.jobs)
    failures: list[str] = []
    for i in sorted(errors):
        e = entries[i]
        _report("standardize", f"{e.model}/{e.fold}:{e.image_id}", errors[i], failures)
    out_entries = sorted((done[i] for i in done), key=lambda e: e.sort_key())
    heatmaps.save_manifest(out_root / STANDARDIZED_MANIFEST, out_entries)
    return failures


_HEATMAP_NAMES = {
    "per_fold": lambda g: f"{g['model']}__{g['fold']}__{g['class']}.pgm",
    "per_model": lambda g: f"{g['model']}__{g['class']}.pgm",
    "global": lambda g: f"{g['class']}.pgm",
}


def stage_aggregate(cfg: RunConfig, manifest_path: Path, out_root: Path,
                    levels=LEVELS, render: bool = False) -> list[str]:
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise UsageError(f"manifest {manifest_path} does not exist")
    entries = heatmaps.load_manifest(manifest_path)
    if not entries:
        raise UsageError(f"manifest {manifest_path} is empty")
    mdir = manifest_path.parent
    out_root = Path(out_root)
    chash = cfg.config_hash()
    loader = lambda e: pgm.read_relevance(mdir / e.path)
    failures: list[str] = []
    for level in levels:
        try:
            maps = heatmaps.group_and_aggregate(entries, level, loader)
        except (ValueError, OSError) as exc:
            _report("aggregate", level, exc, failures)
            continue
        level_dir = out_root / "heatmaps" / level
        level_dir.mkdir(parents=True, exist_ok=True)
        for hm in maps:
            path = level_dir / _HEATMAP_NAMES[level](hm.group)
            heatmaps.save_heatmap(path, hm, extra={"config_hash": chash,
                                                   "level": level})
            if render:
                from . import render as _render

                _render.render_heatmap(hm.pixels, path.with_suffix(".png"),
                                       title=_group_label(hm.group))
    return failures


def stage_masks(cfg: RunConfig, out_root: Path, render: bool = False) -> list[str]:
    layout = _resolve_layout(cfg)
    tri = delaunay(layout.points)
    try:
        table = ekman.load_au_table(None if cfg.au_table == "default" else cfg.au_table)
        regions = ekman.load_au_regions(
            None if cfg.au_regions == "default" else cfg.au_regions
        )
        all_masks = ekman.build_all_masks(table, regions, layout, tri)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot build expression masks: {exc}") from exc
    mask_dir = Path(out_root) / "masks"
    mask_dir.mkdir(parents=True, exist_ok=True)
    for expr in EXPRESSIONS:
        pgm.write_mask(mask_dir / f"{expr}.pgm", all_masks[expr].mask)
        if render:
            from . import render as _render

            _render.render_mask_overlay(all_masks[expr].mask,
                                        mask_dir / f"{expr}.png", title=expr)
    (mask_dir / "masks.json").write_text(
        json.dumps({"config_hash": cfg.config_hash(),
                    "expressions": list(EXPRESSIONS),
                    "resolution": [layout.width, layout.height]},
                   sort_keys=True) + "\n",
        encoding="utf-8",
    )
    return []


def stage_compare(cfg: RunConfig, heat_dir: Path, masks_dir: Path,
                  out_csv: Path) -> list[str]:
    paths = _scan_heatmaps(heat_dir)
    masks_dir = Path(masks_dir)
    if not masks_dir.is_dir():
        raise UsageError(f"mask directory {masks_dir} does not exist")
    table: dict[tuple[str, str], metrics.MetricsRecord] = {}
    failures: list[str] = []
    for p in paths:
        try:
            hm = heatmaps.load_heatmap(p)
            expr = hm.group["class"]
            mask = pgm.read_mask(masks_dir / f"{expr}.pgm")
            thr = metrics.otsu_threshold(hm.pixels)
            pred = metrics.binarize(hm.pixels, thr)
            table[(_group_label(hm.group), expr)] = metrics.compare(mask, pred)
        except (OSError, ValueError, KeyError) as exc:
            _report("compare", p.name, exc, failures)
    if not table:
        raise UsageError(f"no comparable heatmaps in {heat_dir}")
    out_csv = Path(out_csv)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    metrics.write_metrics_csv(out_csv, table)
    return failures


def stage_cluster(cfg: RunConfig, heat_dir: Path, out_root: Path,
                  render: bool = False) -> list[str]:
    paths = _scan_heatmaps(heat_dir)
    by_expr: dict[str, list] = defaultdict(list)
    failures: list[str] = []
    for p in paths:
        try:
            hm = heatmaps.load_heatmap(p)
            by_expr[hm.group["class"]].append((_group_label(hm.group), hm.pixels))
        except (OSError, ValueError, KeyError) as exc:
            _report("cluster", p.name, exc, failures)
    dendro_dir = Path(out_root) / "dendrograms"
    dendro_dir.mkdir(parents=True, exist_ok=True)
    for expr in sorted(by_expr):
        items = sorted(by_expr[expr], key=lambda t: t[0])
        try:
            dm = clustering.distance_matrix(items)
            dendro = clustering.agglomerate(dm, cfg.linkage)
        except ValueError as exc:
            _report("cluster", expr, exc, failures)
            continue
        (dendro_dir / f"{expr}.newick").write_text(
            clustering.to_newick(dendro) + "\n", encoding="utf-8"
        )
        clustering.save_dendrogram_json(dendro_dir / f"{expr}.json", dendro)
        if render:
            from . import render as _render

            _render.render_dendrogram(dendro, dendro_dir / f"{expr}.png", title=expr)
    return failures


# ---------------------------------------------------------------------------
# subcommand handlers

def _finish(stage: str, failures: list[str]) -> int:
    if failures:
        print(f"xfg {stage}: {len(failures)} item(s) failed", file=sys.stderr)
        return 1
    return 0


def cmd_explain(args) -> int:
    cfg = _config_from_args(args)
    return _finish("explain", stage_explain(cfg, Path(args.images), Path(args.out)))


def cmd_standardize(args) -> int:
    cfg = _config_from_args(args)
    return _finish(
        "standardize",
        stage_standardize(cfg, Path(args.manifest), Path(args.landmarks),
                          Path(args.out)),
    )


def cmd_aggregate(args) -> int:
    cfg = _config_from_args(args)
    levels = LEVELS if args.level in (None, "all") else (args.level,)
    return _finish(
        "aggregate",
        stage_aggregate(cfg, Path(args.manifest), Path(args.out), levels,
                        args.render),
    )


def cmd_masks(args) -> int:
    cfg = _config_from_args(args)
    return _finish("masks", stage_masks(cfg, Path(args.out), args.render))


def cmd_compare(args) -> int:
    cfg = _config_from_args(args)
    return _finish(
        "compare",
        stage_compare(cfg, Path(args.heatmaps), Path(args.masks), Path(args.out)),
    )


def cmd_cluster(args) -> int:
    cfg = _config_from_args(args)
    return _finish(
        "cluster", stage_cluster(cfg, Path(args.heatmaps), Path(args.out),
                                 args.render)
    )


def cmd_pipeline(args) -> int:
    cfg = _config_from_args(args)
    images_dir = Path(args.images)
    out_root = Path(args.out)
    out_root.mkdir(parents=True, exist_ok=True)
    heat_dir = out_root / "heatmaps" / cfg.level
    plan = [
        ("explain", lambda: stage_explain(cfg, images_dir, out_root)),
        ("standardize", lambda: stage_standardize(
            cfg, out_root / RELEVANCE_MANIFEST, images_dir, out_root)),
        ("aggregate", lambda: stage_aggregate(
            cfg, out_root / STANDARDIZED_MANIFEST, out_root, LEVELS, args.render)),
        ("masks", lambda: stage_masks(cfg, out_root, args.render)),
        ("compare", lambda: stage_compare(
            cfg, heat_dir, out_root / "masks", out_root / "metrics.csv")),
        ("cluster", lambda: stage_cluster(cfg, heat_dir, out_root, args.render)),
    ]
    stages = []
    total_failures = 0
    t_start = time.perf_counter()
    for name, fn in plan:
        t0 = time.perf_counter()
        try:
            fails = fn()
        except UsageError:
            if total_failures == 0:
                raise  # a genuine misconfiguration, not a failure cascade
            print(f"xfg pipeline: {name}: no usable input left; stopping",
                  file=sys.stderr)
            stages.append({"name": name, "seconds": time.perf_counter() - t0,
                           "failures": -1})
            total_failures += 1
            break
        stages.append({"name": name, "seconds": time.perf_counter() - t0,
                       "failures": len(fails)})
        total_failures += len(fails)
    manifest = {
        "config_hash": cfg.config_hash(),
        "master_seed": cfg.master_seed,
        "stages": stages,
        "total_seconds": time.perf_counter() - t_start,
        "failures": total_failures,
    }
    (out_root / "run_manifest.json").write_text(
        json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8"
    )
    return _finish("pipeline", ["x"] * total_failures)


# ---------------------------------------------------------------------------
# argument parsing

def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="xfg",
        description="Face-region relevance analysis for expression classifiers.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, jobs=True):
        sp.add_argument("--config", help="TOML configuration file")
        sp.add_argument("--seed", type=int, help="master seed override")
        if jobs:
            sp.add_argument("--jobs", type=int, help="parallel workers")

    pe = sub.add_parser("explain", help="relevance images per model and face")
    pe.add_argument("--images", required=True, help="directory of .pgm faces")
    pe.add_argument("--out", required=True, help="output root")
    pe.add_argument("--oracle-cmd", help="shell command for one external model")
    pe.add_argument("--quota", type=int,
                    help="keep at most N faces per predicted class (0 = all)")
    common(pe)
    pe.set_defaults(fn=cmd_explain)

    ps = sub.add_parser("standardize", help="warp relevance to the canonical frame")
    ps.add_argument("--manifest", required=True, help="relevance manifest JSON")
    ps.add_argument("--landmarks", required=True,
                    help="directory of <image_id>.csv landmark files")
    ps.add_argument("--out", required=True)
    common(ps)
    ps.set_defaults(fn=cmd_standardize)

    pa = sub.add_parser("aggregate", help="average standardized images into heatmaps")
    pa.add_argument("--manifest", required=True, help="standardized manifest JSON")
    pa.add_argument("--out", required=True)
    pa.add_argument("--level", choices=LEVELS + ("all",), default="all")
    pa.add_argument("--render", action="store_true", help="also write PNG previews")
    common(pa)
    pa.set_defaults(fn=cmd_aggregate)

    pm = sub.add_parser("masks", help="rasterize expression masks")
    pm.add_argument("--out", required=True)
    pm.add_argument("--render", action="store_true")
    common(pm, jobs=False)
    pm.set_defaults(fn=cmd_masks)

    pc = sub.add_parser("compare", help="score heatmaps against expression masks")
    pc.add_argument("--heatmaps", required=True, help="one heatmap level directory")
    pc.add_argument("--masks", required=True, help="mask directory")
    pc.add_argument("--out", required=True, help="metrics CSV path")
    common(pc, jobs=False)
    pc.set_defaults(fn=cmd_compare)

    pk = sub.add_parser("cluster", help="per-expression model dendrograms")
    pk.add_argument("--heatmaps", required=True, help="one heatmap level directory")
    pk.add_argument("--out", required=True)
    pk.add_argument("--linkage", choices=clustering.LINKAGES)
    pk.add_argument("--render", action="store_true")
    common(pk, jobs=False)
    pk.set_defaults(fn=cmd_cluster)

    pp = sub.add_parser("pipeline", help="run every stage in order")
    pp.add_argument("--images", required=True,
                    help="directory of .pgm faces with <image_id>.csv landmarks")
    pp.add_argument("--out", required=True)
    pp.add_argument("--render", action="store_true")
    pp.add_argument("--level", choices=LEVELS,
                    help="heatmap level feeding compare/cluster")
    pp.add_argument("--linkage", choices=clustering.LINKAGES)
    common(pp)
    pp.set_defaults(fn=cmd_pipeline)
    return p


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits for --help and usage errors
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"xfg: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
