"""Command-line pipeline orchestration.

Subcommands: build-cache, gen-cam, train, eval, heatmap, ablate. Exit codes:
0 success, 2 usage or config error, 3 data error, 4 numeric error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import tensorio
from .adapter import AdapterState, adapter_forward, fuse_dynamic, train_adapter
from .attention import enhance_features
from .cache import (
    CacheModel,
    PrototypeSet,
    assemble_cache,
    build_keys,
    build_values,
    fuse_static,
    mask_average_pool,
    negative_values,
    static_retrieve,
)
from .cam import Cam, PseudoMask, cam_to_mask, generate_patch_text_cam
from .config import PipelineConfig, build_config
from .errors import (
    CamforgeError,
    ChannelOutOfRange,
    DataError,
    EmptyRegion,
    MissingGroundTruth,
    NumericError,
    UsageError,
)
from .metrics import (
    ConfusionTally,
    accumulate,
    format_table,
    miou,
    report_dict,
    split_by_cooccurrence,
)
from .tensorio import load_manifest

CAM_KINDS = ("mt", "mes", "med")


def _add_common(p):
    p.add_argument("--manifest", help="dataset manifest JSON")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--seed", type=int, help="override every seed field at once")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE")
    p.add_argument("--jobs", type=int, default=1, help="parallel workers for per-sample stages")


def build_parser():
    parser = argparse.ArgumentParser(prog="camforge", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-cache", help="build the key-value cache from single-class samples")
    _add_common(p)
    p.add_argument("--cache-dir")

    p = sub.add_parser("gen-cam", help="write per-sample CAM tensors")
    _add_common(p)
    p.add_argument("--out-dir")
    p.add_argument("--cache-dir")
    p.add_argument("--adapter-dir")

    p = sub.add_parser("train", help="train the retrieval adapter")
    _add_common(p)
    p.add_argument("--cache-dir")
    p.add_argument("--adapter-dir")

    p = sub.add_parser("eval", help="score generated CAMs against ground truth")
    _add_common(p)
    p.add_argument("--cam-dir")
    p.add_argument("--kind", choices=CAM_KINDS, default="mt")
    p.add_argument("--out-dir", help="also write report JSON files here")

    p = sub.add_parser("heatmap", help="render one CAM channel as a PGM image")
    p.add_argument("--cam-file", required=True)
    p.add_argument("--channel", type=int, required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("ablate", help="sweep one config key and report mIoU per value")
    _add_common(p)
    p.add_argument("--key", required=True, metavar="SECTION.KEY")
    p.add_argument("--values", required=True, help="comma-separated list of values")
    p.add_argument("--out", required=True, help="output CSV")
    p.add_argument("--cache-dir")
    p.add_argument("--adapter-dir")
    return parser


def _config(args) -> PipelineConfig:
    return build_config(args.config, args.overrides, args.seed)


def _path(args, cfg, attr, required=False):
    """Dedicated flag first, then the config file's [paths] section."""
    value = getattr(args, attr, None) or getattr(cfg.paths, attr, "")
    if required and not value:
        flag = "--" + attr.replace("_", "-")
        raise UsageError(f"{flag} not given and paths.{attr} not configured")
    return value or None


def _map_samples(samples, fn, jobs):
    if jobs <= 1:
        return [fn(s) for s in samples]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, samples))


def _sample_context(sample_id, exc):
    """Re-raise with the sample id attached, keeping the exit-code family."""
    for family in (UsageError, NumericError, DataError):
        if isinstance(exc, family):
            return family(f"sample {sample_id}: {exc}")
    return CamforgeError(f"sample {sample_id}: {exc}")


def _build_cache(manifest, text, cfg: PipelineConfig, verbose=False) -> CacheModel:
    """Pool prototypes from the single-class samples and assemble the cache."""
    protos = PrototypeSet.empty(manifest.num_classes)
    for sample in manifest.cache_samples:
        try:
            (label,) = sample.image_labels
            p_e = enhance_features(sample, cfg.vce)
            m_t = generate_patch_text_cam(p_e, text, {label})
            mask = cam_to_mask(m_t, {label}, cfg.bg_threshold)
            try:
                protos.foreground[label].append(mask_average_pool(p_e, mask, label))
            except EmptyRegion:
                if verbose:
                    print(f"note: sample {sample.id} contributes no class-{label} prototype")
            try:
                protos.background.append(mask_average_pool(p_e, mask, None))
            except EmptyRegion:
                if verbose:
                    print(f"note: sample {sample.id} contributes no background prototype")
        except CamforgeError as exc:
            raise _sample_context(sample.id, exc) from exc
    k_pos, k_neg = build_keys(protos, cfg.retrieval)
    v_pos = build_values(k_pos, text)
    v_neg = negative_values(k_neg.shape[0], manifest.num_classes)
    return assemble_cache(k_pos, v_pos, k_neg, v_neg)


def cmd_build_cache(args) -> int:
    cfg = _config(args)
    manifest = load_manifest(_path(args, cfg, "manifest", required=True))
    cache_dir = _path(args, cfg, "cache_dir", required=True)
    if not manifest.cache_samples:
        raise UsageError("manifest has no cache_samples; nothing to build the cache from")
    text = manifest.load_text_embeddings()
    cache = _build_cache(manifest, text, cfg, verbose=True)
    cache.save(cache_dir, config_echo=cfg.to_dict())
    counts = cache.counts
    print(f"cache written to {cache_dir}: {counts['pos_rows']} positive rows, "
          f"{counts['neg_rows']} background rows")
    return 0


def _generate_sample_cams(sample, text, cfg, cache, adapter):
    p_e = enhance_features(sample, cfg.vce)
    m_t = generate_patch_text_cam(p_e, text, sample.image_labels)
    out = {"mt": m_t}
    if cache is not None:
        pos, neg = static_retrieve(p_e, cache, cfg.retrieval, sample.image_labels)
        out["mes"] = fuse_static(m_t, pos, neg, cfg.retrieval)
    if adapter is not None:
        logits, _ = adapter_forward(adapter, p_e)
        out["med"] = fuse_dynamic(m_t, logits, sample.image_labels, cfg.retrieval)
    return out


def cmd_gen_cam(args) -> int:
    cfg = _config(args)
    manifest = load_manifest(_path(args, cfg, "manifest", required=True))
    text = manifest.load_text_embeddings()
    cache_dir = _path(args, cfg, "cache_dir")
    adapter_dir = _path(args, cfg, "adapter_dir")
    cache = CacheModel.load(cache_dir) if cache_dir else None
    adapter = AdapterState.load(adapter_dir) if adapter_dir else None
    out_dir = Path(_path(args, cfg, "out_dir", required=True))
    out_dir.mkdir(parents=True, exist_ok=True)

    def emit(sample):
        try:
            cams = _generate_sample_cams(sample, text, cfg, cache, adapter)
        except CamforgeError as exc:
            raise _sample_context(sample.id, exc) from exc
        for kind, cam in cams.items():
            tensorio.write_tensor(cam.data.astype(np.float32), out_dir / f"{sample.id}_{kind}.cft")
        return len(cams)

    written = _map_samples(manifest.samples, emit, args.jobs)
    print(f"wrote {sum(written)} CAM files for {len(manifest.samples)} samples to {out_dir}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    manifest = load_manifest(_path(args, cfg, "manifest", required=True))
    cache = CacheModel.load(_path(args, cfg, "cache_dir", required=True))
    state, history = train_adapter(
        manifest, cache, cfg.train, cfg.vce, cfg.retrieval, bg_threshold=cfg.bg_threshold
    )
    out = Path(_path(args, cfg, "adapter_dir", required=True))
    state.save(out, config_echo=cfg.to_dict(), extra={"config_sha256": cfg.sha256()})
    with open(out / "loss.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        for step, loss in enumerate(history):
            writer.writerow([step, repr(loss)])
    print(f"adapter written to {out} after {state.step_count} steps")
    return 0


def _sample_tally(manifest, cam_dir, kind, cfg, sample):
    if sample.gt_mask_path is None:
        raise MissingGroundTruth(f"sample {sample.id} has no gt_mask_path")
    path = cam_dir / f"{sample.id}_{kind}.cft"
    data = tensorio.load_tensor(path).astype(np.float64)
    if data.ndim != 3:
        raise DataError(f"{path}: CAM tensor must be rank 3")
    pred = cam_to_mask(Cam(data=data, has_background=False), sample.image_labels, cfg.bg_threshold)
    gt = PseudoMask(labels=sample.load_gt_mask())
    tally = ConfusionTally.zeros(manifest.num_classes)
    return accumulate(tally, pred, gt)


def _eval_tallies(manifest, cam_dir, kind, cfg, jobs=1, sample_ids=None):
    cam_dir = Path(cam_dir)
    samples = [s for s in manifest.samples if sample_ids is None or s.id in sample_ids]
    parts = _map_samples(samples, lambda s: _sample_tally(manifest, cam_dir, kind, cfg, s), jobs)
    total = ConfusionTally.zeros(manifest.num_classes)
    for part in parts:  # merge is exact, so worker order cannot matter
        total = total + part
    return total


def cmd_eval(args) -> int:
    cfg = _config(args)
    manifest = load_manifest(_path(args, cfg, "manifest", required=True))
    cam_dir = _path(args, cfg, "cam_dir", required=True)
    overall = _eval_tallies(manifest, cam_dir, args.kind, cfg, args.jobs)
    single_ids, multi_ids = (set(ids) for ids in split_by_cooccurrence(manifest))
    reports = {"overall": overall}
    if single_ids:
        reports["single_class"] = _eval_tallies(manifest, cam_dir, args.kind, cfg, args.jobs, single_ids)
    if multi_ids:
        reports["co_occurrence"] = _eval_tallies(manifest, cam_dir, args.kind, cfg, args.jobs, multi_ids)
    for name, tally in reports.items():
        print(format_table(tally, manifest.class_names, title=f"{args.kind} {name}"))
        print()
    out_dir = _path(args, cfg, "out_dir")
    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        doc = {name: report_dict(t, manifest.class_names) for name, t in reports.items()}
        (out / f"report_{args.kind}.json").write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")
    return 0


def cmd_heatmap(args) -> int:
    data = tensorio.load_tensor(args.cam_file).astype(np.float64)
    if data.ndim != 3:
        raise DataError(f"{args.cam_file}: CAM tensor must be rank 3")
    h, w, c = data.shape
    if not 0 <= args.channel < c:
        raise ChannelOutOfRange(f"channel {args.channel} outside [0, {c})")
    plane = np.clip(data[:, :, args.channel], 0.0, 1.0)
    pixels = np.round(255.0 * plane).astype(np.uint8)
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    Path(args.out).write_bytes(header + pixels.tobytes())
    print(f"wrote {args.out}")
    return 0


def cmd_ablate(args) -> int:
    base_cfg = _config(args)
    manifest = load_manifest(_path(args, base_cfg, "manifest", required=True))
    text = manifest.load_text_embeddings()
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    if not values:
        raise UsageError("--values lists no values")
    rows = []
    for raw in values:
        cfg = build_config(args.config, list(args.overrides) + [f"{args.key}={raw}"], args.seed)
        cache_dir = _path(args, cfg, "cache_dir")
        adapter_dir = _path(args, cfg, "adapter_dir")
        if cache_dir:
            cache = CacheModel.load(cache_dir)
        elif manifest.cache_samples:
            cache = _build_cache(manifest, text, cfg)
        else:
            cache = None
        adapter = AdapterState.load(adapter_dir) if adapter_dir else None
        if cfg.mode == "trained" and adapter is None and cache is not None:
            state, _ = train_adapter(
                manifest, cache, cfg.train, cfg.vce, cfg.retrieval, bg_threshold=cfg.bg_threshold
            )
            adapter = state
        kind = "med" if adapter is not None else ("mes" if cache is not None else "mt")
        tally = ConfusionTally.zeros(manifest.num_classes)
        for sample in manifest.samples:
            if sample.gt_mask_path is None:
                raise MissingGroundTruth(f"sample {sample.id} has no gt_mask_path")
            cams = _generate_sample_cams(sample, text, cfg, cache, adapter)
            pred = cam_to_mask(cams[kind], sample.image_labels, cfg.bg_threshold)
            gt = PseudoMask(labels=sample.load_gt_mask())
            accumulate(tally, pred, gt)
        value_miou, _ = miou(tally)
        rows.append((args.key, raw, value_miou))
        print(f"{args.key}={raw}: mIoU {value_miou:.4f} ({kind})")
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["key", "value", "miou"])
        for key, raw, value_miou in rows:
            writer.writerow([key, raw, repr(value_miou)])
    return 0


_COMMANDS = {
    "build-cache": cmd_build_cache,
    "gen-cam": cmd_gen_cam,
    "train": cmd_train,
    "eval": cmd_eval,
    "heatmap": cmd_heatmap,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 4
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
