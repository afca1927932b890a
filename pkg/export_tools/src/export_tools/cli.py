"""Command-line entry points for the export tools."""

from __future__ import annotations

import argparse
import json
import sys

from .synthetic import SyntheticSpec, dataset_digest, gen_synthetic


def main_gen_synthetic(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="camforge-gen-synthetic",
        description="Write a deterministic planted-structure dataset.",
    )
    parser.add_argument("--out", required=True)
    parser.add_argument("--classes", type=int, default=4)
    parser.add_argument("--grid", type=int, default=8)
    parser.add_argument("--dim", type=int, default=16)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--noise", type=float, default=0.0)
    parser.add_argument("--cache-per-class", type=int, default=3)
    parser.add_argument("--samples", type=int, default=6)
    parser.add_argument("--layers", type=int, default=3)
    parser.add_argument("--digest", action="store_true", help="print the dataset digest")
    args = parser.parse_args(argv)
    spec = SyntheticSpec(
        num_classes=args.classes,
        grid=args.grid,
        feature_dim=args.dim,
        seed=args.seed,
        noise=args.noise,
        cache_per_class=args.cache_per_class,
        num_samples=args.samples,
        layers=args.layers,
    )
    manifest = gen_synthetic(args.out, spec)
    print(f"wrote {manifest}")
    if args.digest:
        print(dataset_digest(manifest))
    return 0


def main_export_real(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="camforge-export-real",
        description="Export tensors from frozen encoders; needs the [real] extra installed.",
    )
    parser.add_argument("--out", required=True)
    parser.add_argument("--images", required=True,
                        help="JSON file: list of [id, image_path, [labels...]] triples")
    parser.add_argument("--class-names", required=True, help="comma-separated class names")
    parser.add_argument("--clip-model", default="openai/clip-vit-base-patch16")
    parser.add_argument("--sd-model", default="stabilityai/stable-diffusion-2-1")
    parser.add_argument("--grid", type=int, default=14)
    parser.add_argument("--layers", type=int, default=3)
    parser.add_argument("--device", default="cpu")
    args = parser.parse_args(argv)

    from .real import ExportJob, export_real

    with open(args.images) as fh:
        images = [(i, p, set(ls)) for i, p, ls in json.load(fh)]
    job = ExportJob(
        output_dir=args.out,
        clip_model=args.clip_model,
        sd_model=args.sd_model,
        grid=args.grid,
        layers=args.layers,
        class_names=args.class_names.split(","),
        device=args.device,
    )
    manifest = export_real(images, job)
    print(f"wrote {manifest}")
    return 0


if __name__ == "__main__":
    sys.exit(main_gen_synthetic())
