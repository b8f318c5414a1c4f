"""Command-line surface: mask, run, assess, eval.

Every command is a pure function of its inputs, flags and seeds; reruns
write byte-identical artifacts for any --jobs value.  Stage failures map
to fixed exit codes: 2 usage/input, 3 no matching entity, 4 backend
unreachable, 5 retouch failure, 6 assessment failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import __version__
from .artifacts import (
    atomic_write_json,
    image_file_bytes,
    atomic_write_bytes,
    mask_file_bytes,
)
from .assessment import AssessmentConfig, assess
from .backends import resolve_backend
from .core import TextPrompt
from .diffusion import (
    DEFAULT_PROPOSALS,
    DEFAULT_TIMESTEPS,
    RetouchConfig,
    build_schedule,
    retouch,
)
from .errors import (
    BackendError,
    FileFormatError,
    NoMatchingEntityError,
    RetouchError,
    TransportError,
)
from .imageio import read_image
from .mask_gen import DEFAULT_SCORE_FLOOR, MaskGenConfig, generate_mask
from .metrics import VARIANTS, evaluate_manifest, load_manifest
from .report import (
    render_metrics_figure,
    render_scores_figure,
    write_metrics_csv,
    write_scores_csv,
)

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NO_MATCH = 3
EXIT_BACKEND = 4
EXIT_RETOUCH = 5
EXIT_ASSESS = 6


def _fail(code: int, message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def _resolve(args, schedule=None):
    return resolve_backend(args.backend, schedule=schedule)


def _mask_config(args) -> MaskGenConfig:
    return MaskGenConfig(
        floor=args.floor,
        fixed_tau=getattr(args, "fixed_tau", None),
        crop_to_bbox=getattr(args, "crop_bbox", False),
        jobs=args.jobs,
    )


def _retouch_config(args) -> RetouchConfig:
    """Resolve the proposal-loop config: file values first, flags override."""
    base = RetouchConfig.from_file(args.config) if args.config else RetouchConfig()
    m = args.m if args.m is not None else base.proposals
    timesteps = args.timesteps if args.timesteps is not None else base.timesteps
    eta = args.eta if args.eta is not None else base.eta
    beta_start = args.beta_start if args.beta_start is not None else base.beta_start
    beta_end = args.beta_end if args.beta_end is not None else base.beta_end
    if args.seed is not None:
        seeds = tuple(args.seed + k for k in range(m))
    elif args.config and len(base.seeds) == m:
        seeds = base.seeds
    else:
        seeds = tuple(range(m))
    return RetouchConfig(proposals=m, timesteps=timesteps, eta=eta, seeds=seeds,
                         beta_start=beta_start, beta_end=beta_end)


def cmd_mask(args) -> int:
    try:
        image = read_image(args.image)
    except FileFormatError as exc:
        return _fail(EXIT_USAGE, str(exc))
    try:
        bundle = _resolve(args, schedule=build_schedule(DEFAULT_TIMESTEPS))
    except ValueError as exc:
        return _fail(EXIT_USAGE, str(exc))
    except (TransportError, BackendError) as exc:
        return _fail(EXIT_BACKEND, str(exc))

    out_path = Path(args.out)
    report_path = Path(args.report) if args.report else out_path.with_suffix(".json")
    query = TextPrompt(args.query, role="query")
    with bundle:
        try:
            region, mask_report = generate_mask(
                image, query, bundle.segmenter,
                bundle.text_embedder, bundle.image_embedder, _mask_config(args),
            )
        except NoMatchingEntityError as exc:
            payload = {
                "command": "mask", "query": args.query,
                "backend": bundle.descriptor, "no_match": True,
                "mask": exc.report.to_dict() if exc.report else None,
                "artifacts": [str(report_path)],
            }
            atomic_write_json(report_path, payload)
            return _fail(EXIT_NO_MATCH, f"no matching entity; audit in {report_path}")
        except (TransportError, BackendError) as exc:
            return _fail(EXIT_BACKEND, str(exc))

    atomic_write_bytes(out_path, mask_file_bytes(region, out_path.suffix.lower()))
    payload = {
        "command": "mask", "query": args.query, "backend": bundle.descriptor,
        "no_match": False, "mask": mask_report.to_dict(),
        "mask_path": str(out_path),
        "artifacts": [str(out_path), str(report_path)],
    }
    atomic_write_json(report_path, payload)
    print(f"mask written to {out_path} ({region.count()} px), audit in {report_path}")
    return EXIT_OK


def cmd_run(args) -> int:
    try:
        image = read_image(args.image)
    except FileFormatError as exc:
        return _fail(EXIT_USAGE, str(exc))
    try:
        config = _retouch_config(args)
    except (OSError, ValueError) as exc:
        return _fail(EXIT_USAGE, f"bad retouch config: {exc}")
    try:
        bundle = _resolve(
            args, schedule=build_schedule(config.timesteps, config.beta_start,
                                          config.beta_end))
    except ValueError as exc:
        return _fail(EXIT_USAGE, str(exc))
    except (TransportError, BackendError) as exc:
        return _fail(EXIT_BACKEND, str(exc))

    out_dir = Path(args.out_dir)
    query = TextPrompt(args.query, role="query")
    conditional = TextPrompt(args.text, role="conditional")

    with bundle:
        try:
            region, mask_report = generate_mask(
                image, query, bundle.segmenter,
                bundle.text_embedder, bundle.image_embedder, _mask_config(args),
            )
        except NoMatchingEntityError as exc:
            report_path = out_dir / "report.json"
            atomic_write_json(report_path, {
                "command": "run", "no_match": True,
                "backend": bundle.descriptor,
                "mask": exc.report.to_dict() if exc.report else None,
                "artifacts": [str(report_path)],
            })
            return _fail(EXIT_NO_MATCH, f"no matching entity; audit in {report_path}")
        except (TransportError, BackendError) as exc:
            return _fail(EXIT_BACKEND, str(exc))

        try:
            proposals = retouch(
                image, region, conditional, bundle.codec, bundle.denoiser,
                config, jobs=args.jobs,
            )
        except RetouchError as exc:
            return _fail(EXIT_RETOUCH, f"retouch stage failed: {exc}")

        try:
            selection = assess(
                image, [p.image for p in proposals], conditional,
                bundle.text_embedder, bundle.image_embedder,
                AssessmentConfig(alpha=args.alpha, enable_cma=not args.no_cma,
                                 enable_iqa=not args.no_iqa),
            )
        except (RetouchError, ValueError) as exc:
            return _fail(EXIT_ASSESS, f"assessment stage failed: {exc}")

    # report paths are relative to out_dir so reruns into different
    # directories produce byte-identical artifacts
    mask_path = out_dir / "mask.png"
    atomic_write_bytes(mask_path, mask_file_bytes(region, ".png"))
    proposal_paths = []
    for p in proposals:
        rel = f"proposals/proposal_{p.index}.png"
        atomic_write_bytes(out_dir / rel, image_file_bytes(p.image, ".png"))
        proposal_paths.append((p, rel))
    selected = proposals[selection.chosen]
    selected_path = out_dir / "selected.png"
    atomic_write_bytes(selected_path, image_file_bytes(selected.image, ".png"))
    write_scores_csv(selection, out_dir / "scores.csv")
    render_scores_figure(selection, out_dir / "scores.png")
    report_path = out_dir / "report.json"

    artifacts = ["mask.png"] + [rel for _, rel in proposal_paths]
    artifacts += ["selected.png", "scores.csv", "scores.png", "report.json"]
    atomic_write_json(report_path, {
        "command": "run",
        "no_match": False,
        "config": {
            "query": args.query, "text": args.text,
            "proposals": config.proposals, "timesteps": config.timesteps,
            "eta": config.eta, "alpha": args.alpha, "seeds": list(config.seeds),
            "beta_start": config.beta_start, "beta_end": config.beta_end,
            "floor": args.floor, "fixed_tau": args.fixed_tau,
            "enable_cma": not args.no_cma, "enable_iqa": not args.no_iqa,
        },
        "backend": bundle.descriptor,
        "mask": mask_report.to_dict(),
        "mask_path": "mask.png",
        "proposals": [
            {"index": p.index, "seed": p.seed, "path": rel}
            for p, rel in proposal_paths
        ],
        "failed_proposals": config.proposals - len(proposals),
        "selection": selection.to_dict(),
        "selected_path": "selected.png",
        "artifacts": artifacts,
    })
    print(f"selected proposal {selection.chosen} -> {selected_path}")
    print(f"report: {report_path}")
    return EXIT_OK


def cmd_assess(args) -> int:
    try:
        original = read_image(args.original)
    except FileFormatError as exc:
        return _fail(EXIT_USAGE, str(exc))
    proposals_dir = Path(args.proposals)
    candidates = sorted(
        p for p in proposals_dir.glob("*")
        if p.suffix.lower() in (".png", ".ppm")
    )
    if not candidates:
        return _fail(EXIT_USAGE, f"no proposal images in {proposals_dir}")
    images, names = [], []
    for path in candidates:
        try:
            images.append(read_image(path))
            names.append(path.name)
        except FileFormatError as exc:
            log.warning("skipping unreadable proposal %s: %s", path, exc)
    if not images:
        return _fail(EXIT_ASSESS, "all proposal images were unreadable")

    try:
        bundle = _resolve(args, schedule=build_schedule(DEFAULT_TIMESTEPS))
    except ValueError as exc:
        return _fail(EXIT_USAGE, str(exc))
    except (TransportError, BackendError) as exc:
        return _fail(EXIT_BACKEND, str(exc))

    with bundle:
        try:
            selection = assess(
                original, images, TextPrompt(args.text, role="conditional"),
                bundle.text_embedder, bundle.image_embedder,
                AssessmentConfig(alpha=args.alpha, enable_cma=not args.no_cma,
                                 enable_iqa=not args.no_iqa),
            )
        except (RetouchError, ValueError) as exc:
            return _fail(EXIT_ASSESS, str(exc))

    print(f"{'proposal':<28} {'cma':>10} {'iqa':>10} {'combined':>10}")
    for s in selection.scores:
        marker = "*" if s.proposal_index == selection.chosen else " "
        print(f"{marker}{names[s.proposal_index]:<27} {s.cma:>10.6f} "
              f"{s.iqa:>10.6f} {s.combined:>10.6f}")
    print(f"chosen: {selection.chosen} ({names[selection.chosen]})")

    if args.out:
        out_dir = Path(args.out)
        report_path = out_dir / "assess_report.json"
        write_scores_csv(selection, out_dir / "scores.csv")
        render_scores_figure(selection, out_dir / "scores.png")
        atomic_write_json(report_path, {
            "command": "assess",
            "config": {"alpha": args.alpha, "enable_cma": not args.no_cma,
                       "enable_iqa": not args.no_iqa, "text": args.text},
            "backend": bundle.descriptor,
            "proposals": names,
            "selection": selection.to_dict(),
            "artifacts": ["scores.csv", "scores.png", "assess_report.json"],
        })
        print(f"report: {report_path}")
    return EXIT_OK


def _parse_variants(spec: str):
    if spec == "all":
        return VARIANTS
    by_name = {name: (name, cma, iqa) for name, cma, iqa in VARIANTS}
    chosen = []
    for name in spec.split(","):
        name = name.strip()
        if name not in by_name:
            raise ValueError(
                f"unknown variant {name!r}; pick from {sorted(by_name)} or 'all'"
            )
        chosen.append(by_name[name])
    return chosen


def cmd_eval(args) -> int:
    try:
        entries = load_manifest(args.manifest)
        variants = _parse_variants(args.variants)
        config = _retouch_config(args)
    except (OSError, ValueError) as exc:
        return _fail(EXIT_USAGE, str(exc))
    try:
        bundle = _resolve(
            args, schedule=build_schedule(config.timesteps, config.beta_start,
                                          config.beta_end))
    except ValueError as exc:
        return _fail(EXIT_USAGE, str(exc))
    except (TransportError, BackendError) as exc:
        return _fail(EXIT_BACKEND, str(exc))

    with bundle:
        reports = evaluate_manifest(
            entries, bundle, retouch_config=config,
            mask_config=MaskGenConfig(floor=args.floor, jobs=args.jobs),
            alpha=args.alpha, variants=variants, jobs=args.jobs,
        )

    out_dir = Path(args.out)
    report_path = out_dir / "report.json"
    write_metrics_csv(reports, out_dir / "metrics.csv")
    render_metrics_figure(reports, out_dir / "metrics.png")
    atomic_write_json(report_path, {
        "command": "eval",
        "manifest": str(args.manifest),
        "backend": bundle.descriptor,
        "variants": [r.to_dict() for r in reports],
        "artifacts": ["metrics.csv", "metrics.png", "report.json"],
    })
    for r in reports:
        excl = f", excluded {r.excluded}" if r.excluded else ""
        print(f"{r.variant:<8} ssim={r.mean('ssim'):.4f} "
              f"psnr={r.mean('psnr'):.4f} mse={r.mean('mse'):.6f}{excl}")
    print(f"report: {report_path}")
    return EXIT_OK


def _add_backend_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--backend", default=None,
                   help="backend descriptor (default: $RETOUCH_BACKEND or 'mock')")
    p.add_argument("--jobs", type=int, default=1,
                   help="max concurrent proposals/embeddings (output is jobs-invariant)")


def _add_retouch_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None,
                   help="JSON config file {m, T, eta, beta_start, beta_end, seeds[]}; "
                        "explicit flags override it")
    p.add_argument("--m", dest="m", type=int, default=None,
                   help=f"number of proposals (default {DEFAULT_PROPOSALS})")
    p.add_argument("--T", dest="timesteps", type=int, default=None,
                   help=f"denoising steps (default {DEFAULT_TIMESTEPS})")
    p.add_argument("--eta", type=float, default=None,
                   help="stochasticity in [0,1] (default 0 = deterministic sampler)")
    p.add_argument("--alpha", type=float, default=5.0,
                   help="fidelity-penalty weight in selection")
    p.add_argument("--seed", type=int, default=None,
                   help="base seed; proposal k uses seed+k (default 0)")
    p.add_argument("--beta-start", type=float, default=None)
    p.add_argument("--beta-end", type=float, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="retouch",
        description="Text-guided local image retouching without hand-drawn masks",
    )
    parser.add_argument("--version", action="version", version=f"retouch {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mask", help="propose the editable region for a query")
    p.add_argument("--image", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--out", required=True, help="mask output (.png or .pgm)")
    p.add_argument("--report", default=None, help="audit JSON path (default: out with .json)")
    p.add_argument("--floor", type=float, default=DEFAULT_SCORE_FLOOR,
                   help="absolute score floor for selection")
    p.add_argument("--fixed-tau", type=float, default=None,
                   help="bypass the adaptive rule with a fixed threshold")
    p.add_argument("--crop-bbox", action="store_true",
                   help="crop entities to their bounding box before embedding")
    _add_backend_args(p)
    p.set_defaults(func=cmd_mask)

    p = sub.add_parser("run", help="mask, retouch and pick the best proposal")
    p.add_argument("--image", required=True)
    p.add_argument("--query", required=True, help="which region to edit")
    p.add_argument("--text", required=True, help="what to generate there")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--floor", type=float, default=DEFAULT_SCORE_FLOOR)
    p.add_argument("--fixed-tau", type=float, default=None)
    p.add_argument("--crop-bbox", action="store_true")
    p.add_argument("--no-cma", action="store_true")
    p.add_argument("--no-iqa", action="store_true")
    _add_retouch_args(p)
    _add_backend_args(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("assess", help="rank existing proposal images")
    p.add_argument("--original", required=True)
    p.add_argument("--proposals", required=True, help="directory of proposal images")
    p.add_argument("--text", required=True)
    p.add_argument("--alpha", type=float, default=5.0)
    p.add_argument("--no-cma", action="store_true")
    p.add_argument("--no-iqa", action="store_true")
    p.add_argument("--out", default=None, help="directory for report artifacts")
    _add_backend_args(p)
    p.set_defaults(func=cmd_assess)

    p = sub.add_parser("eval", help="manifest-driven metric harness")
    p.add_argument("--manifest", required=True)
    p.add_argument("--variants", default="all",
                   help="'all' or comma list of none,cma,iqa,cma+iqa")
    p.add_argument("--out", required=True)
    p.add_argument("--floor", type=float, default=DEFAULT_SCORE_FLOOR)
    _add_retouch_args(p)
    _add_backend_args(p)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except RetouchError as exc:
        return _fail(EXIT_USAGE, str(exc))


if __name__ == "__main__":
    sys.exit(main())
