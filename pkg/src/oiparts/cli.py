"""Batch command-line front end: select, segment, refine, eval, synth.

Exit codes: 0 on success, 2 on validation/format/shape errors (the message
names the offending input), 3 when --strict is set and the solver fails to
converge.  Every command writes a manifest next to its outputs recording the
resolved configuration; identical inputs and flags reproduce identical output
bytes (manifest timings aside).
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
import warnings
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import __version__
from .errors import FormatError, ShapeError, SolverDidNotConverge, ValidationError
from .evaluate import ConfusionMatrix, accumulate, iou_report
from .fusion import fuse
from .palette import blend_overlay
from .refine import SolverConfig, build_grid, refine_scores, solve
from .selection import SelectionConfig, select_for_example
from .synth import GENERATOR_NAME, LAYOUTS, SynthSpec, generate
from .tensor_io import (
    METRICS,
    downsample_mask,
    load_mask_set,
    load_selection,
    read_image,
    read_labels,
    read_plane,
    read_tensor,
    save_selection,
    write_image,
    write_labels,
    write_tensor,
)
from .transfer import TransferConfig, argmax_labels, finalize, segment


class _Timer:
    def __init__(self):
        self.timing: dict[str, float] = {}

    @contextmanager
    def stage(self, name: str):
        start = time.perf_counter()
        yield
        self.timing[name] = round(time.perf_counter() - start, 6)


def _resolve_threads(value: int | None) -> int:
    if value is not None:
        return max(1, value)
    env = os.environ.get("OIPARTS_THREADS")
    return max(1, int(env)) if env else 1


def _write_manifest(out_dir: Path, command: str, *, config, inputs, outputs,
                    captured_warnings, timing, extra=None) -> None:
    payload = {
        "tool": "oiparts",
        "version": __version__,
        "command": command,
        "config": config,
        "inputs": inputs,
        "outputs": outputs,
        "warnings": captured_warnings,
    }
    if extra:
        payload.update(extra)
    payload["timing_s"] = timing
    (out_dir / "manifest.json").write_text(json.dumps(payload, indent=2) + "\n")


def _solver_config(args) -> SolverConfig:
    return SolverConfig(
        sigma_spatial=args.sigma_spatial,
        sigma_luma=args.sigma_luma,
        sigma_chroma=args.sigma_chroma,
        lam=args.lam,
        cg_max_iters=args.cg_max_iters,
        cg_tol=args.cg_tol,
        bistoch_iters=args.bistoch_iters,
    )


def _solver_config_dict(cfg: SolverConfig) -> dict:
    return {
        "sigma_spatial": cfg.sigma_spatial,
        "sigma_luma": cfg.sigma_luma,
        "sigma_chroma": cfg.sigma_chroma,
        "lambda": cfg.lam,
        "cg_max_iters": cfg.cg_max_iters,
        "cg_tol": cfg.cg_tol,
        "bistoch_iters": cfg.bistoch_iters,
    }


def _add_solver_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--sigma-spatial", type=float, default=8.0)
    p.add_argument("--sigma-luma", type=float, default=8.0)
    p.add_argument("--sigma-chroma", type=float, default=8.0)
    p.add_argument("--lambda", dest="lam", type=float, default=128.0)
    p.add_argument("--cg-max-iters", type=int, default=25)
    p.add_argument("--cg-tol", type=float, default=1e-5)
    p.add_argument("--bistoch-iters", type=int, default=10)


def _parse_k_grid(text: str | None) -> tuple[int, ...] | None:
    if text is None:
        return None
    try:
        return tuple(int(tok) for tok in text.split(",") if tok.strip())
    except ValueError:
        raise ValidationError(f"cannot parse k grid {text!r}; expected e.g. 1,2,4") from None


def _load_reference(args, timer: _Timer):
    with timer.stage("load"):
        ref_sd = read_tensor(args.ref_sd, source="sd")
        ref_dino = read_tensor(args.ref_dino, source="dino")
        masks_full = load_mask_set(args.ref_labels, args.names)
    with timer.stage("fuse_ref"):
        fused_r = fuse(ref_sd, ref_dino)
    with timer.stage("downsample_mask"):
        masks_feat = downsample_mask(
            masks_full, fused_r.map.height, fused_r.map.width
        )
    return fused_r, masks_full, masks_feat


def _cmd_select(args) -> int:
    timer = _Timer()
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        fused_r, _, masks_feat = _load_reference(args, timer)
        cfg = SelectionConfig(metric=args.metric, k_grid=_parse_k_grid(args.k_grid))
        with timer.stage("select"):
            record = select_for_example(fused_r, masks_feat, cfg)
        with timer.stage("write"):
            save_selection(record, out_dir / "selection.json")
    _write_manifest(
        out_dir,
        "select",
        config={"metric": args.metric, "k_grid": args.k_grid},
        inputs={
            "ref_sd": args.ref_sd,
            "ref_dino": args.ref_dino,
            "ref_labels": args.ref_labels,
            "names": args.names,
        },
        outputs={"selection": "selection.json"},
        captured_warnings=[str(w.message) for w in caught],
        timing=timer.timing,
    )
    return 0


def _cmd_segment(args) -> int:
    timer = _Timer()
    threads = _resolve_threads(args.threads)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    solver_cfg = _solver_config(args)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        fused_r, _, masks_feat = _load_reference(args, timer)
        with timer.stage("load_query"):
            query_sd = read_tensor(args.query_sd, source="sd")
            query_dino = read_tensor(args.query_dino, source="dino")
            guide = read_image(args.query_image)
        with timer.stage("fuse_query"):
            fused_q = fuse(query_sd, query_dino)

        record = None
        selection_mode = "disabled"
        if not args.no_selection:
            sel_path = Path(args.selection) if args.selection else None
            if sel_path is not None and sel_path.exists():
                with timer.stage("select"):
                    record = load_selection(sel_path)
                selection_mode = "loaded"
            else:
                sel_cfg = SelectionConfig(
                    metric=args.metric, k_grid=_parse_k_grid(args.k_grid)
                )
                with timer.stage("select"):
                    record = select_for_example(fused_r, masks_feat, sel_cfg)
                selection_mode = "computed"
                save_selection(record, out_dir / "selection.json")
                if sel_path is not None:
                    save_selection(record, sel_path)

        transfer_cfg = TransferConfig(
            beta=args.beta,
            use_selection=not args.no_selection,
            upsample_to=(guide.height, guide.width),
        )
        with timer.stage("transfer"):
            scores = segment(fused_q, fused_r, masks_feat, record, transfer_cfg, threads)
        with timer.stage("upsample"):
            labels, upsampled = finalize(scores, transfer_cfg)

        solver_report = None
        if not args.no_fbs:
            with timer.stage("refine"):
                refined, infos = refine_scores(upsampled, guide, solver_cfg, threads)
            labels = argmax_labels(refined)
            final_scores = refined
            solver_report = [
                {"converged": i.converged, "iterations": i.iterations,
                 "residual": i.residual}
                for i in infos
            ]
            stragglers = [c for c, i in enumerate(infos) if not i.converged]
            if stragglers:
                if args.strict:
                    raise SolverDidNotConverge(
                        f"solver hit the iteration cap on planes {stragglers}"
                    )
                warnings.warn(
                    f"solver hit the iteration cap on planes {stragglers}",
                    UserWarning,
                )
        else:
            final_scores = upsampled

        with timer.stage("write"):
            write_labels(labels.labels, out_dir / "labels.npy")
            write_tensor(np.moveaxis(final_scores.planes, 0, 2), out_dir / "scores.npy")
            write_image(blend_overlay(guide.data, labels.labels), out_dir / "overlay.ppm")

    outputs = {
        "labels": "labels.npy",
        "scores": "scores.npy",
        "overlay": "overlay.ppm",
    }
    if selection_mode == "computed":
        outputs["selection"] = "selection.json"
    _write_manifest(
        out_dir,
        "segment",
        config={
            "beta": args.beta,
            "use_selection": not args.no_selection,
            "fbs": not args.no_fbs,
            "metric": args.metric,
            "k_grid": args.k_grid,
            "selection_mode": selection_mode,
            "solver": _solver_config_dict(solver_cfg),
        },
        inputs={
            "ref_sd": args.ref_sd,
            "ref_dino": args.ref_dino,
            "ref_labels": args.ref_labels,
            "names": args.names,
            "query_sd": args.query_sd,
            "query_dino": args.query_dino,
            "query_image": args.query_image,
            "selection": args.selection,
        },
        outputs=outputs,
        captured_warnings=[str(w.message) for w in caught],
        timing=timer.timing,
        extra={"solver_report": solver_report},
    )
    return 0


def _cmd_refine(args) -> int:
    timer = _Timer()
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    solver_cfg = _solver_config(args)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        with timer.stage("load"):
            target = read_plane(args.target)
            guide = read_image(args.guide)
            if args.confidence:
                confidence = read_plane(args.confidence)
            else:
                confidence = np.ones_like(target)
        with timer.stage("solve"):
            grid = build_grid(guide, solver_cfg)
            plane, info = solve(grid, target, confidence, solver_cfg)
        if not info.converged and args.strict:
            raise SolverDidNotConverge(
                f"solver stopped at residual {info.residual:.3e} after "
                f"{info.iterations} iterations"
            )
        with timer.stage("write"):
            write_tensor(plane.astype(np.float32), out_path)
    _write_manifest(
        out_path.parent,
        "refine",
        config={"solver": _solver_config_dict(solver_cfg)},
        inputs={
            "target": args.target,
            "guide": args.guide,
            "confidence": args.confidence,
        },
        outputs={"refined": out_path.name},
        captured_warnings=[str(w.message) for w in caught],
        timing=timer.timing,
        extra={
            "solver_report": [
                {
                    "converged": info.converged,
                    "iterations": info.iterations,
                    "residual": info.residual,
                }
            ]
        },
    )
    return 0


def _cmd_eval(args) -> int:
    timer = _Timer()
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = json.loads(Path(args.names).read_text())
    if not isinstance(names, list) or not all(isinstance(n, str) for n in names):
        raise FormatError(f"{args.names}: expected a JSON array of strings")

    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    pred_stems = {p.stem: p for p in sorted(pred_dir.glob("*.npy"))}
    gt_stems = {p.stem: p for p in sorted(gt_dir.glob("*.npy"))}
    missing_gt = sorted(set(pred_stems) - set(gt_stems))
    missing_pred = sorted(set(gt_stems) - set(pred_stems))
    if missing_gt or missing_pred:
        raise ValidationError(
            "unmatched stems: "
            f"predictions without ground truth {missing_gt}, "
            f"ground truth without predictions {missing_pred}"
        )

    total = ConfusionMatrix.empty(len(names))
    per_image = {}
    with timer.stage("accumulate"):
        for stem in sorted(pred_stems):
            gt = read_labels(gt_stems[stem])
            pred = read_labels(pred_stems[stem])
            cm = accumulate(ConfusionMatrix.empty(len(names)), gt, pred)
            per_image[stem] = iou_report(cm, names)
            total.counts += cm.counts

    aggregate = iou_report(total, names)
    with timer.stage("write"):
        lines = [aggregate.to_text(), "per-image mIoU:"]
        for stem, report in per_image.items():
            miou = f"{report.miou:.6f}" if report.miou is not None else "n/a"
            lines.append(f"  {stem}  {miou}")
        (out_dir / "report.txt").write_text("\n".join(lines) + "\n")
        (out_dir / "report.csv").write_text(aggregate.to_csv())
        payload = {
            "aggregate": json.loads(aggregate.to_json()),
            "per_image": {
                stem: json.loads(report.to_json())
                for stem, report in per_image.items()
            },
        }
        (out_dir / "report.json").write_text(json.dumps(payload, indent=2) + "\n")
    _write_manifest(
        out_dir,
        "eval",
        config={},
        inputs={"pred": args.pred, "gt": args.gt, "names": args.names},
        outputs={"text": "report.txt", "csv": "report.csv", "json": "report.json"},
        captured_warnings=[],
        timing=timer.timing,
        extra={"images": len(per_image)},
    )
    print(aggregate.to_text(), end="")
    return 0


def _cmd_synth(args) -> int:
    timer = _Timer()
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    spec = SynthSpec(
        seed=args.seed,
        height=args.height,
        width=args.width,
        channels_per_source={"sd": args.sd_channels, "dino": args.dino_channels},
        num_parts=args.parts,
        layout=args.layout,
        prototype_separation=args.separation,
        noise_sigma=args.noise_sigma,
        distractor_channels=args.distractors,
    )
    with timer.stage("generate"):
        fixture = generate(spec)
    with timer.stage("write"):
        files = write_fixture(fixture, out_dir)
    _write_manifest(
        out_dir,
        "synth",
        config={
            "seed": spec.seed,
            "height": spec.height,
            "width": spec.width,
            "channels_per_source": spec.channels_per_source,
            "num_parts": spec.num_parts,
            "layout": spec.layout,
            "prototype_separation": spec.prototype_separation,
            "noise_sigma": spec.noise_sigma,
            "distractor_channels": spec.distractor_channels,
            "generator": GENERATOR_NAME,
        },
        inputs={},
        outputs=files,
        captured_warnings=[],
        timing=timer.timing,
    )
    return 0


def write_fixture(fixture, out_dir: Path) -> dict[str, str]:
    """Write every fixture artifact into `out_dir`; returns the file map."""
    out_dir = Path(out_dir)
    files = {}
    for source, fmap in fixture.ref_features.items():
        name = f"ref_{source}.npy"
        write_tensor(fmap, out_dir / name)
        files[f"ref_{source}"] = name
    for source, fmap in fixture.query_features.items():
        name = f"query_{source}.npy"
        write_tensor(fmap, out_dir / name)
        files[f"query_{source}"] = name
    write_labels(fixture.ref_labels, out_dir / "ref_labels.npy")
    write_labels(fixture.query_labels, out_dir / "query_labels.npy")
    (out_dir / "names.json").write_text(json.dumps(list(fixture.part_names)) + "\n")
    write_image(fixture.ref_guide, out_dir / "ref_guide.ppm")
    write_image(fixture.query_guide, out_dir / "query_guide.ppm")
    files.update(
        {
            "ref_labels": "ref_labels.npy",
            "query_labels": "query_labels.npy",
            "names": "names.json",
            "ref_guide": "ref_guide.ppm",
            "query_guide": "query_guide.ppm",
        }
    )
    return files


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="oiparts",
        description="one-shot part segmentation from a single labeled example",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_reference_flags(p):
        p.add_argument("--ref-sd", required=True, help="reference sd features (NPY)")
        p.add_argument("--ref-dino", required=True, help="reference dino features (NPY)")
        p.add_argument("--ref-labels", required=True, help="reference label map (uint8 NPY)")
        p.add_argument("--names", required=True, help="part names (JSON array)")

    p_select = sub.add_parser("select", help="compute a channel-selection record")
    add_reference_flags(p_select)
    p_select.add_argument("--metric", choices=METRICS, default="variance")
    p_select.add_argument("--k-grid", default=None, help="comma-separated candidate K values")
    p_select.add_argument("--out-dir", required=True)
    p_select.set_defaults(func=_cmd_select)

    p_seg = sub.add_parser("segment", help="segment a query against one labeled example")
    add_reference_flags(p_seg)
    p_seg.add_argument("--query-sd", required=True)
    p_seg.add_argument("--query-dino", required=True)
    p_seg.add_argument("--query-image", required=True, help="query RGB image (PPM)")
    p_seg.add_argument("--beta", type=float, default=0.1, help="softmax temperature")
    p_seg.add_argument("--no-selection", action="store_true",
                       help="use every channel for every part")
    p_seg.add_argument("--no-fbs", action="store_true", help="skip edge-aware refinement")
    p_seg.add_argument("--selection", default=None,
                       help="selection record path: loaded if present, else computed and saved there")
    p_seg.add_argument("--metric", choices=METRICS, default="variance")
    p_seg.add_argument("--k-grid", default=None)
    p_seg.add_argument("--threads", type=int, default=None,
                       help="worker threads (default: OIPARTS_THREADS or 1)")
    p_seg.add_argument("--strict", action="store_true",
                       help="exit 3 if the solver does not converge")
    p_seg.add_argument("--out-dir", required=True)
    _add_solver_flags(p_seg)
    p_seg.set_defaults(func=_cmd_segment)

    p_ref = sub.add_parser("refine", help="solve one score plane against a guide image")
    p_ref.add_argument("--target", required=True, help="score plane (float32 NPY)")
    p_ref.add_argument("--guide", required=True, help="guide image (PPM)")
    p_ref.add_argument("--confidence", default=None, help="confidence plane (float32 NPY)")
    p_ref.add_argument("--strict", action="store_true")
    p_ref.add_argument("--out", required=True)
    _add_solver_flags(p_ref)
    p_ref.set_defaults(func=_cmd_refine)

    p_eval = sub.add_parser("eval", help="score predicted label maps against ground truth")
    p_eval.add_argument("--pred", required=True, help="directory of predicted label NPYs")
    p_eval.add_argument("--gt", required=True, help="directory of ground-truth label NPYs")
    p_eval.add_argument("--names", required=True)
    p_eval.add_argument("--out-dir", required=True)
    p_eval.set_defaults(func=_cmd_eval)

    p_synth = sub.add_parser("synth", help="write a synthetic fixture directory")
    p_synth.add_argument("--seed", type=int, required=True)
    p_synth.add_argument("--height", type=int, default=24)
    p_synth.add_argument("--width", type=int, default=24)
    p_synth.add_argument("--sd-channels", type=int, default=16)
    p_synth.add_argument("--dino-channels", type=int, default=16)
    p_synth.add_argument("--parts", type=int, default=4)
    p_synth.add_argument("--layout", choices=LAYOUTS, default="stripes")
    p_synth.add_argument("--separation", type=float, default=math.pi / 2)
    p_synth.add_argument("--noise-sigma", type=float, default=0.0)
    p_synth.add_argument("--distractors", type=int, default=0)
    p_synth.add_argument("--out-dir", required=True)
    p_synth.set_defaults(func=_cmd_synth)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SolverDidNotConverge as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except (ValidationError, ShapeError, FormatError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
