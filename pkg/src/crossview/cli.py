"""``crossview`` command line entry point.

Exit codes: 0 success, 1 domain error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import attention, controls, diffusion, gptjudge, metrics
from .config import Config, ConfigError, load_config
from .core import Image, load_image, read_tensor, write_tensor
from .dataset import LAYOUTS, Layout, Manifest, load_pair, scan_dataset
from .geometry import PanoramaDims
from .voxel import default_pose, grid_from_height

log = logging.getLogger("crossview")


class DomainError(Exception):
    """Raised for failures that should exit with code 1 and a diagnostic."""


def _dump(obj, path: Path | None = None) -> str:
    text = json.dumps(obj, indent=2, sort_keys=True)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text + "\n", encoding="utf-8")
    return text


def _layout(cfg: Config, name: str) -> Layout:
    if name in cfg.dataset.layouts:
        return Layout.from_dict({"name": name, **cfg.dataset.layouts[name]})
    if name not in LAYOUTS:
        raise DomainError(f"unknown dataset layout {name!r}")
    return LAYOUTS[name]


def _manifest(cfg: Config) -> Manifest:
    if cfg.dataset.manifest:
        return Manifest.load(cfg.dataset.manifest)
    if not cfg.dataset.root:
        raise DomainError("no dataset configured: set dataset.root or dataset.manifest")
    return scan_dataset(
        cfg.dataset.root, _layout(cfg, cfg.dataset.layout), cfg.dataset.split_file, cfg.seed
    )


def cmd_dataset_scan(cfg: Config, args) -> int:
    if args.root:
        cfg.dataset.root = args.root
    if args.layout:
        cfg.dataset.layout = args.layout
    cfg.dataset.manifest = None
    manifest = _manifest(cfg)
    out = Path(cfg.output_dir) / "manifest.json"
    manifest.save(out)
    print(_dump({"manifest": str(out), "samples": len(manifest.samples), "warnings": manifest.warnings}))
    return 0


def cmd_build_controls(cfg: Config, args) -> int:
    manifest = _manifest(cfg)
    try:
        rec = manifest.get(args.sample)
    except KeyError as exc:
        raise DomainError(str(exc)) from exc
    if rec.height is None:
        lay = manifest.resolved_layout()
        where = Path(manifest.root) / (lay.height or "<no height pattern>")
        raise DomainError(f"sample {rec.id} has no height map; expected a file matching {where}")
    pair = load_pair(manifest, rec.id)
    v, c = cfg.voxel, cfg.controls
    grid = grid_from_height(pair.height, v.meters_per_voxel, v.nz)
    pose = default_pose(grid, v.camera_height_m)
    dims = PanoramaDims.from_height(c.pano_height)
    smap, mapping = controls.build_controls(grid, pose, dims)
    weights = controls.build_weight_matrix(mapping, tuple(c.control_dims), tuple(c.sat_dims), c.beta)
    report = controls.check_wrap_continuity(smap, mapping)

    out = Path(cfg.output_dir) / rec.id
    out.mkdir(parents=True, exist_ok=True)
    controls.save_structure_map(smap, out / "structure_map.png")
    controls.save_mapping(mapping, out / "texture_mapping.cvdf")
    controls.save_weight_matrix(weights, out / "weight_matrix.cvdf")
    summary = {
        "sample": rec.id,
        "panorama": [dims.height, dims.width],
        "grid": list(grid.shape),
        "camera": [pose.x_cen, pose.y_cen, pose.z_cam],
        "hit_fraction": float(smap.bits.mean()),
        "continuity": report.as_dict(),
        "weight_matrix": list(weights.values.shape),
        "beta": weights.beta,
    }
    _dump(summary, out / "continuity.json")
    print(_dump(summary))
    return 0


def _attention_inputs(cfg: Config, args, rng) -> attention.AttentionInputs:
    given = [args.q, args.k, args.v, args.m]
    if any(given):
        if not all(given):
            raise DomainError("attention-demo needs all of --q --k --v --m, or none")
        return attention.AttentionInputs(*(read_tensor(p).data for p in given))
    a = cfg.attention
    p = a.patch_size
    (h_p, w_p), (h_s, w_s) = a.control_dims, a.sat_dims
    sat = Image(rng.random((h_s * p, w_s * p, 3)))
    pano_bits = Image((rng.random((h_p * p, w_p * p)) < 0.5).astype(float))
    enc_s = attention.PatchEncoder.random(p, 3, a.d, rng)
    enc_p = attention.PatchEncoder.random(p, 1, a.d, rng)
    proj = attention.ProjectionSet.random(a.d, rng)
    Q, K, V = attention.project(attention.encode(pano_bits, enc_p), attention.encode(sat, enc_s), proj)
    centers = controls.satellite_token_centers((h_s * p, w_s * p), (h_s, w_s))
    points = rng.uniform(0, [w_s * p, h_s * p], (h_p * w_p, 2))
    d = np.linalg.norm(points[:, None, :] - centers[None], axis=-1)
    M = 1.0 - 1.0 / (1.0 + np.exp(-cfg.controls.beta * d))
    return attention.AttentionInputs(Q, K, V, M)


def cmd_attention_demo(cfg: Config, args) -> int:
    rng = np.random.default_rng(cfg.seed)
    inputs = _attention_inputs(cfg, args, rng).astype(np.float32)
    scaled = cfg.attention.scaled
    z = attention.cross_view_attention(inputs, scaled)
    probs = attention.attention_probs(inputs.astype(np.float64), scaled)
    ent = attention.row_entropy(probs)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_tensor(z, out / "z.cvdf")
    ok_rows = bool(np.allclose(probs.sum(axis=1), 1.0, atol=1e-6))
    finite = bool(np.all(np.isfinite(z)))
    report = {
        "z_shape": list(z.shape),
        "row_entropy": {"mean": float(ent.mean()), "min": float(ent.min()), "max": float(ent.max())},
        "rows_sum_to_one": ok_rows,
        "finite": finite,
        "scaled": scaled,
        "z": str(out / "z.cvdf"),
    }
    print(_dump(report, out / "attention_report.json"))
    return 0 if ok_rows and finite else 1


def cmd_diffusion_demo(cfg: Config, args) -> int:
    d = cfg.diffusion
    steps = args.steps if args.steps is not None else d.steps
    sched = diffusion.linear_schedule(d.T, d.beta_start, d.beta_end)
    rng = np.random.default_rng(cfg.seed)
    x0 = rng.uniform(-1.0, 1.0, tuple(d.shape))
    start = time.perf_counter()
    out = diffusion.ddim_sample(diffusion.oracle_predictor(x0, sched), x0.shape, None, sched, steps, cfg.seed + 1)
    runtime_ms = (time.perf_counter() - start) * 1e3
    err = float(np.max(np.abs(out - x0)))
    report = {"steps": steps, "T": d.T, "max_abs_error": err, "runtime_ms": runtime_ms, "ok": err <= 1e-4}
    print(_dump(report, Path(cfg.output_dir) / "diffusion_report.json"))
    return 0 if report["ok"] else 1


def _paired_images(pred_dir: str, gt_dir: str) -> list[tuple[str, Path, Path]]:
    pred, gt = Path(pred_dir), Path(gt_dir)
    for p in (pred, gt):
        if not p.is_dir():
            raise DomainError(f"directory {p} does not exist")
    names = sorted(p.name for p in pred.iterdir() if p.suffix.lower() in {".png", ".jpg", ".jpeg"})
    pairs = [(n, pred / n, gt / n) for n in names if (gt / n).is_file()]
    if not pairs:
        raise DomainError(f"no same-named images in {pred} and {gt}")
    return pairs


def cmd_metrics(cfg: Config, args) -> int:
    report = metrics.MetricReport()
    for name, p, g in _paired_images(args.pred, args.gt):
        report.add(name, load_image(p), load_image(g))
    if args.pred_features or args.gt_features:
        if not (args.pred_features and args.gt_features):
            raise DomainError("KID needs both --pred-features and --gt-features")
        report.kid = metrics.kid(read_tensor(args.pred_features).data, read_tensor(args.gt_features).data)
    print(_dump(report.as_dict(), Path(cfg.output_dir) / "metrics.json"))
    return 0


def _icl_examples(cfg: Config) -> tuple:
    j = cfg.judge
    if not j.icl_examples or j.icl_count == 0:
        return ()
    base = Path(j.icl_examples).parent
    raw = json.loads(Path(j.icl_examples).read_text(encoding="utf-8"))[: j.icl_count]
    out = []
    for ex in raw:
        pred = load_image(base / ex["pred"]) if ex.get("pred") else None
        gt = load_image(base / ex["gt"]) if ex.get("gt") else None
        out.append(gptjudge.ICLExample(ex["pair_id"], ex["scores"], ex.get("reasons", {}), ex.get("total"), pred, gt))
    return tuple(out)


def cmd_gpt_score(cfg: Config, args) -> int:
    j = cfg.judge
    if args.mock:
        transport = gptjudge.MockTransport()
    else:
        transport = gptjudge.HTTPTransport(j.endpoint, j.model, api_key_env=j.api_key_env)
    rubric = gptjudge.Rubric(examples=_icl_examples(cfg))
    items = [(n, load_image(p), load_image(g)) for n, p, g in _paired_images(args.pred, args.gt)]
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = gptjudge.score_batch(
        transport, rubric, items, concurrency=j.concurrency, retries=j.retries, out_path=out / "scores.jsonl"
    )
    summary = {
        "count": len(rows),
        "mean": {d: float(np.mean([r[d] for r in rows])) for d in (*gptjudge.DIMENSIONS, "total")},
        "overridden": sum(r["overridden"] for r in rows),
        "scores": str(out / "scores.jsonl"),
    }
    if args.human:
        human = gptjudge.load_scorecards(args.human)
        ids = [r["id"] for r in rows if r["id"] in human]
        judged = gptjudge.load_scorecards(out / "scores.jsonl")
        summary["agreement"] = gptjudge.agreement([human[i] for i in ids], [judged[i] for i in ids])
    print(_dump(summary, out / "gpt_score_summary.json"))
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="seed for every stochastic step")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="crossview", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-controls", parents=[common], help="structure map, texture mapping and weights")
    p.add_argument("--sample", required=True)
    p.set_defaults(func=cmd_build_controls)

    p = sub.add_parser("attention-demo", parents=[common], help="run the reweighted cross-attention")
    for name in ("q", "k", "v", "m"):
        p.add_argument(f"--{name}", help=f"{name.upper()} matrix as a CVDF tensor")
    p.set_defaults(func=cmd_attention_demo)

    p = sub.add_parser("diffusion-demo", parents=[common], help="DDIM oracle-recovery check")
    p.add_argument("--steps", type=int)
    p.set_defaults(func=cmd_diffusion_demo)

    p = sub.add_parser("metrics", parents=[common], help="SSIM / PSNR / SD (+ KID) over paired images")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--pred-features")
    p.add_argument("--gt-features")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("gpt-score", parents=[common], help="two-stage LLM judging")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--mock", action="store_true", help="use the deterministic mock transport")
    p.add_argument("--human", help="human score cards (JSON lines) for agreement")
    p.set_defaults(func=cmd_gpt_score)

    p = sub.add_parser("dataset-scan", parents=[common], help="pair files and write a manifest")
    p.add_argument("--root")
    p.add_argument("--layout")
    p.set_defaults(func=cmd_dataset_scan)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.out is not None:
            cfg.output_dir = args.out
        cfg.validate()
        return args.func(cfg, args)
    except (DomainError, ConfigError, ValueError, OSError, KeyError, RuntimeError) as exc:
        print(f"crossview {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
