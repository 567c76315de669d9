"""Command-line interface.

Subcommands: synth (write a synthetic dataset), train, eval, align
(pseudo-label scoring), bench-attn (factorized vs global attention cost),
export-ply, gradcheck. Every run prints its resolved configuration as one
JSON line. Exit codes: 0 success, 1 usage error, 2 data error, 3 check
failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import tensor as T
from .gradcheck import check_param_gradients, vjp_vs_fd
from .losses import ScalingTransform, total_loss
from .metrics import aggregate_reports, evaluate_pointmaps
from .model import DVGTModel, ModelConfig, attention_cost, count_score_elements
from .pseudolabel import (
    FAILURE_PATTERNS,
    FilterThresholds,
    inject_failure,
    make_alignment_inputs,
    score_and_filter,
)
from .serialization import FormatError
from .synth import SceneSpec, random_scene_spec, read_dataset, synthesize, write_dataset
from .training import TrainConfig, fit

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_CHECK = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def _build_parser() -> _Parser:
    parser = _Parser(prog="drivegeo", description=__doc__)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--precision", choices=["f32", "f64"], default="f32")
    parser.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--spec", required=True, help="scene spec JSON file")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=1)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", required=True, help="JSON: {model: {...}, train: {...}}")
    p.add_argument("--data", action="append", required=True, help="name=dir (repeatable)")
    p.add_argument("--out", required=True)
    p.add_argument("--log", default=None)
    p.add_argument("--resume", default=None)

    p = sub.add_parser("eval", help="evaluate a checkpoint (or GT against itself)")
    p.add_argument("--ckpt", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--self-eval", action="store_true", help="bypass the model; feed GT as prediction")
    p.add_argument("--chamfer-cap", type=int, default=20000)

    p = sub.add_parser("align", help="score pseudo-label alignment per image")
    p.add_argument("--data", required=True)
    p.add_argument("--thresholds", default=None, help="thresholds JSON file (default: desk preset)")
    p.add_argument("--out", required=True, help="JSON-lines output")
    p.add_argument("--inject", choices=["none", "mix", *FAILURE_PATTERNS], default="none")
    p.add_argument("--hidden-scale", type=float, default=2.0)
    p.add_argument("--hidden-shift", type=float, default=3.0)

    p = sub.add_parser("bench-attn", help="attention cost: analytic counts and wall time")
    p.add_argument("--T", type=int, required=True, help="frames")
    p.add_argument("--N", type=int, required=True, help="views")
    p.add_argument("--P", type=int, required=True, help="patch tokens per image (ego token added)")
    p.add_argument("--dim", type=int, default=256)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--repeat", type=int, default=1)

    p = sub.add_parser("export-ply", help="export valid pixels of one frame as ASCII PLY")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", default=None, help="export model predictions instead of GT")
    p.add_argument("--scene", type=int, default=0)
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--trials", type=int, default=100, help="randomized primitive shapes")
    p.add_argument("--corrupt", default=None, help="test hook: corrupt this parameter's gradient")

    return parser


def _print_config(args: argparse.Namespace) -> None:
    resolved = {k: v for k, v in vars(args).items() if k != "func"}
    print(json.dumps({"resolved_config": resolved}, sort_keys=True, default=str))


# ---------------------------------------------------------------------------
# Subcommand implementations
# ---------------------------------------------------------------------------


def _cmd_synth(args) -> int:
    spec_doc = json.loads(Path(args.spec).read_text())
    samples = []
    for i in range(args.count):
        if spec_doc.get("kind", "random") == "random":
            params = {k: v for k, v in spec_doc.items() if k != "kind"}
            spec = random_scene_spec(seed=args.seed + i, **params)
        elif spec_doc["kind"] == "explicit":
            base = SceneSpec.from_json(spec_doc["scene"])
            spec = SceneSpec.from_json({**base.to_json(), "seed": args.seed + i})
        else:
            raise ValueError(f"unknown spec kind {spec_doc.get('kind')!r}")
        samples.append(synthesize(spec))
    manifest = write_dataset(args.out, samples)
    print(f"wrote {len(samples)} scene(s) to {manifest.parent}")
    return EXIT_OK


def _cmd_train(args) -> int:
    doc = json.loads(Path(args.config).read_text())
    model_cfg = ModelConfig.from_json(doc.get("model", {})) if doc.get("model") else ModelConfig()
    train_cfg = TrainConfig.from_json(doc.get("train", {})) if doc.get("train") else TrainConfig()
    datasets = {}
    for entry in args.data:
        name, _, path = entry.rpartition("=")
        if not name:
            name = Path(path).name
        datasets[name] = read_dataset(path)
    model = DVGTModel(model_cfg, seed=args.seed, dtype=args.precision)
    ckpt = fit(model, datasets, train_cfg, args.out, log_path=args.log, resume_from=args.resume)
    print(f"final checkpoint: {ckpt}")
    return EXIT_OK


def _eval_one(sample, model, args):
    if args.self_eval:
        pred_pm, pred_poses = sample.pointmaps, sample.poses
    else:
        with T.no_grad():
            out = model.forward(sample.images)
        pred_pm, pred_poses = out.pointmaps, out.poses
    return evaluate_pointmaps(
        pred_pm,
        pred_poses,
        sample.pointmaps,
        sample.poses,
        sample.valid,
        chamfer_cap=args.chamfer_cap,
        seed=args.seed,
    )


def _cmd_eval(args) -> int:
    samples = read_dataset(args.data)
    model = None
    if not args.self_eval:
        if args.ckpt is None:
            raise ValueError("eval needs --ckpt unless --self-eval is given")
        model = DVGTModel.load_weights(Path(args.ckpt) / "model" if (Path(args.ckpt) / "model").exists() else args.ckpt)
    if args.threads > 1 and args.self_eval:
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            reports = list(pool.map(lambda s: _eval_one(s, model, args), samples))
    else:
        reports = [_eval_one(s, model, args) for s in samples]
    agg = aggregate_reports(reports)
    payload = {
        "aggregate": agg.to_json(),
        "per_scene": [r.to_json() for r in reports],
    }
    Path(args.out).write_text(json.dumps(payload, indent=1, sort_keys=True))
    print(_metric_table(agg))
    return EXIT_OK


def _metric_table(r) -> str:
    head = f"{'':12s}{'Acc(m)':>10s}{'Comp(m)':>10s}{'AbsRel':>10s}{'d<1.25':>10s}{'AUC@30':>10s}"
    row = (
        f"{'drivegeo':12s}{r.accuracy_m:>10.3f}{r.completeness_m:>10.3f}"
        f"{r.abs_rel:>10.3f}{r.delta_125:>10.3f}{r.auc30:>10.1f}"
    )
    return head + "\n" + row


def _cmd_align(args) -> int:
    samples = read_dataset(args.data)
    thresholds = (
        FilterThresholds.from_json(json.loads(Path(args.thresholds).read_text()))
        if args.thresholds
        else FilterThresholds.desk_scale()
    )
    lines = []
    accept = 0
    histogram: dict[str, int] = {}
    jobs = []
    for si, sample in enumerate(samples):
        for t in range(sample.frames):
            for n in range(sample.views):
                jobs.append((si, sample, t, n))

    def run(job):
        si, sample, t, n = job
        rel, valid, sparse = make_alignment_inputs(
            sample, t, n, hidden_scale=args.hidden_scale, hidden_shift=args.hidden_shift
        )
        pattern = args.inject
        if pattern == "mix":
            pattern = FAILURE_PATTERNS[(si + t * sample.views + n) % len(FAILURE_PATTERNS)]
        if pattern != "none":
            rel, valid, sparse = inject_failure(
                rel, valid, sparse, pattern, seed=args.seed + si * 1000 + t * 10 + n
            )
        result = score_and_filter(rel, valid, sparse, thresholds)
        return {"scene": si, "frame": t, "view": n, **result.to_json()}

    if args.threads > 1:
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]
    for rec in results:
        lines.append(json.dumps(rec, sort_keys=True))
        accept += int(rec["accepted"])
        for reason in rec["rejection_reasons"]:
            histogram[reason] = histogram.get(reason, 0) + 1
    summary = {
        "images": len(results),
        "accept_rate": accept / max(len(results), 1),
        "reason_histogram": dict(sorted(histogram.items())),
        "thresholds": thresholds.to_json(),
    }
    Path(args.out).write_text("\n".join(lines) + "\n")
    print(json.dumps({"summary": summary}, sort_keys=True))
    return EXIT_OK


def _cmd_bench_attn(args) -> int:
    tokens_per_image = args.P + 1  # ego token appended
    counts = attention_cost(args.T, args.N, tokens_per_image)
    rng = np.random.default_rng(args.seed)
    grid = rng.normal(0.0, 1.0, size=(args.T, args.N, tokens_per_image, args.dim))

    timings = {}
    measured = {}
    for mode in ("factorized", "global"):
        cfg = ModelConfig(
            dim=args.dim, heads=args.heads, blocks=1, patch=8, attention_mode=mode
        )
        model = DVGTModel(cfg, seed=args.seed, dtype=args.precision)
        from .model import TokenGrid  # local import keeps CLI deps flat

        best = float("inf")
        with count_score_elements() as counter:
            for _ in range(max(args.repeat, 1)):
                g = TokenGrid(
                    tokens=T.tensor(grid, dtype=args.precision),
                    patch_rows=1,
                    patch_cols=args.P,
                )
                tic = time.perf_counter()
                with T.no_grad():
                    model.apply_blocks(g)
                best = min(best, time.perf_counter() - tic)
        timings[mode] = best
        measured[mode] = counter.total // max(args.repeat, 1)

    report = {
        "analytic": counts,
        "measured_score_elements": measured,
        "wall_time_s": timings,
        "speedup": timings["global"] / timings["factorized"],
    }
    print(json.dumps(report, indent=1, sort_keys=True))
    ok = measured["factorized"] == counts["factorized"] and measured["global"] == counts["global"]
    return EXIT_OK if ok else EXIT_CHECK


def _cmd_export_ply(args) -> int:
    samples = read_dataset(args.data)
    if not (0 <= args.scene < len(samples)):
        raise ValueError(f"scene index {args.scene} out of range")
    sample = samples[args.scene]
    if not (0 <= args.frame < sample.frames):
        raise ValueError(f"frame index {args.frame} out of range")
    if args.ckpt is not None:
        path = Path(args.ckpt)
        model = DVGTModel.load_weights(path / "model" if (path / "model").exists() else path)
        with T.no_grad():
            out = model.forward(sample.images)
        pm = out.pointmaps
    else:
        pm = sample.pointmaps
    mask = sample.valid[args.frame]
    pts = pm[args.frame][mask]
    colors = np.clip(np.rint(sample.images[args.frame][mask] * 255.0), 0, 255).astype(np.uint8)
    write_ply(args.out, pts, colors)
    print(f"wrote {len(pts)} vertices to {args.out}")
    return EXIT_OK


def write_ply(path: str | Path, pts: np.ndarray, colors: np.ndarray) -> None:
    """ASCII PLY with xyz float (9 significant digits) and uchar RGB."""
    pts = np.asarray(pts).reshape(-1, 3)
    colors = np.asarray(colors).reshape(-1, 3)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(pts)}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ]
    for p, c in zip(pts, colors):
        lines.append(f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g} {c[0]:d} {c[1]:d} {c[2]:d}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_ply(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Parse the ASCII PLY subset written by :func:`write_ply`."""
    text = Path(path).read_text().splitlines()
    if text[0] != "ply" or text[1] != "format ascii 1.0":
        raise FormatError(f"{path}: not an ASCII PLY")
    count = 0
    body_at = 0
    for i, line in enumerate(text):
        if line.startswith("element vertex"):
            count = int(line.split()[-1])
        if line == "end_header":
            body_at = i + 1
            break
    pts, cols = [], []
    for line in text[body_at : body_at + count]:
        x, y, z, r, g, b = line.split()
        pts.append([float(x), float(y), float(z)])
        cols.append([int(r), int(g), int(b)])
    return np.asarray(pts).reshape(-1, 3), np.asarray(cols, dtype=np.uint8).reshape(-1, 3)


_PRIMITIVE_CASES = {
    "add": lambda a, b: T.add(a, b),
    "sub": lambda a, b: T.sub(a, b),
    "mul": lambda a, b: T.mul(a, b),
    "div": lambda a, b: T.div(a, T.add(T.mul(b, b), 1.0)),
    "matmul": lambda a, b: T.matmul(a, b),
    "exp": lambda a: T.exp(a),
    "log": lambda a: T.log(T.add(T.mul(a, a), 0.5)),
    "sqrt": lambda a: T.sqrt(T.add(T.mul(a, a), 0.5)),
    "tanh": lambda a: T.tanh(a),
    "gelu": lambda a: T.gelu(a),
    "abs": lambda a: T.tabs(a),
    "softmax": lambda a: T.softmax(a, axis=-1),
    "layer_norm": lambda a: T.layer_norm(a, axis=-1),
    "l2_normalize": lambda a: T.l2_normalize(a, axis=-1),
    "vector_norm": lambda a: T.vector_norm(a, axis=-1),
    "sum": lambda a: T.tsum(a, axis=0),
    "mean": lambda a: T.tmean(a, axis=-1),
    "transpose": lambda a: T.transpose(a, (1, 0)),
    "reshape": lambda a: T.reshape(a, (a.size,)),
    "slice": lambda a: a[1:, :-1],
    "concat": lambda a, b: T.concat([a, b], axis=0),
    "broadcast": lambda a: T.broadcast_to(T.reshape(a, (1,) + a.shape), (3,) + a.shape),
    "clamp": lambda a: T.clamp(a, -0.8, 0.8),
}


def run_primitive_suite(trials: int, seed: int, tolerance: float = 1e-6) -> dict[str, float]:
    """Randomized VJP-vs-FD errors per primitive; at least ``trials`` shapes total."""
    rng = np.random.default_rng(seed)
    names = list(_PRIMITIVE_CASES)
    per_op = {name: 0.0 for name in names}
    rounds = max(1, (trials + len(names) - 1) // len(names))
    for _ in range(rounds):
        for name in names:
            fn = _PRIMITIVE_CASES[name]
            shape = tuple(rng.integers(2, 6, size=2))
            n_args = fn.__code__.co_argcount
            if name == "matmul":
                k = int(rng.integers(2, 6))
                arrays = [rng.standard_normal((shape[0], k)), rng.standard_normal((k, shape[1]))]
            else:
                arrays = [rng.standard_normal(shape) for _ in range(n_args)]
            err = vjp_vs_fd(fn, arrays, rng)
            per_op[name] = max(per_op[name], err)
    return per_op


def build_gradcheck_model(precision: str = "f64", seed: int = 0):
    """Tiny model plus loss closure used by the gradcheck command."""
    cfg = ModelConfig(dim=32, heads=2, blocks=2, patch=8, scaling="linear10")
    model = DVGTModel(cfg, seed=seed, dtype=precision)
    spec = random_scene_spec(seed=seed + 7, frames=2, views=2, height=16, width=16, extent=60.0)
    sample = synthesize(spec)
    scaling = ScalingTransform(cfg.scaling)

    def loss_fn():
        out = model.forward(sample.images)
        loss, _ = total_loss(
            out.poses_raw_t,
            out.pointmaps_scaled_t,
            out.sigma_t,
            sample.poses,
            sample.pointmaps,
            sample.valid,
            scaling=scaling,
        )
        return loss

    return model, loss_fn


def _cmd_gradcheck(args) -> int:
    prim = run_primitive_suite(args.trials, args.seed)
    prim_ok = all(v < 1e-6 for v in prim.values())
    model, loss_fn = build_gradcheck_model(precision="f64", seed=args.seed)
    report = check_param_gradients(
        model.params, loss_fn, seed=args.seed, tolerance=args.tolerance, corrupt=args.corrupt
    )
    print(json.dumps(
        {
            "primitive_max_rel_err": dict(sorted(prim.items())),
            "primitives_pass": prim_ok,
            "model_per_param_max_rel_err": {k: round(v, 10) for k, v in sorted(report.per_param.items())},
            "model_max_rel_err": report.max_rel_err,
            "model_pass": report.passed,
        },
        indent=1,
        sort_keys=True,
    ))
    return EXIT_OK if (prim_ok and report.passed) else EXIT_CHECK


# ---------------------------------------------------------------------------


_COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "align": _cmd_align,
    "bench-attn": _cmd_bench_attn,
    "export-ply": _cmd_export_ply,
    "gradcheck": _cmd_gradcheck,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    _print_config(args)
    try:
        return _COMMANDS[args.command](args)
    except (FormatError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except T.TensorError as exc:
        print(f"check failure: {exc}", file=sys.stderr)
        return EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
