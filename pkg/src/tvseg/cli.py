"""Command-line entry point: dataset generation, training, noise sweeps,
gradient-check reports and manifest-based reruns.

Every command writes a manifest of its fully resolved configuration as
plain key=value lines (timestamps live only there); ``tvseg rerun
MANIFEST`` replays it and reproduces the CSV outputs byte for byte.

Exit codes: 0 success, 1 usage/config error, 2 runtime failure,
3 gradient-check failure.
"""

from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from .activations import RegActConfig, post_tv, reg_softmax_iterative, \
    reg_softmax_onestep
from .backward import (finite_diff_check, lambda_gradient,
                       reg_softmax_onestep_backward,
                       reg_softmax_unrolled_backward)
from .grid import div
from .metrics import (CSV_HEADER, MetricsRow, accuracy_from_confusion,
                      confusion_matrix, miou_from_confusion,
                      regularization_effect)
from .net import (NetSpec, build, cross_entropy, forward, load_checkpoint,
                  save_checkpoint, train)
from .synth import (add_gaussian_noise, add_salt_pepper,
                    corrupt_training_subset, generate_cells, load_dataset,
                    load_manifest, save_dataset)
from .activations import softmax

DATASET_COUNT = 100
DATASET_SIZE = 64
TRAIN_COUNT = 60
NOISY_TRAIN_SUBSET = 20
DEFAULT_SWEEP = "gauss:0.01..0.09:0.02,pepper:0.01,salt:0.01"
DEFAULT_LR = 0.02
DEFAULT_TAU_LAMBDA = 1.5
GRADCHECK_HEADER = "check,probes,max_rel_err,max_abs_err,tolerance,passed"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="tvseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_dataset=True):
        if needs_dataset:
            p.add_argument("--dataset", help="dataset directory")
            p.add_argument("--generate", action="store_true",
                           help="generate the dataset if missing")
        p.add_argument("--mode", default="both",
                       choices=["plain", "regularized", "both"])
        p.add_argument("--lambda", dest="lam", type=float, default=0.5,
                       help="initial TV weight (training); post-TV weight (sweep)")
        p.add_argument("--kappa", type=float, default=0.25)
        p.add_argument("--tau", type=float, default=0.125)
        p.add_argument("--iters", type=int, default=100,
                       help="dual iterations at test time")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", help="output directory")

    p_train = sub.add_parser("train", help="train mini-nets, write checkpoints")
    common(p_train)
    p_train.add_argument("--epochs", type=int, default=45)
    p_train.add_argument("--batch", type=int, default=6)
    p_train.add_argument("--noise-train", dest="noise_train", default="none",
                         choices=["none", "paper"],
                         help="'paper': corrupt a random 20-image training subset")

    p_sweep = sub.add_parser("sweep", help="evaluate checkpoints over a noise grid")
    common(p_sweep)
    p_sweep.add_argument("--sweep", default=DEFAULT_SWEEP,
                         help="noise grid, e.g. gauss:0.01..0.09:0.02,pepper:0.01")
    p_sweep.add_argument("--svg", action="store_true",
                         help="also write an mIoU-vs-sigma chart")

    p_grad = sub.add_parser("gradcheck", help="run the gradient validation suite")
    common(p_grad, needs_dataset=False)
    p_grad.add_argument("--inject-error", dest="inject_error",
                        action="store_true", help=argparse.SUPPRESS)

    p_rerun = sub.add_parser("rerun", help="replay a command from its manifest")
    p_rerun.add_argument("manifest")
    p_rerun.add_argument("--out", help="override the output directory")
    return parser


# ---------------------------------------------------------------------------
# manifests

def _write_manifest(path, command, args, keys):
    lines = [f"command={command}"]
    for key in keys:
        value = getattr(args, key)
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key}={value}")
    lines.append(f"timestamp={time.strftime('%Y-%m-%dT%H:%M:%S')}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


_TRAIN_KEYS = ("dataset", "generate", "mode", "lam", "kappa", "tau", "iters",
               "seed", "out", "epochs", "batch", "noise_train")
_SWEEP_KEYS = ("dataset", "generate", "mode", "lam", "kappa", "tau", "iters",
               "seed", "out", "sweep", "svg")
_GRAD_KEYS = ("mode", "lam", "kappa", "tau", "iters", "seed", "out")

_FLAG_NAMES = {"lam": "--lambda", "noise_train": "--noise-train"}


def manifest_to_argv(path, out_override=None):
    entries = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line and "=" in line:
                key, value = line.split("=", 1)
                entries[key] = value
    command = entries.pop("command", None)
    if command not in ("train", "sweep", "gradcheck"):
        raise UsageError(f"manifest {path} has no replayable command")
    entries.pop("timestamp", None)
    if out_override is not None:
        entries["out"] = out_override
    argv = [command]
    for key, value in entries.items():
        flag = _FLAG_NAMES.get(key, "--" + key.replace("_", "-"))
        if value == "true":
            argv.append(flag)
        elif value == "false":
            continue
        else:
            argv.extend([flag, value])
    return argv


# ---------------------------------------------------------------------------
# config validation

def _validate_common(args, errors):
    if args.lam < 0:
        errors.append(f"--lambda must be >= 0, got {args.lam}")
    if args.kappa <= 0:
        errors.append(f"--kappa must be > 0, got {args.kappa}")
    if not 0 < args.tau <= 0.125:
        errors.append(f"--tau must be in (0, 1/8], got {args.tau}")
    if args.iters < 1:
        errors.append(f"--iters must be >= 1, got {args.iters}")
    if not args.out:
        errors.append("--out is required")


def _validate_dataset(args, errors):
    if not args.dataset:
        errors.append("--dataset is required")
    elif not os.path.isdir(args.dataset) and not args.generate:
        errors.append(f"dataset directory {args.dataset!r} does not exist "
                      f"(pass --generate to create it)")


def parse_sweep_grid(text):
    """'clean' plus the parsed grid; raises UsageError on malformed specs."""
    points = [("clean", 0.0)]
    kind_map = {"gauss": "gaussian", "gaussian": "gaussian",
                "pepper": "pepper", "salt": "salt"}
    for token in text.split(","):
        token = token.strip()
        if not token:
            continue
        if token == "clean":
            continue
        parts = token.split(":")
        if len(parts) not in (2, 3) or parts[0] not in kind_map:
            raise UsageError(f"bad sweep token {token!r}")
        kind = kind_map[parts[0]]
        try:
            if len(parts) == 3:
                start, stop = (float(v) for v in parts[1].split(".."))
                step = float(parts[2])
                if step <= 0 or stop < start:
                    raise ValueError
                level = start
                while level <= stop + 1e-12:
                    points.append((kind, round(level, 10)))
                    level += step
            else:
                if ".." in parts[1]:
                    raise ValueError
                points.append((kind, float(parts[1])))
        except ValueError:
            raise UsageError(f"bad sweep token {token!r}") from None
    return points


# ---------------------------------------------------------------------------
# dataset plumbing

def _ensure_dataset(args):
    manifest_path = os.path.join(args.dataset, "manifest.txt")
    if not os.path.exists(manifest_path):
        if not args.generate:
            raise UsageError(f"no dataset at {args.dataset!r}")
        samples = generate_cells(DATASET_COUNT, DATASET_SIZE, seed=args.seed)
        manifest = {
            "count": str(DATASET_COUNT),
            "size": str(DATASET_SIZE),
            "seed": str(args.seed),
            "train": ",".join(str(i) for i in range(TRAIN_COUNT)),
            "test": ",".join(str(i) for i in range(TRAIN_COUNT, DATASET_COUNT)),
        }
        save_dataset(args.dataset, samples, manifest)
    return load_manifest(args.dataset)


def _split_indices(manifest, key):
    return [int(tok) for tok in manifest[key].split(",") if tok != ""]


# ---------------------------------------------------------------------------
# train

def _net_spec(mode, args):
    reg = RegActConfig(lam=args.lam, kappa=args.kappa, tau=args.tau,
                       iterations=args.iters, mode="one_step")
    return NetSpec(in_channels=3, num_classes=3, widths=(16, 32),
                   activation=mode, reg=reg)


def run_train(args) -> int:
    errors = []
    _validate_common(args, errors)
    _validate_dataset(args, errors)
    if args.epochs < 1:
        errors.append(f"--epochs must be >= 1, got {args.epochs}")
    if args.batch < 1:
        errors.append(f"--batch must be >= 1, got {args.batch}")
    if errors:
        raise UsageError("; ".join(errors))

    manifest = _ensure_dataset(args)
    os.makedirs(args.out, exist_ok=True)
    train_samples, _ = load_dataset(args.dataset,
                                    _split_indices(manifest, "train"))
    if args.noise_train == "paper":
        train_samples = corrupt_training_subset(
            train_samples, min(NOISY_TRAIN_SUBSET, len(train_samples)),
            seed=args.seed + 1)

    modes = ["plain", "regularized"] if args.mode == "both" else [args.mode]
    for mode in modes:
        net = build(_net_spec(mode, args), seed=args.seed)
        net.params.lr = DEFAULT_LR
        log = train(net, train_samples, epochs=args.epochs,
                    batch_size=args.batch, seed=args.seed,
                    tau_lambda=DEFAULT_TAU_LAMBDA)
        save_checkpoint(net, os.path.join(args.out, f"{mode}.ckpt"))
        with open(os.path.join(args.out, f"{mode}_trainlog.csv"), "w") as fh:
            fh.write(log.to_csv())
        print(f"{mode}: {log.iterations} iterations, final loss "
              f"{log.losses[-1]:.6f}, lambda {net.lam:.6f}")
    _write_manifest(os.path.join(args.out, "train_manifest.txt"), "train",
                    args, _TRAIN_KEYS)
    return 0


# ---------------------------------------------------------------------------
# sweep

def _noise_seed(base, point_index, sample_index):
    return int(np.random.SeedSequence(
        [base, point_index, sample_index]).generate_state(1)[0])


def _apply_noise(image, kind, level, seed):
    if kind == "gaussian":
        return add_gaussian_noise(image, level, seed)
    if kind in ("pepper", "salt"):
        return add_salt_pepper(image, level, kind, seed)
    return image


def evaluate_noise_grid(predict_label, test_samples, grid, seed,
                        num_classes=3):
    """(kind, level) -> MetricsRow fields for one model; predict_label maps
    an image to a label map."""
    rows = []
    for pi, (kind, level) in enumerate(grid):
        conf = np.zeros((num_classes, num_classes), dtype=np.int64)
        res = []
        for si, sample in enumerate(test_samples):
            image = _apply_noise(sample.image, kind, level,
                                 _noise_seed(seed, pi, si))
            label = predict_label(image)
            conf += confusion_matrix(label, sample.label, num_classes)
            res.append(regularization_effect(label))
        rows.append((kind, level, miou_from_confusion(conf),
                     accuracy_from_confusion(conf), float(np.mean(res))))
    return rows


def _sweep_models(args):
    """(model id, checkpoint path, post_tv flag) for the requested mode."""
    plain = os.path.join(args.out, "plain.ckpt")
    reg = os.path.join(args.out, "regularized.ckpt")
    if args.mode == "plain":
        return [("plain", plain, False)]
    if args.mode == "regularized":
        return [("regularized", reg, False)]
    return [("plain", plain, False), ("regularized", reg, False),
            ("plain_post_tv", plain, True)]


def run_sweep(args) -> int:
    errors = []
    _validate_common(args, errors)
    _validate_dataset(args, errors)
    grid = None
    try:
        grid = parse_sweep_grid(args.sweep)
    except UsageError as exc:
        errors.append(str(exc))
    if errors:
        raise UsageError("; ".join(errors))

    manifest = _ensure_dataset(args)
    os.makedirs(args.out, exist_ok=True)
    test_samples, _ = load_dataset(args.dataset, _split_indices(manifest, "test"))

    lines = [CSV_HEADER]
    chart_series = []
    for model_id, ckpt_path, is_post_tv in _sweep_models(args):
        if not os.path.exists(ckpt_path):
            print(f"sweep: missing checkpoint {ckpt_path} for {model_id}",
                  file=sys.stderr)
            for kind, level in grid:
                lines.append(MetricsRow(model_id, kind, level, float("nan"),
                                        float("nan"), float("nan")).to_csv_row())
            continue
        net = load_checkpoint(ckpt_path)

        if is_post_tv:
            def predict_label(image, net=net):
                logits, _, _ = forward(net, image)
                return np.argmax(post_tv(logits, args.lam, args.iters), axis=0)
        else:
            def predict_label(image, net=net):
                _, probs, _ = forward(net, image, test_iterations=args.iters)
                return np.argmax(probs, axis=0)

        rows = evaluate_noise_grid(predict_label, test_samples, grid, args.seed)
        gauss_points = []
        for kind, level, miou_v, acc_v, re_v in rows:
            lines.append(MetricsRow(model_id, kind, level, miou_v, acc_v,
                                    re_v).to_csv_row())
            if kind == "gaussian":
                gauss_points.append((level, miou_v))
        chart_series.append((model_id, gauss_points))

    with open(os.path.join(args.out, "metrics.csv"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    if args.svg:
        with open(os.path.join(args.out, "miou_vs_sigma.svg"), "w") as fh:
            fh.write(render_svg_chart(chart_series))
    _write_manifest(os.path.join(args.out, "sweep_manifest.txt"), "sweep",
                    args, _SWEEP_KEYS)
    return 0


def render_svg_chart(series, width=640, height=440):
    """Self-contained SVG line chart of mIoU against gaussian sigma."""
    left, right, top, bottom = 60, 20, 20, 50
    plot_w, plot_h = width - left - right, height - top - bottom
    levels = sorted({lv for _, pts in series for lv, _ in pts})
    x_max = max(levels) if levels else 1.0
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b"]

    def x_of(level):
        return left + (level / x_max) * plot_w if x_max else left

    def y_of(miou_v):
        return top + (1.0 - miou_v / 100.0) * plot_h

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
             f'height="{height}" viewBox="0 0 {width} {height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<line x1="{left}" y1="{top}" x2="{left}" '
             f'y2="{top + plot_h}" stroke="black"/>',
             f'<line x1="{left}" y1="{top + plot_h}" x2="{left + plot_w}" '
             f'y2="{top + plot_h}" stroke="black"/>']
    for tick in (0, 25, 50, 75, 100):
        y = y_of(tick)
        parts.append(f'<text x="{left - 8}" y="{y + 4:.1f}" font-size="12" '
                     f'text-anchor="end">{tick}</text>')
        parts.append(f'<line x1="{left - 4}" y1="{y:.1f}" x2="{left}" '
                     f'y2="{y:.1f}" stroke="black"/>')
    for level in levels:
        x = x_of(level)
        parts.append(f'<line x1="{x:.1f}" y1="{top + plot_h}" x2="{x:.1f}" '
                     f'y2="{top + plot_h + 4}" stroke="black"/>')
        parts.append(f'<text x="{x:.1f}" y="{top + plot_h + 18}" '
                     f'font-size="12" text-anchor="middle">{level:g}</text>')
    parts.append(f'<text x="{left + plot_w / 2:.1f}" y="{height - 12}" '
                 f'font-size="13" text-anchor="middle">gaussian sigma</text>')
    parts.append(f'<text x="16" y="{top + plot_h / 2:.1f}" font-size="13" '
                 f'transform="rotate(-90 16 {top + plot_h / 2:.1f})" '
                 f'text-anchor="middle">mIoU</text>')
    for i, (model_id, pts) in enumerate(series):
        if not pts:
            continue
        color = colors[i % len(colors)]
        coords = " ".join(f"{x_of(lv):.2f},{y_of(mv):.2f}" for lv, mv in pts)
        parts.append(f'<polyline points="{coords}" fill="none" '
                     f'stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{left + plot_w - 4}" '
                     f'y="{top + 16 + 16 * i}" font-size="12" '
                     f'text-anchor="end" fill="{color}">{model_id}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# ---------------------------------------------------------------------------
# gradient-check suite

def _gradcheck_one_step(rng, instances, inject=False):
    worst = 0.0
    worst_abs = 0.0
    probes = 0
    ok = True
    for trial in range(instances):
        shape = (int(rng.integers(2, 5)), int(rng.integers(2, 7)),
                 int(rng.integers(2, 7)))
        o = rng.normal(size=shape)
        cfg = RegActConfig(lam=[0.3, 1.0, 2.5][trial % 3],
                           kappa=[0.25, 2.0][trial % 2], mode="one_step")
        w = rng.normal(size=shape)
        _, tape = reg_softmax_onestep(o, cfg)
        ana = reg_softmax_onestep_backward(tape, w)
        if inject:
            ana = 2.0 * ana
        fwd = lambda x: float((reg_softmax_onestep(x, cfg)[0] * w).sum())
        rep = finite_diff_check(fwd, o, ana, epsilon=1e-5, tolerance=1e-6)
        worst = max(worst, rep.max_rel_err)
        worst_abs = max(worst_abs, rep.max_abs_err)
        probes += rep.probes
        ok = ok and rep.passed
    return worst, worst_abs, probes, 1e-6, ok


def _gradcheck_unrolled(rng, iterations, instances):
    worst = worst_abs = 0.0
    probes = 0
    ok = True
    for trial in range(instances):
        shape = (int(rng.integers(2, 4)), int(rng.integers(2, 6)),
                 int(rng.integers(2, 6)))
        o = rng.normal(size=shape)
        cfg = RegActConfig(lam=[0.5, 1.0, 2.5][trial % 3], tau=0.125,
                           iterations=iterations, mode="iterative")
        w = rng.normal(size=shape)
        _, _, tape = reg_softmax_iterative(o, cfg)
        ana = reg_softmax_unrolled_backward(tape, w)
        fwd = lambda x: float((reg_softmax_iterative(x, cfg)[0] * w).sum())
        rep = finite_diff_check(fwd, o, ana, epsilon=1e-5, tolerance=1e-5)
        worst = max(worst, rep.max_rel_err)
        worst_abs = max(worst_abs, rep.max_abs_err)
        probes += rep.probes
        ok = ok and rep.passed
    return worst, worst_abs, probes, 1e-5, ok


def _gradcheck_lambda(rng, instances):
    worst = worst_abs = 0.0
    probes = 0
    ok = True
    for _ in range(instances):
        o = rng.normal(size=(3, 4, 4))
        cfg = RegActConfig(lam=0.8, kappa=0.25, mode="one_step")
        w = rng.normal(size=o.shape)
        _, tape = reg_softmax_onestep(o, cfg)
        ana = lambda_gradient(tape, w)
        shift = div(tape.eta)

        def fwd(lam_field):
            return float((softmax(tape.logits - lam_field[0, 0, 0] * shift)
                          * w).sum())

        rep = finite_diff_check(fwd, np.full((1, 1, 1), cfg.lam),
                                np.full((1, 1, 1), ana), epsilon=1e-5,
                                tolerance=1e-6)
        worst = max(worst, rep.max_rel_err)
        worst_abs = max(worst_abs, rep.max_abs_err)
        probes += rep.probes
        ok = ok and rep.passed
    return worst, worst_abs, probes, 1e-6, ok


def _gradcheck_network(rng):
    from .net import backward as net_backward
    spec = NetSpec(in_channels=2, num_classes=3, widths=(4, 6),
                   activation="regularized",
                   reg=RegActConfig(lam=0.8, kappa=0.25, mode="one_step"))
    net = build(spec, seed=11)
    xs = rng.uniform(size=(2, 2, 16, 16))
    ys = rng.integers(0, 3, size=(2, 16, 16))
    _, probs, tape = forward(net, xs, train=True)
    _, d_probs = cross_entropy(probs, ys)
    grads_w, _, _ = net_backward(net, tape, d_probs)
    worst = worst_abs = 0.0
    probes = 0
    ok = True
    for li in range(len(net.params.weights)):
        w = net.params.weights[li]

        def loss_with(wflat, li=li, w=w):
            saved = w.copy()
            w[:] = wflat.reshape(w.shape)
            _, p, _ = forward(net, xs, train=True)
            value, _ = cross_entropy(p, ys)
            w[:] = saved
            return value

        rep = finite_diff_check(loss_with, w.reshape(1, 1, -1),
                                grads_w[li].reshape(1, 1, -1), epsilon=1e-5,
                                tolerance=1e-5, max_probes=6, seed=li)
        worst = max(worst, rep.max_rel_err)
        worst_abs = max(worst_abs, rep.max_abs_err)
        probes += rep.probes
        ok = ok and rep.passed
    return worst, worst_abs, probes, 1e-5, ok


def run_gradcheck(args) -> int:
    errors = []
    _validate_common(args, errors)
    if errors:
        raise UsageError("; ".join(errors))
    os.makedirs(args.out, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    checks = [("one_step_backward",
               _gradcheck_one_step(rng, 50, inject=args.inject_error))]
    for t in (1, 3, 5):
        checks.append((f"unrolled_backward_T{t}",
                       _gradcheck_unrolled(rng, t, 12)))
    checks.append(("lambda_gradient", _gradcheck_lambda(rng, 12)))
    checks.append(("network_end_to_end", _gradcheck_network(rng)))

    lines = [GRADCHECK_HEADER]
    all_ok = True
    for name, (worst, worst_abs, probes, tol, ok) in checks:
        lines.append(f"{name},{probes},{worst:.3e},{worst_abs:.3e},"
                     f"{tol:.0e},{'pass' if ok else 'fail'}")
        print(lines[-1])
        all_ok = all_ok and ok
    with open(os.path.join(args.out, "gradcheck.csv"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    _write_manifest(os.path.join(args.out, "gradcheck_manifest.txt"),
                    "gradcheck", args, _GRAD_KEYS)
    return 0 if all_ok else 3


# ---------------------------------------------------------------------------

def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "rerun":
            replay = manifest_to_argv(args.manifest, out_override=args.out)
            args = parser.parse_args(replay)
        if args.command == "train":
            return run_train(args)
        if args.command == "sweep":
            return run_sweep(args)
        return run_gradcheck(args)
    except UsageError as exc:
        print(f"tvseg: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"tvseg: runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
