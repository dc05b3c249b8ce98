"""
Command-line front end.

    edgestorm gen       --n 200 --size 64 --seed 7 --out data/
    edgestorm train     --data data/ --kind edge --out runs/edge
    edgestorm attack    --model runs/edge/model.ckpt --data data/ --variant I --out runs/adv
    edgestorm eval      --model runs/edge/model.ckpt --data runs/adv --out runs/eval
    edgestorm metrics   --orig data/ --adv runs/adv --out runs/metrics
    edgestorm transfer  --edge-model ... --cls-model ... --data data/ --variant A --out runs/xfer

Option values are resolved as command line > ``--config`` file > built-in
defaults. The default seed can be overridden with ``EDGESTORM_SEED``. Every
command writes ``manifest.json`` into its output directory; on failure a
single JSON line is printed to stderr and the exit status is nonzero.
"""

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from functools import partial
from pathlib import Path

import numpy as np

from edgestorm import __version__, attacks, edgenet, evaluation, metrics, netpbm, plotting, synth, transfer
from edgestorm.errors import (
    DegenerateGradient,
    GraphConsumed,
    NonFinite,
    ParseError,
    RejectedInput,
    TrainingFailure,
    UndefinedMetric,
)

SWEEP_EPSILONS = (0, 1, 2, 4, 8, 16)
CHUNK = 10  # images per work unit; fixed so results never depend on --jobs
SEED_ENV = "EDGESTORM_SEED"

# name -> (type, default). Defaults follow the attack settings used throughout.
OPTIONS = {
    "n": (int, 200),
    "size": (int, 64),
    "seed": (int, 0),
    "kind": (str, "edge"),
    "epochs": (int, None),
    "lr": (float, None),
    "batch_size": (int, 10),
    "variant": (str, "U"),
    "opt": (str, "mi"),
    "eps": (float, 16.0),
    "alpha": (float, 2.0),
    "mu": (float, 0.5),
    "iters": (int, 10),
    "diversity": (float, None),
    "selector": (str, "all"),
    "pred_from": (str, "images"),
    "pred_dir": (str, None),
    "sweep": (bool, False),
    "sides": (bool, False),
    "reverse": (bool, False),
    "jobs": (int, None),
}


class CLIError(Exception):
    pass


# -- configuration ------------------------------------------------------------------


def read_config(path):
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise CLIError(f"cannot read config {path}: {exc.strerror}") from None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CLIError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in OPTIONS and key not in ("data", "model", "edge_model", "cls_model", "orig", "adv"):
            raise CLIError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = value
    return out


def _convert(key, value):
    kind = OPTIONS[key][0] if key in OPTIONS else str
    if kind is bool:
        v = str(value).strip().lower()
        if v not in ("1", "0", "true", "false", "yes", "no"):
            raise CLIError(f"{key}: expected a boolean, got {value!r}")
        return v in ("1", "true", "yes")
    try:
        return kind(value)
    except ValueError:
        raise CLIError(f"{key}: cannot read {value!r} as {kind.__name__}") from None


def default_seed():
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return OPTIONS["seed"][1]
    try:
        return int(raw)
    except ValueError:
        raise CLIError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def resolve(args):
    """Merge flags over the config file over defaults, in place."""
    file_values = read_config(args.config) if args.config else {}
    for key, value in vars(args).items():
        if value is not None or key in ("config", "command", "func", "out"):
            continue
        if key in file_values:
            setattr(args, key, _convert(key, file_values[key]))
        elif key == "seed":
            args.seed = default_seed()
        elif key in OPTIONS:
            setattr(args, key, OPTIONS[key][1])
    if getattr(args, "jobs", None) is None:
        args.jobs = os.cpu_count() or 1
    if args.jobs < 1:
        raise CLIError("--jobs must be at least 1")
    return args


# -- small helpers --------------------------------------------------------------------


def _outdir(path):
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_manifest(out, args, extra=None):
    skip = {"func", "out", "jobs", "config"}
    settings = {k: v for k, v in sorted(vars(args).items()) if k not in skip}
    manifest = {"tool": "edgestorm", "version": __version__, "command": args.command, "settings": settings}
    if extra:
        manifest.update(extra)
    with open(Path(out) / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([f"{v:.6f}" if isinstance(v, (float, np.floating)) else v for v in row])


def fan_out(func, items, jobs):
    """Ordered map over ``items``; a process pool is used when ``jobs > 1``."""
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [func(it) for it in items]
    with ProcessPoolExecutor(max_workers=min(jobs, len(items))) as pool:
        return list(pool.map(func, items))


def _chunks(n):
    return [(s, min(s + CHUNK, n)) for s in range(0, n, CHUNK)]


def attack_config(args):
    return attacks.AttackConfig(
        variant=args.variant,
        optimizer=args.opt,
        epsilon=args.eps,
        alpha=args.alpha,
        mu=args.mu,
        iterations=args.iters,
        diversity_prob=args.diversity,
        selector=args.selector,
        seed=args.seed,
    )


def _attack_chunk(bounds, model, images, edges, config):
    lo, hi = bounds
    return attacks.run_attack_batched(model, images[lo:hi], edges[lo:hi], config, batch_size=CHUNK, offset=lo)


def attack_dataset(model, images, edges, config, jobs):
    parts = fan_out(partial(_attack_chunk, model=model, images=images, edges=edges, config=config), _chunks(len(images)), jobs)
    return attacks.AttackResult(
        np.concatenate([p.adversarial for p in parts]),
        np.concatenate([p.perturbation for p in parts]),
        np.concatenate([p.loss_trace for p in parts]),
        stopped_early=np.concatenate([p.stopped_early for p in parts]),
    )


def quantize(adversarial, original, epsilon):
    """Round to 8 bits without leaving the epsilon ball or [0, 255]."""
    x0 = np.asarray(original, dtype=np.float64)
    q = np.clip(np.rint(adversarial), np.ceil(x0 - epsilon), np.floor(x0 + epsilon))
    return np.clip(q, 0, 255).astype(np.uint8)


def _eval_chunk(bounds, probs, gts, apply_nms):
    lo, hi = bounds
    return evaluation.evaluate(probs[lo:hi], gts[lo:hi], apply_nms=apply_nms).per_image


def evaluate_maps(probs, gts, jobs, apply_nms=True):
    probs, gts = np.asarray(probs), np.asarray(gts)
    if len(probs) != len(gts):
        raise RejectedInput("predictions and ground truths are not aligned")
    parts = fan_out(partial(_eval_chunk, probs=probs, gts=gts, apply_nms=apply_nms), _chunks(len(probs)), jobs)
    return evaluation.BoundaryReport(evaluation.default_thresholds(), np.concatenate(parts))


def _predict_chunk(bounds, model, images):
    lo, hi = bounds
    return model.predict(images[lo:hi])


def predict(model, images, jobs):
    return np.concatenate(fan_out(partial(_predict_chunk, model=model, images=images), _chunks(len(images)), jobs))


def _curve_rows(report):
    return [(p.threshold, p.tp, p.fp, p.fn, p.precision, p.recall, p.f) for p in report.curve()]


CURVE_HEADER = ["threshold", "tp", "fp", "fn", "precision", "recall", "f"]


# -- commands ---------------------------------------------------------------------


def cmd_gen(args):
    if args.size % 16:
        raise RejectedInput(f"--size {args.size} is not a multiple of 16; try {max(16, args.size // 16 * 16)}")
    data = synth.generate_dataset(args.n, args.size, args.seed)
    out = _outdir(args.out)
    synth.write_dataset(data, out)
    write_manifest(out, args, {"n_images": len(data), "class_counts": np.bincount(data.labels, minlength=3).tolist()})
    plotting.example_grid(data.images, data.images, out / "examples.png", edges_clean=data.edges, n=min(6, args.n))


def cmd_train(args):
    data = synth.read_dataset(args.data)
    out = _outdir(args.out)
    if args.kind == "edge":
        epochs = 30 if args.epochs is None else args.epochs
        lr = 1.0 if args.lr is None else args.lr
        res = edgenet.train(edgenet.EdgeModel.init(args.seed), data.images, data.edges, epochs, lr, args.seed, args.batch_size)
        res.model.save(out / "model.ckpt")
        _write_csv(out / "loss.csv", ["epoch", "total_loss"], [(i + 1, v) for i, v in enumerate(res.loss_trace)])
        plotting.loss_trace(res.loss_trace, out / "loss.png", ylabel="total loss per pixel")
        clean = evaluate_maps(predict(res.model, data.images, args.jobs), data.edges, args.jobs).ods()
        extra = {"epochs": epochs, "lr": lr, "train_ods_f": round(clean.f, 6)}
    elif args.kind == "cls":
        epochs = 80 if args.epochs is None else args.epochs
        lr = 0.003 if args.lr is None else args.lr
        res = transfer.train_classifier(transfer.Classifier.init(args.seed), data.images, data.labels, epochs, lr, args.seed, args.batch_size)
        res.model.save(out / "model.ckpt")
        rows = [(i + 1, l, a) for i, (l, a) in enumerate(zip(res.loss_trace, res.accuracy_trace))]
        _write_csv(out / "accuracy.csv", ["epoch", "loss", "accuracy"], rows)
        plotting.loss_trace(res.loss_trace, out / "loss.png", ylabel="cross-entropy", second=res.accuracy_trace, second_label="accuracy")
        extra = {"epochs": epochs, "lr": lr}
    else:
        raise RejectedInput(f"--kind must be 'edge' or 'cls', not {args.kind!r}")
    write_manifest(out, args, extra)


def cmd_attack(args):
    model = edgenet.EdgeModel.load(args.model)
    data = synth.read_dataset(args.data)
    config = attack_config(args)
    res = attack_dataset(model, data.images, data.edges, config, args.jobs)
    adv = quantize(res.adversarial, data.images, config.epsilon)
    out = _outdir(args.out)
    synth.write_dataset(synth.Dataset(adv, data.edges, data.labels), out)
    (out / "perturbations").mkdir(exist_ok=True)
    delta = adv.astype(np.int16) - data.images.astype(np.int16)
    for i, d in enumerate(delta):
        np.savetxt(out / "perturbations" / f"{i:04d}.txt", d.reshape(d.shape[0], -1), fmt="%d")
    steps = res.loss_trace.shape[1]
    _write_csv(out / "loss_trace.csv", ["index"] + [f"iter{k}" for k in range(steps)], [[i, *map(float, t)] for i, t in enumerate(res.loss_trace)])
    plotting.attack_traces(res.loss_trace, out / "loss_trace.png")
    plotting.example_grid(
        data.images, adv, out / "examples.png", model.predict(data.images[:4]), model.predict(adv[:4].astype(np.float64))
    )
    linf = int(np.abs(delta).max()) if delta.size else 0
    write_manifest(
        out,
        args,
        {"attack": config.as_dict(), "name": config.name, "n_images": len(adv), "max_abs_perturbation": linf,
         "stopped_early": int(res.stopped_early.sum())},
    )


def _load_preds(args, data):
    if args.pred_from == "images":
        if not args.model:
            raise RejectedInput("--pred-from images needs --model")
        return predict(edgenet.EdgeModel.load(args.model), data.images, args.jobs)
    if args.pred_from == "dir":
        if not args.pred_dir:
            raise RejectedInput("--pred-from dir needs --pred-dir")
        d = Path(args.pred_dir)
        names = sorted(p.name for p in d.glob("*.pgm"))
        if len(names) != len(data):
            raise RejectedInput(f"{d} holds {len(names)} .pgm maps for {len(data)} images")
        return np.stack([netpbm.read(d / n, expect="P5").astype(np.float64) / 255.0 for n in names])
    raise RejectedInput(f"--pred-from must be 'images' or 'dir', not {args.pred_from!r}")


def cmd_eval(args):
    data = synth.read_dataset(args.data)
    out = _outdir(args.out)
    probs = _load_preds(args, data)
    report = evaluate_maps(probs, data.edges, args.jobs)
    ods, ois = report.ods(), report.ois()
    _write_csv(out / "pr_curve.csv", CURVE_HEADER, _curve_rows(report))
    summary = {
        "n_images": len(data),
        "ods": {"threshold": round(ods.threshold, 6), "precision": round(ods.precision, 6),
                "recall": round(ods.recall, 6), "f": round(ods.f, 6)},
        "ois": {"precision": round(ois.precision, 6), "recall": round(ois.recall, 6), "f": round(ois.f, 6)},
        "tolerance_px": evaluation.match_tolerance(*data.edges.shape[1:]),
    }
    curves = {"clean": report.curve()}
    if args.sweep or args.sides:
        model = edgenet.EdgeModel.load(args.model) if args.model else None
        if model is None:
            raise RejectedInput("--sweep and --sides need --model")
        base = attack_config(args)
    if args.sweep:
        table = {}
        for variant in attacks.VARIANTS:
            scores = []
            for eps in SWEEP_EPSILONS:
                cfg = base.with_(variant=variant, epsilon=float(eps))
                adv = quantize(attack_dataset(model, data.images, data.edges, cfg, args.jobs).adversarial, data.images, eps)
                rep = evaluate_maps(predict(model, adv.astype(np.float64), args.jobs), data.edges, args.jobs)
                scores.append(rep.ods().f)
                if eps == SWEEP_EPSILONS[-1]:
                    curves[cfg.name] = rep.curve()
            table[base.with_(variant=variant).name] = scores
        names = list(table)
        _write_csv(out / "sweep.csv", ["epsilon", *names], [[eps, *(table[n][k] for n in names)] for k, eps in enumerate(SWEEP_EPSILONS)])
        plotting.epsilon_sweep(SWEEP_EPSILONS, table, out / "sweep.png")
        summary["sweep"] = {n: [round(v, 6) for v in table[n]] for n in names}
    if args.sides:
        scores = {}
        for m in range(1, edgenet.N_SIDE + 1):
            cfg = base.with_(selector=m)
            adv = quantize(attack_dataset(model, data.images, data.edges, cfg, args.jobs).adversarial, data.images, cfg.epsilon)
            scores[f"side-{m}"] = evaluate_maps(predict(model, adv.astype(np.float64), args.jobs), data.edges, args.jobs).ods().f
        _write_csv(out / "side_outputs.csv", ["selector", "ods_f"], [(k, v) for k, v in scores.items()])
        plotting.side_output_bars(scores, ods.f, out / "side_outputs.png")
        summary["side_outputs"] = {k: round(v, 6) for k, v in scores.items()}
    _write_json(out / "summary.json", summary)
    plotting.pr_curves(curves, out / "pr.png")
    write_manifest(out, args)


def _attack_name(directory):
    """Attack name from a directory written by ``attack``; plain datasets count as unattacked."""
    try:
        with open(Path(directory) / "manifest.json") as fh:
            return json.load(fh).get("name", "unattacked")
    except (OSError, ValueError):
        return "unattacked"


def cmd_metrics(args):
    orig = synth.read_dataset(args.orig).images
    adv = synth.read_dataset(args.adv).images
    if orig.shape != adv.shape:
        raise RejectedInput(f"original {orig.shape} and attacked {adv.shape} sets differ in shape")
    rows = [metrics.degradation_row(x, y) for x, y in zip(orig, adv)]
    keys = ("l2", "ssim", "essim", "laplacian")
    mean = {k: float(np.mean([r[k] for r in rows])) for k in keys}
    out = _outdir(args.out)
    name = _attack_name(args.adv)
    table = [[name, i, *(r[k] for k in keys)] for i, r in enumerate(rows)]
    table.append([name, "mean", *(mean[k] for k in keys)])
    _write_csv(out / "metrics.csv", ["attack", "image", *keys], table)
    plotting.degradation_bars({"mean": mean}, out / "metrics.png")
    write_manifest(out, args, {"mean": {k: round(v, 6) for k, v in mean.items()}})


def _transfer_chunk(bounds, edge_model, images, config):
    lo, hi = bounds
    return transfer.craft_edge_attacks(edge_model, images[lo:hi], config, CHUNK, offset=lo)


def cmd_transfer(args):
    edge_model = edgenet.EdgeModel.load(args.edge_model)
    classifier = transfer.Classifier.load(args.cls_model)
    data = synth.read_dataset(args.data)
    config = attack_config(args)
    out = _outdir(args.out)
    parts = fan_out(partial(_transfer_chunk, edge_model=edge_model, images=data.images, config=config), _chunks(len(data)), args.jobs)
    adversarial = np.concatenate(parts)
    report = transfer.transfer_experiment(edge_model, classifier, data.images, data.labels, config, adversarial=adversarial)
    result = report.as_dict()
    result["ordering_holds"] = bool(report.attacked < report.permuted)
    result["attack"] = config.as_dict()
    if args.reverse:
        rev = transfer.reverse_transfer_check(classifier, edge_model, data.images, data.edges, config)
        result["reverse"] = rev.as_dict()
        # the edge-attack images from above, scored the same way, for comparison
        direct = evaluation.evaluate(edge_model.predict(adversarial), data.edges).ods().f
        result["reverse"]["direct_f_attacked"] = round(direct, 4)
    _write_json(out / "report.json", result)
    plotting.accuracy_bars(report, out / "accuracy.png")
    write_manifest(out, args, {"attack": config.as_dict(), "name": config.name})


# -- argument parsing ---------------------------------------------------------------


def _attack_flags(p):
    p.add_argument("--variant", help="U, S, A or I (default U)")
    p.add_argument("--opt", help="fgsm, mi or mdi2 (default mi)")
    p.add_argument("--eps", type=float, help="L-inf budget on the 0-255 scale (default 16)")
    p.add_argument("--alpha", type=float, help="step size (default 2)")
    p.add_argument("--mu", type=float, help="momentum decay (default 0.5)")
    p.add_argument("--iters", type=int, help="iterations (default 10)")
    p.add_argument("--diversity", type=float, help="transform probability for mdi2 (default 0.5)")
    p.add_argument("--selector", help="'all' or a side output 1..5 (default all)")


def build_parser():
    parser = argparse.ArgumentParser(prog="edgestorm", description="Adversarial attacks on a multi-scale edge network.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value file; flags override it")
    common.add_argument("--seed", type=int, help=f"random seed (default 0, or ${SEED_ENV})")
    common.add_argument("--jobs", type=int, help="worker processes (default: all cores)")
    common.add_argument("--out", required=True, help="output directory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="write a synthetic dataset")
    p.add_argument("--n", type=int)
    p.add_argument("--size", type=int)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", parents=[common], help="train the edge model or the shape classifier")
    p.add_argument("--data")
    p.add_argument("--kind", help="edge or cls")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", parents=[common], help="craft adversarial images against the edge model")
    p.add_argument("--model")
    p.add_argument("--data")
    _attack_flags(p)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("eval", parents=[common], help="boundary precision/recall and ODS/OIS")
    p.add_argument("--model")
    p.add_argument("--data")
    p.add_argument("--pred-from", help="images (run --model) or dir (read --pred-dir)")
    p.add_argument("--pred-dir")
    p.add_argument("--sweep", action="store_const", const=True, help="epsilon sweep over all four variants")
    p.add_argument("--sides", action="store_const", const=True, help="attack each side output alone")
    _attack_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("metrics", parents=[common], help="image degradation table")
    p.add_argument("--orig")
    p.add_argument("--adv")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("transfer", parents=[common], help="edge attacks against the shape classifier")
    p.add_argument("--edge-model")
    p.add_argument("--cls-model")
    p.add_argument("--data")
    p.add_argument("--reverse", action="store_const", const=True, help="also attack the classifier and score edges")
    _attack_flags(p)
    p.set_defaults(func=cmd_transfer)
    return parser


REQUIRED = {
    "train": ("data",),
    "attack": ("model", "data"),
    "eval": ("data",),
    "metrics": ("orig", "adv"),
    "transfer": ("edge_model", "cls_model", "data"),
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        resolve(args)
        for key in REQUIRED.get(args.command, ()):
            if getattr(args, key, None) is None:
                raise CLIError(f"--{key.replace('_', '-')} is required")
        args.func(args)
    except (CLIError, RejectedInput, ParseError, TrainingFailure, NonFinite, UndefinedMetric,
            DegenerateGradient, GraphConsumed, OSError) as exc:
        kind = type(exc).__name__
        print(json.dumps({"error": kind, "message": str(exc)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
