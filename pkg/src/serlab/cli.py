"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 config error, 3 runtime or numeric error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checks
from . import config as C
from . import data as D
from . import eval as E
from . import group as G
from . import train as TR

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=d, help="config file (key = value lines); see defaults.cfg")
    p.add_argument("--seed", type=int, default=d, help="overrides train.seed")
    p.add_argument("--precision", choices=("f32", "f64"), default=d, help="overrides train.precision")
    p.add_argument("--out-dir", default=d, help="directory for outputs (default: current directory)")


def build_parser() -> argparse.ArgumentParser:
    defaults = "\n".join(f"  {k} = {C._fmt(v)}" for k, v in C.TrainConfig().items())
    p = _Parser(prog="serlab", description="Soft equivariance regularization lab.",
                epilog="config keys and defaults:\n" + defaults,
                formatter_class=argparse.RawDescriptionHelpFormatter)
    _global_flags(p, suppress=False)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, help_):
        sp = sub.add_parser(name, help=help_)
        _global_flags(sp, suppress=True)
        return sp

    sp = add("gen-data", "render the synthetic shapes dataset")
    sp.add_argument("--n", type=int, help="overrides data.n_images")
    sp.add_argument("--classes", type=int, help="overrides data.classes")
    sp.add_argument("--out", default="shapes.serd")

    sp = add("pretrain", "train an encoder")
    sp.add_argument("--resume", help="checkpoint to resume from")
    sp.add_argument("--data", help="overrides train.data")

    sp = add("probe", "evaluate a checkpoint with a probe")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--kind", choices=("linear", "knn", "mlp", "transform"), required=True)
    sp.add_argument("--data", help="labelled dataset (default eval.probe_data, then train.data)")
    sp.add_argument("--label", choices=("class", "orientation"), default="class")
    sp.add_argument("--task", choices=tuple(E.TASKS), default="rotation4", help="transform probe task")
    sp.add_argument("--layer", type=int, help="transform probe layer (default: depth)")
    sp.add_argument("--k", type=int, help="kNN neighbours (default 20 if >= 400 training samples, else 5)")
    sp.add_argument("--shuffle-labels", action="store_true", help="permutation-null control")
    sp.add_argument("--scatter", help="write a 2-D PCA scatter CSV of the probe features")

    sp = add("equiscore", "equivariance score of a checkpoint")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--layer", type=int, help="default: depth (final spatial tokens)")
    sp.add_argument("--family", choices=E.FAMILIES + ("all",), default="all")
    sp.add_argument("--data")
    sp.add_argument("--samples", type=int, help="overrides eval.equiv_samples")

    sp = add("ablate", "sweep one axis over values and seeds")
    sp.add_argument("--axis", choices=tuple(E.AXES), required=True)
    sp.add_argument("--values", required=True, help="comma-separated values")
    sp.add_argument("--seeds", default="0,1,2")
    sp.add_argument("--data")
    sp.add_argument("--probe-data")

    sp = add("flops", "analytic per-image training FLOPs")
    sp.add_argument("--paper", action="store_true", help="ViT-S/16 reference configuration")
    sp.add_argument("--r", type=float, help="overrides part.r")

    sp = add("check", "run the self-verification suites")
    sp.add_argument("--suite", action="append", choices=tuple(checks.SUITES))
    sp.add_argument("--mutate", choices=("rot90",), help="inject a known bug; the run must fail")
    return p


def effective_config(args) -> C.TrainConfig:
    cfg = C.parse_config(args.config) if args.config else C.TrainConfig()
    over = {}
    if args.seed is not None:
        over["train.seed"] = args.seed
    if args.precision is not None:
        over["train.precision"] = args.precision
    if getattr(args, "data", None) and args.command in ("pretrain", "ablate"):
        over["train.data"] = args.data
    if args.command == "gen-data":
        if args.n is not None:
            over["data.n_images"] = args.n
        if args.classes is not None:
            over["data.classes"] = args.classes
    if args.command == "equiscore" and args.samples is not None:
        over["eval.equiv_samples"] = args.samples
    if args.command == "flops" and args.r is not None:
        over["part.r"] = args.r
    return cfg.with_keys(over) if over else cfg


def _print_config(cfg: C.TrainConfig) -> None:
    print("# effective config")
    sys.stdout.write(C.dump(cfg))
    sys.stdout.flush()


def _out_dir(args) -> Path:
    return Path(args.out_dir) if args.out_dir else Path(".")


def _labelled(args, cfg: C.TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    path = getattr(args, "data", None) or cfg.probe_data or cfg.data
    if not path:
        raise C.ConfigError("no labelled dataset: pass --data or set eval.probe_data")
    return D.read_dataset(path)


def cmd_gen_data(args, cfg):
    spec = D.SyntheticSpec(cfg.n_images, cfg.image, cfg.patch, cfg.n_classes)
    out = Path(args.out)
    if not out.is_absolute() and args.out_dir:
        out = _out_dir(args) / out
    path = D.gen_data(spec, cfg.data_seed, out)
    print(f"wrote {spec.n_images} images to {path}")


def _write_defaults(out: Path) -> None:
    TR._atomic_bytes(out / "defaults.cfg", C.defaults_text().encode("utf-8"))


def cmd_pretrain(args, cfg):
    out = _out_dir(args)
    _write_defaults(out)
    res = TR.run_pretrain(cfg, out, resume=args.resume, log_every=50)
    w = E.csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(TR.METRIC_COLUMNS)
    for r in res.rows:
        w.writerow([r[k] for k in TR.METRIC_COLUMNS])
    if res.final is not None:
        print(f"checkpoint: {res.final.path}")


def cmd_probe(args, cfg):
    learner = TR.load_learner(args.ckpt)
    enc = learner.encoder
    images, labels = _labelled(args, learner.cfg)
    images = images.astype(enc.dtype)
    rows = []
    if args.kind == "transform":
        layer = enc.cfg.depth if args.layer is None else args.layer
        res = E.transform_probe(images, args.task, E.encoder_featurizer(enc, layer), seed=cfg.seed,
                                shuffle_labels=args.shuffle_labels, layer=layer, epochs=cfg.probe_epochs)
        rows.append({"kind": "transform", "task": args.task, "layer": layer, "top1": res.accuracy,
                     "top5": "", "chance": res.chance_floor, "n_val": res.n_val})
        feats, lab = None, None
    else:
        col = 0 if args.label == "class" else 1
        feats = E.class_features(enc, images) if col == 0 else E.orientation_features(enc, images)
        lab = labels[:, col].astype(np.intp)
        if args.shuffle_labels:
            lab = np.random.default_rng(cfg.seed).permutation(lab)
        ds = E.make_probe_dataset(feats, lab, cfg.seed)
        if args.kind == "linear":
            res = E.linear_probe(ds, epochs=cfg.probe_epochs, seed=cfg.seed)
        elif args.kind == "mlp":
            res = E.mlp_probe(ds, epochs=cfg.probe_epochs, seed=cfg.seed)
        else:
            k = args.k if args.k is not None else (cfg.knn_k or None)
            res = E.knn_probe(ds, k)
        rows.append({"kind": args.kind, "task": args.label, "layer": "", "top1": res.top1,
                     "top5": "" if res.top5 is None else res.top5, "chance": res.chance, "n_val": res.n_val})
    cols = ("kind", "task", "layer", "top1", "top5", "chance", "n_val")
    E.write_csv(_out_dir(args) / f"probe_{args.kind}.csv", rows, cols)
    _emit_csv(rows, cols)
    if args.scatter:
        if feats is None:
            raise C.ConfigError("--scatter applies to linear, knn and mlp probes")
        pts = E.scatter_2d(feats, labels)
        E.write_csv(args.scatter, pts, list(pts[0]))


def _emit_csv(rows, cols):
    w = E.csv.DictWriter(sys.stdout, fieldnames=list(cols), lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow(r)


def cmd_equiscore(args, cfg):
    learner = TR.load_learner(args.ckpt)
    enc = learner.encoder
    images, _ = _labelled(args, learner.cfg)
    images = images.astype(enc.dtype)
    fams = E.FAMILIES if args.family == "all" else (args.family,)
    rep = E.equivariance_report(enc, images, args.layer, cfg.equiv_samples, cfg.seed, learner.cfg.geo, fams)
    print(f"# representation: {rep.representation}")
    print(f"# note: {rep.note}")
    rows = [{"family": f, "layer": rep.layer, "score": s, "n_samples": rep.n_samples} for f, s in rep.scores.items()]
    cols = ("family", "layer", "score", "n_samples")
    E.write_csv(_out_dir(args) / "equiscore.csv", rows, cols)
    _emit_csv(rows, cols)


def _parse_values(axis: str, text: str) -> list:
    vals = [v.strip() for v in text.split(",") if v.strip()]
    if not vals:
        raise C.ConfigError("--values is empty")
    return vals


def cmd_ablate(args, cfg):
    if not cfg.data:
        raise C.ConfigError("train.data: a pretraining dataset is required (--data)")
    images, _ = D.read_dataset(cfg.data)
    probe_path = args.probe_data or cfg.probe_data or cfg.data
    pimg, plab = D.read_dataset(probe_path)
    values = _parse_values(args.axis, args.values)
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    for v in values:  # fail fast on bad values before any training
        E.sweep_config(cfg, args.axis, v, seeds[0])
    out = _out_dir(args)
    _write_defaults(out)
    rows = E.ablation_sweep(cfg, args.axis, values, seeds, images, pimg.astype(np.dtype(cfg.dtype)), plab,
                            out_csv=out / f"ablate_{args.axis}.csv", out_dir=out / "runs")
    _emit_csv(rows, E.SWEEP_COLUMNS)


def cmd_flops(args, cfg):
    m = E.paper_flops_model(cfg.r if args.r is not None else 0.01) if args.paper else E.FlopsModel.from_config(cfg)
    base = E.flops_estimate(m, with_ser=False)
    ser = E.flops_estimate(m, with_ser=True)
    rows = [{"config": "paper" if args.paper else "desk", "r": m.r, "baseline_flops": base.baseline,
             "ser_flops": ser.ser, "ratio": ser.ratio}]
    _emit_csv(rows, ("config", "r", "baseline_flops", "ser_flops", "ratio"))


def cmd_check(args, cfg):
    results = checks.run_suites(args.suite, args.mutate)
    ok = True
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.name} ({r.seconds:.2f} s): {r.detail}")
        if not r.passed:
            ok = False
            print("counterexample: " + json.dumps(r.counterexample, sort_keys=True, default=str))
    if not ok:
        raise TR.TrainError("self-check failed")


COMMANDS = {"gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "probe": cmd_probe, "equiscore": cmd_equiscore,
            "ablate": cmd_ablate, "flops": cmd_flops, "check": cmd_check}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            parser.print_help()
            return EXIT_USAGE
    except UsageError as exc:
        print(f"serlab: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        cfg = effective_config(args)
        _print_config(cfg)
        COMMANDS[args.command](args, cfg)
    except C.ConfigError as exc:
        print(f"serlab: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TR.TrainError, D.DataError, E.EvalError, G.AlignmentError, OSError, ValueError,
            ArithmeticError) as exc:
        if isinstance(exc, TR.NonFiniteLossError):
            print("diagnostic: " + json.dumps(exc.diagnostic, sort_keys=True), file=sys.stderr)
        print(f"serlab: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
