"""Command-line entry point (``riskcap``).

Every RunConfig field is a flag (``--epochs1 5``, ``--no-use-gate``).
Environment variables are never consulted for run settings; pick the
kernel backend with ``--kernels``.
"""

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import checkpoint, kernels, metrics
from . import training as tr
from .config import RunConfig
from .encoder import Backbones
from .scenes import generate, read_jsonl, split, write_jsonl

_SKIP = {"data"}


def _add_config_flags(p):
    g = p.add_argument_group("run config")
    for f in dataclasses.fields(RunConfig):
        if f.name in _SKIP:
            continue
        flag = "--" + f.name.replace("_", "-")
        default = f.default
        if isinstance(default, bool):
            g.add_argument(flag, action=argparse.BooleanOptionalAction, default=argparse.SUPPRESS)
        elif isinstance(default, tuple):
            g.add_argument(flag, type=float, nargs=len(default), default=argparse.SUPPRESS)
        elif f.name == "kernels":
            g.add_argument(flag, choices=("numpy", "numba"), default=argparse.SUPPRESS)
        else:
            g.add_argument(flag, type=type(default), default=argparse.SUPPRESS)


def _overrides(args):
    names = {f.name for f in dataclasses.fields(RunConfig)} - _SKIP
    return {k: v for k, v in vars(args).items() if k in names}


def _config(args, base=None):
    d = (base or RunConfig()).to_dict()
    d.update(_overrides(args))
    return RunConfig.from_dict(d)


def _splits(cfg, path):
    records = read_jsonl(path)
    if not records:
        raise SystemExit(f"{path}: no scenes")
    return split(records, cfg.split, cfg.seed)


def _features(cfg, *parts):
    bb = Backbones(cfg.seed, cfg.lo_channels, cfg.hi_channels)
    return bb, [tr.extract_features(p, bb) for p in parts]


def cmd_gen_data(args):
    recs = generate(args.seed, args.count)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_jsonl(recs, args.out)
    print(f"wrote {len(recs)} scenes to {args.out}")


def cmd_train_stage1(args):
    cfg = _config(args)
    train, val, _ = _splits(cfg, args.data)
    bb, (f_tr, f_va) = _features(cfg, train, val)
    s1 = tr.train_stage1(train, val, cfg, f_tr, f_va)
    digest = tr.save_stage1(args.out, s1, cfg, bb)
    print(f"stage-1 checkpoint {args.out} sha256 {digest}")


def cmd_train_stage2(args):
    _, header = checkpoint.load(args.stage1)
    cfg = _config(args, RunConfig.from_dict(header["config"]))
    s1 = tr.load_stage1(args.stage1, cfg)
    train, val, _ = _splits(cfg, args.data)
    _, (f_tr, f_va) = _features(cfg, train, val)
    s2 = tr.train_stage2(train, val, s1, cfg, f_tr, f_va)
    digest = tr.save_stage2(args.out, s2, cfg, checkpoint.file_hash(args.stage1))
    print(f"stage-2 checkpoint {args.out} sha256 {digest}")


def _load_pair(args):
    s2, header = tr.load_stage2(args.stage2)
    cfg = RunConfig.from_dict(header["config"])
    if header["metadata"].get("stage1_sha256") != checkpoint.file_hash(args.stage1):
        raise SystemExit("stage-2 checkpoint was not trained on this stage-1 checkpoint")
    return tr.load_stage1(args.stage1, cfg), s2, cfg


def cmd_eval(args):
    s1, s2, cfg = _load_pair(args)
    parts = dict(zip(("train", "val", "test"), _splits(cfg, args.data)))
    recs = parts[args.split]
    _, (feats,) = _features(cfg, recs)
    report, _, _ = tr.evaluate(s1, s2, cfg, recs, feats)
    print(metrics.format_table([(args.split, report, None)]), end="")
    if args.out:
        Path(args.out).write_text(report.to_json())


def cmd_decode(args):
    s1 = tr.load_stage1(args.stage1)
    cfg = RunConfig.from_dict(checkpoint.load(args.stage1)[1]["config"])
    parts = dict(zip(("train", "val", "test"), _splits(cfg, args.data)))
    recs = parts[args.split][:args.limit]
    _, (feats,) = _features(cfg, recs)
    for rec, cap in zip(recs, tr.decode_captions(s1, feats, args.max_len)):
        print(json.dumps({"id": rec.id, "caption": cap, "reference": rec.caption_text}))


def cmd_grad_check(args):
    from .checks import run_grad_checks

    worst = run_grad_checks(range(args.seed, args.seed + args.seeds), end_to_end=not args.primitives_only)
    for name, err in sorted(worst.items()):
        print(f"{'ok  ' if err < args.tol else 'FAIL'} {name:24s} {err:.3e}")
    bad = [n for n, e in worst.items() if not e < args.tol]
    print(f"max relative error {max(worst.values()):.3e} over {args.seeds} seed(s)")
    return 1 if bad else 0


def cmd_run(args):
    from .pipeline import run_pipeline

    cfg = _config(args)
    if args.data:
        cfg = cfg.replace(data=args.data)
    out = run_pipeline(cfg, args.out, echo=not args.quiet)
    print((out / "table.txt").read_text(), end="")


def cmd_sweep(args):
    from .pipeline import ablation_sweep

    cfg = _config(args)
    if args.data:
        cfg = cfg.replace(data=args.data)
    rows, table = ablation_sweep(cfg, args.axes, args.out, echo=not args.quiet)
    print(table, end="")
    return 1 if any(r[1] is None for r in rows) else 0


def build_parser():
    p = argparse.ArgumentParser(prog="riskcap", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", help="generate synthetic scenes as JSONL")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--count", type=int, default=1000)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_gen_data)

    s = sub.add_parser("train-stage1", help="train encoder heads, fusion and caption LM")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    _add_config_flags(s)
    s.set_defaults(fn=cmd_train_stage1)

    s = sub.add_parser("train-stage2", help="train the box regressor on a frozen stage-1 checkpoint")
    s.add_argument("--data", required=True)
    s.add_argument("--stage1", required=True)
    s.add_argument("--out", required=True)
    _add_config_flags(s)
    s.set_defaults(fn=cmd_train_stage2)

    s = sub.add_parser("eval", help="score a checkpoint pair on one split")
    s.add_argument("--data", required=True)
    s.add_argument("--stage1", required=True)
    s.add_argument("--stage2", required=True)
    s.add_argument("--split", choices=("train", "val", "test"), default="test")
    s.add_argument("--out", help="write the report JSON here")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("decode", help="greedy captions from a stage-1 checkpoint")
    s.add_argument("--data", required=True)
    s.add_argument("--stage1", required=True)
    s.add_argument("--split", choices=("train", "val", "test"), default="test")
    s.add_argument("--limit", type=int, default=None)
    s.add_argument("--max-len", type=int, default=64)
    s.set_defaults(fn=cmd_decode)

    s = sub.add_parser("grad-check", help="finite-difference check of every primitive and both losses")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--seeds", type=int, default=20)
    s.add_argument("--tol", type=float, default=1e-4)
    s.add_argument("--primitives-only", action="store_true")
    s.set_defaults(fn=cmd_grad_check)

    for name, fn, text in (("run", cmd_run, "full pipeline into one run directory"),
                           ("sweep", cmd_sweep, "base run plus one run per ablation axis")):
        s = sub.add_parser(name, help=text)
        s.add_argument("--out", required=True)
        s.add_argument("--data", help="existing scenes JSONL (otherwise generated under the run dir)")
        s.add_argument("--quiet", action="store_true")
        if name == "sweep":
            s.add_argument("--axes", nargs="*", default=["no-lo", "no-hi", "concat"],
                           help="ablation names (no-lo, no-hi, concat) or field=value overrides")
        _add_config_flags(s)
        s.set_defaults(fn=fn)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    backend = getattr(args, "kernels", None)
    if backend:
        kernels.use_backend(backend)
    return args.fn(args) or 0


if __name__ == "__main__":
    sys.exit(main())
