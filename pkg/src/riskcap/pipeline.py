"""End-to-end runs and ablation sweeps.

A run directory holds config.json, data/, ckpt-stage1, ckpt-stage2,
report.json, table.txt and log.txt. Nothing time-dependent goes into the
report, so identical configs give byte-identical report.json files.
"""

import json
import time
from pathlib import Path

from . import kernels, metrics
from . import training as tr
from .config import ABLATIONS, RunConfig
from .encoder import Backbones
from .scenes import generate, read_jsonl, split, write_jsonl

LABELS = {
    "full": "full (lo + hi + gate)",
    "no-lo": "w/o lo branch",
    "no-hi": "w/o hi branch",
    "concat": "w/o gate (concat)",
}


class PipelineError(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")
        self.stage = stage


class _Log:
    def __init__(self, path, echo=False):
        self.fh = open(path, "w", encoding="utf-8")
        self.echo = echo
        self.t0 = time.perf_counter()

    def __call__(self, msg):
        line = f"[{time.perf_counter() - self.t0:7.1f}s] {msg}"
        self.fh.write(line + "\n")
        self.fh.flush()
        if self.echo:
            print(line, flush=True)

    def close(self):
        self.fh.close()


def variant_label(cfg):
    if not cfg.use_lo:
        label, regress = LABELS["no-lo"], "hi-grid"
    elif not cfg.use_hi:
        label, regress = LABELS["no-hi"] + ("" if cfg.use_gate else ", concat"), "lo-grid"
    else:
        label, regress = LABELS["full" if cfg.use_gate else "concat"], "lo-grid"
    if cfg.regression_input != regress:
        label += f", regress from {cfg.regression_input}"
    return label


def load_or_generate(cfg, data_dir):
    """Scenes from ``cfg.data`` or ``data_dir/scenes.jsonl``, generating the latter if absent."""
    path = Path(cfg.data) if cfg.data else Path(data_dir) / "scenes.jsonl"
    if path.exists():
        records = read_jsonl(path)
        if len(records) != cfg.n_scenes:
            raise ValueError(f"{path} holds {len(records)} scenes, config asks for {cfg.n_scenes}")
        return records
    records = generate(cfg.seed, cfg.n_scenes)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_jsonl(records, path)
    return records


def run_pipeline(cfg, run_dir, echo=False):
    """gen-data (if absent) -> stage 1 -> stage 2 -> test-split evaluation."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(cfg.to_json())
    log = _Log(run_dir / "log.txt", echo)
    previous = kernels.BACKEND
    if cfg.kernels:
        kernels.use_backend(cfg.kernels)
    stage = "setup"
    try:
        log(f"config {cfg.hash()} seed {cfg.seed} kernels {kernels.BACKEND}")
        stage = "gen-data"
        records = load_or_generate(cfg, run_dir / "data")
        train, val, test = split(records, cfg.split, cfg.seed)
        log(f"scenes: {len(train)} train / {len(val)} val / {len(test)} test")
        stage = "features"
        bb = Backbones(cfg.seed, cfg.lo_channels, cfg.hi_channels)
        f_train, f_val, f_test = (tr.extract_features(r, bb) for r in (train, val, test))
        stage = "stage1"
        s1 = tr.train_stage1(train, val, cfg, f_train, f_val, log=log)
        h1 = tr.save_stage1(run_dir / "ckpt-stage1", s1, cfg, bb)
        stage = "stage2"
        s2 = tr.train_stage2(train, val, s1, cfg, f_train, f_val, log=log)
        h2 = tr.save_stage2(run_dir / "ckpt-stage2", s2, cfg, h1)
        stage = "eval"
        report, captions, _ = tr.evaluate(s1, s2, cfg, test, f_test)
        report.metadata.update({"stage1_sha256": h1, "stage2_sha256": h2, "variant": variant_label(cfg)})
        (run_dir / "report.json").write_text(report.to_json())
        (run_dir / "table.txt").write_text(
            f"config {cfg.hash()} seed {cfg.seed}\n" + metrics.format_table([(variant_label(cfg), report, None)]))
        log(f"scenario-clause acc {report.metadata['scenario_clause_accuracy']:.1f} "
            f"token acc {report.metadata['token_accuracy']:.1f} mIoU {report.miou:.1f} Acc {report.acc_05:.1f}")
        log("done")
    except Exception as exc:
        log(f"FAILED in {stage}: {exc!r}")
        raise PipelineError(stage, exc) from exc
    finally:
        log.close()
        kernels.use_backend(previous)
    return run_dir


def parse_axis(axis):
    """An ablation name (``no-lo``) or a ``field=value`` override."""
    if axis in ABLATIONS:
        return axis, dict(ABLATIONS[axis])
    if "=" in axis:
        key, value = axis.split("=", 1)
        default = getattr(RunConfig(), key.replace("-", "_"))
        if isinstance(default, bool):
            value = value.lower() in ("1", "true", "yes", "on")
        elif isinstance(default, (int, float)) and default is not None:
            value = type(default)(value)
        return axis, {key.replace("-", "_"): value}
    raise ValueError(f"unknown ablation axis {axis!r}; use one of {sorted(ABLATIONS)} or field=value")


def ablation_sweep(base, axes, root, echo=False):
    """Run ``base`` plus one variant per axis; a failing variant becomes a failed row.

    Returns (rows, table) with rows of (label, MetricReport or None, error).
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    data = base.data or str(root / "data" / "scenes.jsonl")
    variants = [("base", {})] + [parse_axis(a) for a in axes]
    rows, summary = [], []
    for name, change in variants:
        label = name
        try:
            cfg = base.replace(data=data, **change)
            label = variant_label(cfg) if name == "base" else LABELS.get(name, name)
            run_pipeline(cfg, root / name.replace("=", "-"), echo=echo)
            report = json.loads((root / name.replace("=", "-") / "report.json").read_text())
            rep = metrics.MetricReport(**{k: v for k, v in report.items() if k != "avg"})
            rows.append((label, rep, None))
            summary.append({"variant": name, "label": label, "avg": rep.avg, "b4": rep.b4, "miou": rep.miou})
        except Exception as exc:  # keep sweeping; the row records the failure
            rows.append((label, None, str(exc)))
            summary.append({"variant": name, "label": label, "error": str(exc)})
    table = f"config {base.hash()} seed {base.seed}\n" + metrics.format_table(rows)
    (root / "table.txt").write_text(table)
    (root / "sweep.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return rows, table
