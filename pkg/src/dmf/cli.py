"""Command line entry point: ``dmf gen | train | eval | verify | bench``.

Settings come from an optional TOML file (one table per subcommand plus a
top-level ``seed``) and are overridden by flags. Unknown keys are errors.
Every run logs its resolved settings; reports are JSON on stdout or --out.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import tempfile
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import tomli

from .data import SyntheticConfig, gen_synthetic, load_interactions, write_dataset
from .experiment import prepare_examples
from .features import MultimodalTable
from .model import (STRATEGIES, ConfigError, ModelConfig, encode, init_params, load_checkpoint, preset,
                    save_checkpoint)
from .serving import SERVING_STRATEGIES, ScoringEngine, flops_kv, qps_bench, to_csv
from .training import AdamState, evaluate, train_epoch
from .verify import run_all

log = logging.getLogger("dmf")

MODEL_KEYS = tuple(f.name for f in fields(ModelConfig) if f.name not in ("strategy", "alpha"))
DATA_KEYS = tuple(f.name for f in fields(SyntheticConfig))


@dataclass
class GenSettings:
    out: str | None = None
    data: dict = field(default_factory=dict)  # SyntheticConfig fields


@dataclass
class TrainSettings:
    data: str | None = None
    checkpoint: str | None = None
    out: str | None = None
    strategy: str = "dmf"
    alpha: list = field(default_factory=lambda: [0.5])
    epochs: int = 3
    resume: str | None = None
    preset: str = "amazon"
    valid_fraction: float = 0.1
    seed: int = 0
    model: dict = field(default_factory=dict)  # ModelConfig overrides


@dataclass
class EvalSettings:
    checkpoint: str | None = None
    data: str | None = None
    multimodal: str | None = None
    out: str | None = None


@dataclass
class VerifySettings:
    trials: int = 100
    inject_fault: bool = False
    seed: int = 0
    out: str | None = None


@dataclass
class BenchSettings:
    preset: str | None = None
    strategies: list = field(default_factory=lambda: ["early", "decoupled"])
    b: int = 1200
    l: int = 400
    d_h: int = 128
    duration: float = 5.0
    workers: int = 1
    flops_only: bool = False
    seed: int = 0
    out: str | None = None
    csv: str | None = None


SETTINGS = {"gen": GenSettings, "train": TrainSettings, "eval": EvalSettings, "verify": VerifySettings,
            "bench": BenchSettings}
BENCH_PRESETS = {"stress": {"b": 1200, "l": 400, "d_h": 128, "strategies": ["early", "decoupled"]}}
BENCH_PRESETS["paper-stress"] = BENCH_PRESETS["stress"]  # alias kept for the published interface


def _split_table(command: str, table: dict) -> dict:
    """Route flat TOML keys of a table into the settings fields, rejecting unknowns."""
    cls = SETTINGS[command]
    own = {f.name for f in fields(cls)} - {"data", "model"}
    out: dict = {}
    for key, value in table.items():
        if command == "gen" and key in DATA_KEYS:
            out.setdefault("data", {})[key] = value
        elif command == "train" and key in MODEL_KEYS and key != "seed":
            out.setdefault("model", {})[key] = value
        elif key in own or (command != "gen" and key == "data" and "data" in {f.name for f in fields(cls)}):
            out[key] = value
        else:
            raise ConfigError(f"unknown key {key!r} in [{command}]")
    return out


def load_settings(command: str, config_path: str | None, overrides: dict):
    raw: dict = {}
    if config_path:
        with open(config_path, "rb") as fh:
            raw = tomli.load(fh)
    for key in raw:
        if key != "seed" and key not in SETTINGS:
            raise ConfigError(f"unknown top-level key {key!r} in {config_path}")
    table = raw.get(command, {})
    if not isinstance(table, dict):
        raise ConfigError(f"[{command}] must be a table")
    values = _split_table(command, table)
    if "seed" in raw:
        if command == "gen":
            values.setdefault("data", {}).setdefault("seed", raw["seed"])
        elif "seed" in {f.name for f in fields(SETTINGS[command])}:
            values.setdefault("seed", raw["seed"])
    for key, value in overrides.items():
        if value is None:
            continue
        if key in ("data", "model") and isinstance(value, dict):
            values.setdefault(key, {}).update(value)
        else:
            values[key] = value
    settings = SETTINGS[command](**values)
    log.info("resolved %s settings: %s", command, json.dumps(asdict(settings), sort_keys=True))
    return settings


def _emit(report, out: str | None) -> None:
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _parse_set(pairs) -> dict:
    out = {}
    for pair in pairs or ():
        key, sep, value = pair.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {pair!r}")
        out[key.strip()] = tomli.loads(f"v = {value}")["v"]
    return out


# -- commands --------------------------------------------------------------------

def cmd_gen(args) -> int:
    data = _parse_set(args.set)
    unknown = set(data) - set(DATA_KEYS)
    if unknown:
        raise ConfigError(f"unknown generator keys {sorted(unknown)}")
    if args.seed is not None:
        data["seed"] = args.seed
    s = load_settings("gen", args.config, {"out": args.out, "data": data})
    if not s.out:
        raise ConfigError("gen needs an output directory (--out)")
    cfg = SyntheticConfig(**s.data)
    ds = gen_synthetic(cfg)
    target = Path(s.out)
    target.parent.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(prefix=".gen-", dir=target.parent))
    try:
        written = write_dataset(ds, staging)
        target.mkdir(exist_ok=True)
        paths = {}
        for key, p in written.items():
            dest = target / Path(p).name
            os.replace(p, dest)
            paths[key] = str(dest)
    finally:
        shutil.rmtree(staging, ignore_errors=True)
    _emit({"files": paths, "train": len(ds.train), "test": len(ds.test)}, None)
    return 0


def _load_split(data_dir):
    d = Path(data_dir)
    mm = MultimodalTable.load(d / "items.mmf")
    return load_interactions(d / "train.jsonl"), load_interactions(d / "test.jsonl"), mm


def _train_one(s: TrainSettings, cfg: ModelConfig, train, test, mm, checkpoint: str | None):
    prep = prepare_examples(train, test, mm, cfg, s.valid_fraction, s.seed)
    start = 0
    if s.resume:
        params, bz, extra, meta = load_checkpoint(s.resume)
        if not (np.array_equal(params.item_ids[1:], prep.item_ids) and bz is not None
                and np.array_equal(bz.boundaries, prep.bucketizer.boundaries)):
            raise ConfigError(f"{s.resume} was trained on different data")
        opt = AdamState.from_tensors(params, extra, int(meta["step"]))
        start = int(meta["epoch"])
        losses = list(meta.get("losses", []))
    else:
        params = init_params(cfg, prep.item_ids, prep.user_ids)
        opt = AdamState.for_params(params)
        losses = []
    for epoch in range(start, start + s.epochs):
        stats = train_epoch(prep.train, params, opt, epoch)
        losses.append(stats["loss"])
        log.info("epoch %d loss %.5f", epoch, stats["loss"])
    if checkpoint:
        meta = {"epoch": start + s.epochs, "step": opt.step, "losses": losses}
        save_checkpoint(checkpoint, params, prep.bucketizer, opt.tensors(), meta)
    metrics = evaluate(params, prep.test)
    report = {"strategy": params.config.strategy, "alpha": params.config.alpha, "epochs": start + s.epochs,
              "losses": losses, "auc": metrics["auc"], "gauc": metrics["gauc"],
              "n_users_skipped": metrics["n_users_skipped"], "logloss": metrics["logloss"]}
    if len(prep.valid):
        report["valid_auc"] = evaluate(params, prep.valid)["auc"]
    if checkpoint:
        report["checkpoint"] = checkpoint
    return report


def cmd_train(args) -> int:
    alpha = None if args.alpha is None else [float(a) for a in args.alpha.split(",")]
    model = _parse_set(args.set)
    overrides = {"data": args.data, "checkpoint": args.checkpoint, "out": args.out, "strategy": args.strategy,
                 "alpha": alpha, "epochs": args.epochs, "resume": args.resume, "preset": args.preset,
                 "seed": args.seed, "model": model}
    s = load_settings("train", args.config, overrides)
    if not s.data:
        raise ConfigError("train needs a dataset directory (--data)")
    unknown = set(s.model) - set(MODEL_KEYS)
    if unknown:
        raise ConfigError(f"unknown model keys {sorted(unknown)}")
    alphas = s.alpha if isinstance(s.alpha, list) else [s.alpha]
    if len(alphas) > 1 and s.resume:
        raise ConfigError("--resume applies to a single run, not an alpha sweep")
    train, test, mm = _load_split(s.data)
    runs = []
    for a in alphas:
        cfg = preset(s.preset, **s.model, strategy=s.strategy, alpha=float(a), seed=s.seed)
        ckpt = s.checkpoint
        if ckpt and len(alphas) > 1:
            ckpt = f"{ckpt}.alpha{a:g}"
        runs.append(_train_one(s, cfg, train, test, mm, ckpt))
    if len(runs) == 1:
        _emit(runs[0], s.out)
    else:
        best = max(runs, key=lambda r: r.get("valid_auc", r["auc"]))
        _emit({"runs": runs, "tuned_alpha": best["alpha"], "tuned_auc": best["auc"]}, s.out)
    return 0


def cmd_eval(args) -> int:
    s = load_settings("eval", args.config, {"checkpoint": args.checkpoint, "data": args.data,
                                            "multimodal": args.multimodal, "out": args.out})
    if not (s.checkpoint and s.data):
        raise ConfigError("eval needs --checkpoint and --data")
    data = Path(s.data)
    if data.is_dir():
        mm_path = s.multimodal or data / "items.mmf"
        data = data / "test.jsonl"
    else:
        mm_path = s.multimodal
    if mm_path is None:
        raise ConfigError("eval needs --multimodal when --data is a file")
    params, bz, _, _ = load_checkpoint(s.checkpoint)
    mm = MultimodalTable.load(mm_path)
    batch = encode(load_interactions(data, params.config.max_len), params, mm, bz)
    m = evaluate(params, batch)
    _emit({"auc": m["auc"], "gauc": m["gauc"], "n_users_skipped": m["n_users_skipped"]}, s.out)
    return 0


def cmd_verify(args) -> int:
    s = load_settings("verify", args.config, {"trials": args.trials, "inject_fault": args.inject_fault or None,
                                              "seed": args.seed, "out": args.out})
    results = run_all(inject_fault=s.inject_fault, trials=s.trials, seed=s.seed)
    passed = all(r.passed for r in results)
    for r in results:
        log.info("%-24s %s margin=%.3g %s", r.name, "PASS" if r.passed else "FAIL", r.margin, r.detail)
    _emit({"passed": passed, "checks": [r.as_dict() for r in results]}, s.out)
    return 0 if passed else 1


def _worker_cap(requested: int) -> int:
    cap = os.environ.get("DMF_THREADS")
    if cap is None:
        return requested
    try:
        value = int(cap)
    except ValueError:
        raise ConfigError(f"DMF_THREADS must be an integer, got {cap!r}") from None
    if value < 1:
        raise ConfigError("DMF_THREADS must be at least 1")
    return min(requested, value)


def cmd_bench(args) -> int:
    strategies = None if args.strategies is None else args.strategies.split(",")
    s = load_settings("bench", args.config, {
        "preset": args.preset, "strategies": strategies, "b": args.b, "l": args.l, "d_h": args.d_h,
        "duration": args.duration, "workers": args.workers, "flops_only": args.flops_only or None,
        "seed": args.seed, "out": args.out, "csv": args.csv})
    if s.preset:
        if s.preset not in BENCH_PRESETS:
            raise ConfigError(f"unknown bench preset {s.preset!r}; expected one of {sorted(BENCH_PRESETS)}")
        s = replace(s, **BENCH_PRESETS[s.preset])
    for st in s.strategies:
        if st not in SERVING_STRATEGIES:
            raise ConfigError(f"unknown serving strategy {st!r}")
    flops = [flops_kv(st, s.b, s.l, s.d_h, reuse).as_dict()
             for st in ("early", "late", "decoupled") for reuse in (False, True)]
    report = {"config": {"B": s.b, "L": s.l, "d_h": s.d_h}, "flops": flops}
    if not s.flops_only:
        workers = _worker_cap(s.workers)
        reports = [qps_bench(st, s.b, s.l, s.d_h, s.duration, workers, seed=s.seed) for st in s.strategies]
        report["qps"] = reports
        by = {r["strategy"]: r["qps"] for r in reports}
        if "early" in by and "decoupled" in by:
            report["qps_ratio_decoupled_over_early"] = by["decoupled"] / by["early"]
        if s.csv:
            Path(s.csv).write_text(to_csv(reports), encoding="utf-8")
    _emit(report, s.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dmf", description=__doc__.splitlines()[0])
    p.add_argument("--log-level", default="INFO")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="TOML settings file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out")
        return sp

    g = common(sub.add_parser("gen", help="write a synthetic dataset"))
    g.add_argument("--set", action="append", metavar="KEY=VALUE", help="generator field override")

    t = common(sub.add_parser("train", help="train a model and report test metrics"))
    t.add_argument("--data")
    t.add_argument("--checkpoint")
    t.add_argument("--strategy", choices=STRATEGIES)
    t.add_argument("--alpha", help="fusion weight, or a comma-separated sweep list")
    t.add_argument("--epochs", type=int)
    t.add_argument("--resume")
    t.add_argument("--preset")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="model field override")

    e = common(sub.add_parser("eval", help="score a dataset with a checkpoint"))
    e.add_argument("--checkpoint")
    e.add_argument("--data")
    e.add_argument("--multimodal")

    v = common(sub.add_parser("verify", help="run the numerical self-checks"))
    v.add_argument("--trials", type=int)
    v.add_argument("--inject-fault", action="store_true", help="corrupt cached keys to prove the reuse check bites")

    b = common(sub.add_parser("bench", help="FLOPs table and QPS stress test"))
    b.add_argument("--preset")
    b.add_argument("--strategies")
    b.add_argument("--b", type=int)
    b.add_argument("--l", type=int)
    b.add_argument("--d-h", type=int, dest="d_h")
    b.add_argument("--duration", type=float)
    b.add_argument("--workers", type=int)
    b.add_argument("--flops-only", action="store_true")
    b.add_argument("--csv")
    return p


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "verify": cmd_verify, "bench": cmd_bench}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ValueError, OSError, TypeError, tomli.TOMLDecodeError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
