"""Command line entry point: ``traffic-lab <command> ...``.

Exit codes: 0 on success, 2 on usage or validation errors, 1 on runtime
failures.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import tomli

from . import baseline as base
from . import metrics as M
from . import policy as pol
from . import scene as S
from . import simulator as sim
from . import training as T
from .errors import ConfigError, TrafficLabError

log = logging.getLogger("traffic_lab")

METRIC_COLUMNS = ("col_pct", "off_pct", "ade_m", "jsd_speed", "jsd_accel", "jsd_nlc")
CONTROL_ALIASES = {"all": "all_agents", "all_agents": "all_agents",
                   "single": "single_agent", "single_agent": "single_agent"}


# -- helpers --------------------------------------------------------------------
def _read_toml(path):
    try:
        with open(path, "rb") as fh:
            return tomli.load(fh)
    except (OSError, tomli.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc


def _load_dataset(path) -> S.Dataset:
    path = Path(path)
    if not (path / "rollouts").is_dir():
        raise ConfigError(f"{path} is not a dataset directory")
    return S.Dataset.load(path)


def _split_or_all(dataset: S.Dataset, name) -> S.Dataset:
    """The named split, or every rollout when the dataset has no such split."""
    if name and dataset.splits.get(name):
        return dataset.split(name)
    return S.Dataset(dataset.maps, dataset.rollouts)


def _control(name) -> str:
    if name not in CONTROL_ALIASES:
        raise ConfigError(f"unknown control mode {name!r}")
    return CONTROL_ALIASES[name]


def _eval_masks(rollouts, control):
    """Evaluation masks: every agent, or the agent with the most controllable steps."""
    return sim.make_masks(rollouts, "all_agents" if control == "all_agents" else "single_agent")


def format_cell(values) -> str:
    """``mean ± std`` with two decimals (std over seeds, ``ddof=1``)."""
    vals = np.asarray([v for v in values if v is not None and math.isfinite(v)], dtype=float)
    if len(vals) == 0:
        return "nan"
    std = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
    return f"{float(np.mean(vals)):.2f} ± {std:.2f}"


def summarize(rows):
    """Collapse per-seed rows into one row per (method, control mode)."""
    keys = []
    for r in rows:
        k = (r["method"], r["control_mode"])
        if k not in keys:
            keys.append(k)
    out = []
    for method, control in keys:
        sel = [r for r in rows if r["method"] == method and r["control_mode"] == control]
        row = {"method": method, "control_mode": control, "seeds": len(sel)}
        for c in METRIC_COLUMNS:
            row[c] = format_cell([float(r[c]) for r in sel])
        out.append(row)
    return out


def write_summary_csv(path, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=["method", "control_mode", "seeds", *METRIC_COLUMNS])
        w.writeheader()
        w.writerows(rows)


def _print_table(rows, cols):
    widths = {c: max(len(c), *(len(str(r[c])) for r in rows)) for c in cols}
    print("  ".join(c.ljust(widths[c]) for c in cols))
    for r in rows:
        print("  ".join(str(r[c]).ljust(widths[c]) for c in cols))


# -- commands -------------------------------------------------------------------
def cmd_ingest(args):
    rec = S.ingest_exid(args.tracks, args.meta, args.map, frame_rate=args.frame_rate,
                        recording_id=args.recording_id)
    map_model = S.MapModel.load(args.map)
    rollouts = S.snip(rec)
    ds = S.Dataset({map_model.map_id: map_model}, rollouts, {"train": [rec.recording_id]})
    ds.save(args.out)
    print(f"ingested {len(rec.agents)} agents into {len(rollouts)} rollouts -> {args.out}")


def cmd_synth(args):
    raw = _read_toml(args.config) if args.config else {}
    fields = {f.name for f in dataclasses.fields(S.SynthConfig)}
    params = dict(raw.get("synth", {}))
    unknown = set(params) - fields
    if unknown:
        raise ConfigError(f"unknown synth keys: {sorted(unknown)}")
    if args.seed is not None:
        params["seed"] = args.seed
    if args.recordings is not None:
        params["n_recordings"] = args.recordings
    cfg = S.SynthConfig(**params)
    ds = S.generate_synthetic(cfg)
    ratios = tuple(raw.get("split", {}).get("ratios", (0.8, 0.1, 0.1)))
    if cfg.n_recordings >= sum(1 for r in ratios if r > 0):
        S.split(ds, ratios, seed=cfg.seed)
    else:
        ds.splits = {"train": ds.recording_ids}
    ds.save(args.out)
    print(f"wrote {len(ds.rollouts)} rollouts ({cfg.n_recordings} recordings) -> {args.out}")


def cmd_train(args):
    cfg = T.load_config(args.config, epochs=args.epochs, seed=args.seed,
                        control=_control(args.control) if args.control else None)
    data = _split_or_all(_load_dataset(args.data), args.split)
    res = T.train(cfg, data, args.out)
    last = res.log[-1] if res.log else {}
    print(json.dumps({"method": cfg.method, "epochs": len(res.log), "checkpoint": str(
        res.checkpoint_dir), **{k: v for k, v in last.items() if k != "epoch"}}))


def cmd_rollout(args):
    ckpt = T.load_checkpoint(args.checkpoint)
    data = _split_or_all(_load_dataset(args.data), args.split)
    control = _control(args.control)
    bank = pol.MapBank(data.maps)
    rng = np.random.default_rng(args.seed)
    gen = _generate(ckpt.policy, data.rollouts, bank, control, args.mode, rng)
    out = S.Dataset(data.maps, gen, {"test": data.recording_ids})
    out.save(args.out)
    print(f"generated {len(gen)} rollouts ({control}, {args.mode}) -> {args.out}")


def _generate(policy, rollouts, bank, control, mode="deterministic", rng=None, batch_size=64):
    masks = _eval_masks(rollouts, control)
    out = []
    for k in range(0, len(rollouts), batch_size):
        traj = sim.rollout(policy, rollouts[k:k + batch_size], mode=mode, differentiable=False,
                           rng=rng, bank=bank, masks=masks[k:k + batch_size])
        out.extend(traj.to_rollouts())
    return out


def _maps_for_eval(map_arg, gt: S.Dataset):
    if map_arg is None:
        return gt.maps
    p = Path(map_arg)
    if p.is_dir():
        if (p / "maps").is_dir():  # a dataset directory
            p = p / "maps"
        return {m.map_id: m for m in (S.MapModel.load(f) for f in sorted(p.glob("*.json")))}
    m = S.MapModel.load(p)
    return {m.map_id: m}


def cmd_eval(args):
    gen = _load_dataset(args.generated)
    gt = _load_dataset(args.gt)
    maps = _maps_for_eval(args.map, gt)
    report = M.evaluate(gen.rollouts, gt.rollouts, maps)
    row = report.row(args.method, args.control_mode, "")
    M.write_report_csv(args.report, [row])
    if args.histograms:
        M.write_histogram_csv(args.histograms, gen.rollouts, gt.rollouts, maps)
    print(json.dumps(report.to_dict()))


def run_cell(cell):
    """Train, roll out and score one (method, control mode, seed) cell."""
    logging.getLogger("traffic_lab").setLevel(logging.WARNING)
    config_path, data_path, control, seed, overrides, work = cell
    cfg = T.load_config(config_path, seed=seed, control=control, **overrides)
    ds = _load_dataset(data_path)
    train = _split_or_all(ds, "train")
    test = _split_or_all(ds, "test")
    out = Path(work) / f"{cfg.method}__{control}__seed{seed}" if work else None
    res = T.train(cfg, train, out)
    bank = pol.MapBank(test.maps)
    gen = _generate(res.checkpoint.policy, test.rollouts, bank, control)
    report = M.evaluate(gen, test.rollouts, test.maps)
    return report.row(cfg.method, control, seed)


def _discover_configs(configs_dir, methods=None):
    configs_dir = Path(configs_dir)
    found = {}
    for method in T.METHODS:
        p = configs_dir / f"{method}.toml"
        if p.exists():
            found[method] = p
    if methods:
        missing = [m for m in methods if m not in found]
        if missing:
            raise ConfigError(f"no config for {missing} in {configs_dir}")
        found = {m: found[m] for m in methods}
    if not found:
        raise ConfigError(f"no method configs in {configs_dir}")
    return found


def cmd_matrix(args):
    if args.seeds < 1:
        raise ConfigError("--seeds must be >= 1")
    methods = args.methods.split(",") if args.methods else None
    configs = _discover_configs(args.configs_dir, methods)
    controls = [_control(c) for c in args.controls.split(",")]
    overrides = {k: v for k, v in (("epochs", args.epochs), ("pretrain_epochs",
                                   args.pretrain_epochs), ("batch_size", args.batch_size))
                 if v is not None}
    cells = [(str(path), args.data, control, seed, overrides, args.work_dir)
             for method, path in configs.items() for control in controls
             for seed in range(args.seeds)]
    workers = S.env_threads()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(run_cell, cells))
    else:
        rows = [run_cell(c) for c in cells]
    report = Path(args.report)
    M.write_report_csv(report.with_name(report.stem + "_runs.csv"), rows)
    summary = summarize(rows)
    write_summary_csv(report, summary)
    _print_table(summary, ["method", "control_mode", *METRIC_COLUMNS])


def cmd_baseline(args):
    raw = _read_toml(args.params) if args.params else {}
    try:
        idm = base.IdmParams(**raw.get("idm", {}))
        mobil = base.MobilParams(**raw.get("mobil", {}))
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    data = _split_or_all(_load_dataset(args.data), args.split)
    control = _control(args.control)
    masks = _eval_masks(data.rollouts, control)
    gen = [base.baseline_rollout(r, data.maps[r.map_id], m, idm, mobil)
           for r, m in zip(data.rollouts, masks)]
    report = M.evaluate(gen, data.rollouts, data.maps)
    M.write_report_csv(args.report, [report.row("idm_mobil", control, "")])
    print(json.dumps(report.to_dict()))


# -- parser ---------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="traffic-lab",
                                 description="Multi-agent highway driver models.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="convert an exiD recording into rollouts")
    p.add_argument("--tracks", required=True)
    p.add_argument("--meta", required=True)
    p.add_argument("--map", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--frame-rate", type=float, default=25.0)
    p.add_argument("--recording-id", default=None)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("synth", help="generate a synthetic IDM+MOBIL dataset")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--recordings", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one method")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--control", choices=sorted(CONTROL_ALIASES), default=None)
    p.add_argument("--split", default="train")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("rollout", help="roll a checkpoint out over a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--control", choices=["all", "single"], required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--mode", choices=sim.MODES, default="deterministic")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("eval", help="score generated rollouts against recordings")
    p.add_argument("--generated", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--map", default=None)
    p.add_argument("--report", required=True)
    p.add_argument("--histograms", default=None)
    p.add_argument("--method", default="")
    p.add_argument("--control-mode", default="")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("matrix", help="every method x control mode x seed")
    p.add_argument("--configs-dir", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--seeds", type=int, required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--methods", default=None, help="comma separated subset")
    p.add_argument("--controls", default="all_agents,single_agent")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--pretrain-epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--work-dir", default=None)
    p.set_defaults(func=cmd_matrix)

    p = sub.add_parser("baseline", help="evaluate IDM+MOBIL with the same metrics")
    p.add_argument("--params", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--control", choices=["all", "single"], default="all")
    p.add_argument("--split", default="test")
    p.set_defaults(func=cmd_baseline)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TrafficLabError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
