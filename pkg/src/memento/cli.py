"""Command-line entry point: ``memento <subcommand>``.

Exit codes: 0 success, 2 invalid input, 3 numerical divergence. The default
output root comes from ``MEMENTO_OUT`` (falls back to ``./runs``).
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import analysis
from .errors import DivergenceError, ValidationError
from .instances import Kind, brute_force, generate_dataset, load_dataset, save_dataset, tsp_reference_cost
from .memory import SUBSETS
from .persistence import Checkpoint, RunConfig, content_hash, load_checkpoint, load_config, save_checkpoint
from .policy import PolicyConfig
from .search import (STRATEGIES, BudgetSpec, EASConfig, evaluate, read_reference, write_metrics,
                     write_reference, write_traces)
from .training import PretrainConfig, TrainConfig, pretrain, train

log = logging.getLogger("memento")

OUT_ENV = "MEMENTO_OUT"


def default_root() -> Path:
    return Path(os.environ.get(OUT_ENV, "runs"))


# ------------------------------------------------------------ config mapping

def policy_config(cfg: RunConfig) -> PolicyConfig:
    m = cfg.section("model")
    return PolicyConfig(kind=Kind.parse(cfg["problem.kind"]).value, embed_dim=m["embed_dim"],
                        n_layers=m["n_layers"], n_heads=m["n_heads"], ff_dim=m["ff_dim"], clip=m["clip"])


def pretrain_config(cfg: RunConfig) -> PretrainConfig:
    return PretrainConfig(kind=Kind.parse(cfg["problem.kind"]).value, n=cfg["problem.n"],
                          seed=cfg.seed, **cfg.section("pretrain"))


def train_config(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(kind=Kind.parse(cfg["problem.kind"]).value, n=cfg["problem.n"],
                       seed=cfg.seed, **cfg.section("train"))


def budget_spec(cfg: RunConfig) -> BudgetSpec:
    s = cfg.section("search")
    return BudgetSpec(s["budget"], s["starts"] or None, s["temperature"])


def eas_config(cfg: RunConfig) -> EASConfig:
    return EASConfig(lr=cfg["eas.lr"], imitation=cfg["eas.imitation"])


def provenance(cfg: RunConfig, stage: str) -> dict:
    return {"stage": stage, "seed": cfg.seed, "config_hash": content_hash(cfg.values)}


def _load_models(path, cfg: RunConfig | None = None):
    ckpt = load_checkpoint(path, None if cfg is None else policy_config(cfg).to_dict())
    return ckpt.build_policy(), ckpt.build_memory_net()


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# ------------------------------------------------------------ pipeline steps

def run_pretrain(cfg: RunConfig, out: Path, timing: bool) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    cfg.snapshot(out)
    t0 = time.perf_counter()
    policy, rows = pretrain(pretrain_config(cfg), policy_config(cfg), out / "train_log.csv", timing=timing)
    path = out / "policy.ckpt"
    save_checkpoint(path, Checkpoint.from_models(policy, provenance=provenance(cfg, "pretrain")))
    _record_time(out, "pretrain", time.perf_counter() - t0)
    return path


def run_train(cfg: RunConfig, out: Path, base_ckpt, timing: bool) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    cfg.snapshot(out)
    policy, _ = _load_models(base_ckpt, cfg)
    tc = train_config(cfg)

    def checkpoint_fn(step, pol, net):
        save_checkpoint(out / f"memento_step{step}.ckpt",
                        Checkpoint.from_models(pol, net, provenance(cfg, f"train@{step}")))

    t0 = time.perf_counter()
    net, _ = train(tc, policy, None, out / "train_log.csv", checkpoint_fn, timing=timing)
    path = out / "memento.ckpt"
    save_checkpoint(path, Checkpoint.from_models(policy, net, provenance(cfg, "train")))
    _record_time(out, "train", time.perf_counter() - t0)
    return path


def heldout_dataset(cfg: RunConfig, out: Path):
    path = out / "test.dset"
    ds = generate_dataset(cfg["problem.kind"], cfg["problem.n"], cfg["data.count"], cfg["data.seed"])
    save_dataset(path, ds)
    return ds


def exact_reference(ds, out: Path):
    """Exact costs: brute force for tiny instances, otherwise the MILP solver (TSP only)."""
    path = out / "reference.csv"
    if path.exists():
        ref = read_reference(path)
        if set(ref) == {inst.id for inst in ds}:
            return ref
    costs = []
    for inst in ds:
        if inst.kind is Kind.TSP and inst.n <= 10:
            costs.append(brute_force(inst)[0])
        elif inst.kind is Kind.TSP:
            costs.append(tsp_reference_cost(inst)[0])
        elif inst.n - 1 <= 8:
            costs.append(brute_force(inst)[0])
        else:
            return None
    write_reference(path, [inst.id for inst in ds], costs)
    return read_reference(path)


def run_benchmark(cfg: RunConfig, out: Path, ckpt, strategies, timing: bool, reference="exact",
                  base_ckpt=None) -> dict:
    """Evaluate each strategy on the held-out set; writes metrics, traces and a summary.

    With ``base_ckpt`` the baselines (greedy, sampling, eas) run on that base
    policy and memento on the trained checkpoint; an extra ``sampling_tuned``
    row samples from the trained checkpoint's policy weights.
    """
    out.mkdir(parents=True, exist_ok=True)
    cfg.snapshot(out)
    policy, net = _load_models(ckpt, cfg)
    base = policy if base_ckpt is None else _load_models(base_ckpt, cfg)[0]
    ds = heldout_dataset(cfg, out)
    ref = exact_reference(ds, out) if reference == "exact" else None
    budget = budget_spec(cfg)
    runs = [(s, s, policy if s == "memento" else base) for s in strategies]
    if base_ckpt is not None and "sampling" in strategies:
        runs.append(("sampling_tuned", "sampling", policy))
    results, times = {}, []
    for label, strategy, pol in runs:
        t0 = time.perf_counter()
        res = evaluate(ds, strategy, pol, budget, cfg.seed, ref, memory_net=net, eas_config=eas_config(cfg),
                       workers=cfg.workers, chunk_size=cfg["search.chunk_size"], timing=timing,
                       memory_size=cfg["search.memory_size"])
        for r in res.rows:
            r["strategy"] = label
        for tr in res.traces:
            tr.strategy = label
        times.append((label, time.perf_counter() - t0))
        results[label] = res
        log.info("%s: mean best cost %.5f", label, res.mean_cost)
    if ref is None:
        # no exact solver: the best cost found by any strategy serves as reference
        best = {}
        for res in results.values():
            for r in res.rows:
                best[r["instance_id"]] = min(best.get(r["instance_id"], np.inf), r["best_cost"])
        write_reference(out / "reference.csv", list(best), list(best.values()))
        for res in results.values():
            for r in res.rows:
                r["gap"] = 100.0 * (r["best_cost"] - best[r["instance_id"]]) / best[r["instance_id"]]
            res.mean_gap = float(np.mean([r["gap"] for r in res.rows]))
    rows = [r for res in results.values() for r in res.rows]
    write_metrics(out / "metrics.csv", rows)
    write_traces(out / "traces.csv", [t for res in results.values() for t in res.traces])
    write_summary(out / "summary.csv", results)
    for strategy, secs in times:
        _record_time(out, f"search-{strategy}", secs)
    return results


def write_summary(path, results: dict) -> None:
    from scipy import stats

    base = results.get("sampling")
    rows = []
    for name, res in results.items():
        costs = np.array([r["best_cost"] for r in res.rows])
        wins = p = ""
        if base is not None and name != "sampling":
            ref = np.array([r["best_cost"] for r in base.rows])
            wins = int((costs <= ref).sum())
            diff = costs - ref
            p = repr(float(stats.ttest_rel(costs, ref, alternative="less").pvalue)) if diff.any() else "1.0"
        rows.append([name, repr(float(costs.mean())), "" if res.mean_gap is None else repr(res.mean_gap), wins, p])
    _write_rows(path, ["strategy", "mean_best_cost", "mean_gap_pct", "le_sampling", "p_less_than_sampling"], rows)


def _record_time(out: Path, what: str, seconds: float) -> None:
    # wall-clock measurements live apart from the deterministic metrics files
    with open(out / "timings.csv", "a") as fh:
        fh.write(f"{what},{seconds:.3f}\n")


def run_rule_grid(ckpt, out: Path, horizon: int) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    _, net = _load_models(ckpt)
    if net is None:
        raise ValidationError(f"{ckpt} holds no memory net")
    grids = analysis.export_rule_grid(net, out, horizon=horizon)
    _write_rows(out / "quadrants.csv", ["stage", "quadrant", "mean_correction"],
                [[stage, q, repr(v)] for stage, (_, g) in grids.items() for q, v in g.quadrant_means().items()])
    report = analysis.reinforce_capacity_check(n_cases=1000, seed=0)
    analysis.write_capacity_report(out / "reinforce_check.csv", report)
    return grids


# ------------------------------------------------------------------ reproduce

# Desk-scale presets; every value can be overridden with --set key=value.
PRESETS = {
    "tsp20": {"problem.kind": "TSP", "problem.n": "20", "run.seed": "7",
              "pretrain.steps": "3000", "pretrain.batch_size": "64", "pretrain.starts": "20",
              "train.steps": "100", "train.budget": "50", "train.batch_size": "16", "train.accumulation": "1",
              "search.budget": "200", "search.starts": "20", "eas.lr": "0.003",
              "data.count": "100", "data.seed": "40961"},
    "cvrp20": {"problem.kind": "CVRP", "problem.n": "21", "run.seed": "11",
               "pretrain.steps": "3000", "pretrain.batch_size": "64", "pretrain.starts": "20",
               "train.steps": "100", "train.budget": "50", "train.batch_size": "16", "train.accumulation": "1",
               "search.budget": "200", "search.starts": "20", "eas.lr": "0.003",
               "data.count": "100", "data.seed": "40962"},
}
EXPERIMENTS = ("pretrain-tsp20", "train-memento-tsp20", "eval-benchmark-tsp20", "ablation", "rule-grid",
               "cvrp-suite")


def preset_config(name: str, overrides) -> RunConfig:
    raw = dict(PRESETS[name])
    cfg = load_config(None, {**raw, **_overrides_dict(overrides)})
    return cfg


def _overrides_dict(overrides) -> dict:
    out = {}
    for item in overrides or []:
        if "=" not in item:
            raise ValidationError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def reproduce(name: str, root: Path, overrides=(), timing: bool = False) -> Path:
    """Run one named experiment; upstream stages run first when their outputs are missing."""
    if name not in EXPERIMENTS:
        raise ValidationError(f"unknown experiment {name!r}; choose from {', '.join(EXPERIMENTS)}")
    tsp = preset_config("tsp20", overrides)
    if name == "pretrain-tsp20":
        return run_pretrain(tsp, root / name, timing).parent
    base = root / "pretrain-tsp20" / "policy.ckpt"
    if name in ("train-memento-tsp20", "eval-benchmark-tsp20", "ablation", "rule-grid") and not base.exists():
        run_pretrain(tsp, root / "pretrain-tsp20", timing)
    if name == "train-memento-tsp20":
        return run_train(tsp, root / name, base, timing).parent
    trained = root / "train-memento-tsp20" / "memento.ckpt"
    if name in ("eval-benchmark-tsp20", "rule-grid") and not trained.exists():
        run_train(tsp, root / "train-memento-tsp20", base, timing)
    if name == "eval-benchmark-tsp20":
        run_benchmark(tsp, root / name, trained, STRATEGIES, timing, base_ckpt=base)
        return root / name
    if name == "rule-grid":
        tsp.snapshot(root / name)
        run_rule_grid(trained, root / name, horizon=tsp["problem.n"] - 1)
        return root / name
    if name == "ablation":
        return run_ablation_experiment(tsp, root / name, base, timing)
    cvrp = preset_config("cvrp20", overrides)
    out = root / name
    cbase = out / "pretrain" / "policy.ckpt"
    if not cbase.exists():
        run_pretrain(cvrp, out / "pretrain", timing)
    ctrained = out / "train" / "memento.ckpt"
    if not ctrained.exists():
        run_train(cvrp, out / "train", cbase, timing)
    run_benchmark(cvrp, out / "eval", ctrained, STRATEGIES, timing, reference="best-known", base_ckpt=cbase)
    return out


def run_ablation_experiment(cfg: RunConfig, out: Path, base_ckpt, timing: bool, subsets=SUBSETS) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    cfg.snapshot(out)
    policy, _ = _load_models(base_ckpt, cfg)
    ds = generate_dataset(cfg["problem.kind"], cfg["problem.n"], cfg["data.count"], cfg["data.seed"])
    curves, summary = analysis.run_ablation(list(subsets), policy, train_config(cfg), ds, budget_spec(cfg),
                                            cfg.seed, cfg.workers, timing=timing)
    analysis.write_ablation(out, curves, summary)
    return out


# ----------------------------------------------------------------------- main

def _common(p, config=True):
    if config:
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override")
    p.add_argument("--out", help="output directory")
    p.add_argument("--workers", type=int, help="worker threads (results do not depend on it)")
    p.add_argument("--seed", type=int, help="global seed")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="memento", description="Memory-based adaptation for neural routing solvers")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a dataset file")
    g.add_argument("--kind", required=True, choices=[k.value for k in Kind])
    g.add_argument("--n", type=int, required=True, help="nodes per instance (CVRP: including the depot)")
    g.add_argument("--count", type=int, default=100)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--reference", help="also write exact reference costs to this CSV")

    p = sub.add_parser("pretrain", help="train a base policy")
    _common(p)

    t = sub.add_parser("train", help="train the memory net on top of a base policy")
    _common(t)
    t.add_argument("--checkpoint", required=True)

    s = sub.add_parser("search", help="run a search strategy over a dataset")
    _common(s)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--strategy", choices=STRATEGIES, action="append", required=True)
    s.add_argument("--reference", help="reference CSV (instance_id,cost)")

    a = sub.add_parser("analyze", help="rule grids, REINFORCE capacity check, feature ablation")
    asub = a.add_subparsers(dest="analysis", required=True)
    rg = asub.add_parser("rule-grid")
    rg.add_argument("--checkpoint", required=True)
    rg.add_argument("--out", required=True)
    rg.add_argument("--horizon", type=int, default=19)
    rc = asub.add_parser("reinforce-check")
    rc.add_argument("--checkpoint")
    rc.add_argument("--cases", type=int, default=1000)
    rc.add_argument("--seed", type=int, default=0)
    rc.add_argument("--out", required=True)
    ab = asub.add_parser("ablation")
    _common(ab)
    ab.add_argument("--checkpoint", required=True)
    ab.add_argument("--subsets", default="A,B,C,D")

    r = sub.add_parser("reproduce", help="run a named experiment end to end")
    r.add_argument("experiment", help=", ".join(EXPERIMENTS))
    r.add_argument("--root", help=f"output root (default ${OUT_ENV} or ./runs)")
    r.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    r.add_argument("--workers", type=int)
    r.add_argument("--timing", action="store_true", help="record wall_ms in the metrics files too")
    return ap


def _run_config(args) -> RunConfig:
    overrides = _overrides_dict(args.set)
    if args.seed is not None:
        overrides["run.seed"] = str(args.seed)
    if args.workers is not None:
        overrides["run.workers"] = str(args.workers)
    if args.out is not None:
        overrides["run.out_dir"] = args.out
    return load_config(args.config, overrides)


def _dispatch(args) -> None:
    if args.command == "gen-data":
        ds = generate_dataset(args.kind, args.n, args.count, args.seed)
        save_dataset(args.out, ds)
        if args.reference:
            ref = exact_reference(ds, Path(args.reference).parent)
            if ref is None:
                raise ValidationError("no exact reference solver for this size")
            Path(args.reference).parent.joinpath("reference.csv").replace(args.reference)
        return
    if args.command == "reproduce":
        overrides = list(args.set)
        if args.workers is not None:
            overrides.append(f"run.workers={args.workers}")
        root = Path(args.root) if args.root else default_root()
        out = reproduce(args.experiment, root, overrides, timing=args.timing)
        print(out)
        return
    if args.command == "analyze" and args.analysis == "rule-grid":
        run_rule_grid(args.checkpoint, Path(args.out), args.horizon)
        return
    if args.command == "analyze" and args.analysis == "reinforce-check":
        policy = inst = None
        if args.checkpoint:
            policy, _ = _load_models(args.checkpoint)
            inst = generate_dataset(policy.kind, 6, 1, args.seed).instances[0]
        report = analysis.reinforce_capacity_check(policy, inst, args.cases, args.seed)
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        analysis.write_capacity_report(args.out, report)
        print(f"max taken-action deviation {report.max_taken_deviation:.3e} "
              f"({'ok' if report.passed else 'FAILED'})")
        if not report.passed:
            raise ValidationError("REINFORCE capacity check failed")
        return
    cfg = _run_config(args)
    out = Path(args.out) if args.out else default_root() / args.command
    timing = cfg["run.timing"]
    if args.command == "pretrain":
        run_pretrain(cfg, out, timing)
    elif args.command == "train":
        run_train(cfg, out, args.checkpoint, timing)
    elif args.command == "search":
        out.mkdir(parents=True, exist_ok=True)
        cfg.snapshot(out)
        policy, net = _load_models(args.checkpoint, cfg)
        ds = load_dataset(args.dataset)
        results = {}
        for strategy in args.strategy:
            results[strategy] = evaluate(ds, strategy, policy, budget_spec(cfg), cfg.seed, args.reference,
                                         memory_net=net, eas_config=eas_config(cfg), workers=cfg.workers,
                                         chunk_size=cfg["search.chunk_size"], timing=timing,
                                         memory_size=cfg["search.memory_size"])
        write_metrics(out / "metrics.csv", [r for res in results.values() for r in res.rows])
        write_traces(out / "traces.csv", [t for res in results.values() for t in res.traces])
        write_summary(out / "summary.csv", results)
    elif args.command == "analyze":
        subsets = [s.strip() for s in args.subsets.split(",") if s.strip()]
        run_ablation_experiment(cfg, out, args.checkpoint, timing, subsets)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    torch.set_num_threads(1)
    try:
        _dispatch(args)
    except DivergenceError as exc:
        print(f"error: numerical divergence: {exc}", file=sys.stderr)
        if exc.diagnostics:
            print(f"diagnostics: {exc.diagnostics}", file=sys.stderr)
        return 3
    except (ValidationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
