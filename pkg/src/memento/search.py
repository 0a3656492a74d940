"""Budgeted inference: greedy, sampling, MEMENTO and an EAS-style active search.

One attempt is one rollout per starting point; a budget of ``attempts``
attempts therefore builds ``attempts * starting_points`` solutions per
instance. Instances are processed in fixed-size chunks, optionally on a
thread pool; chunk composition never depends on the worker count, so
results do not either.
"""
from __future__ import annotations

import csv
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import torch

from . import rng
from .env import InstanceBatch, Trajectories, default_starts, horizon
from .errors import DivergenceError, ValidationError
from .instances import Dataset, solution_cost
from .memory import Memory, MemoryHook, MemoryNet
from .policy import Policy, replay_logps, rollout

STRATEGIES = ("greedy", "sampling", "memento", "eas")
SEARCH_SALT = 0x5EA2C4


@dataclass(frozen=True)
class BudgetSpec:
    attempts: int = 200
    starting_points: int | None = None  # None: every possible starting point
    temperature: float = 1.0

    def __post_init__(self):
        if self.attempts < 1:
            raise ValidationError("budget attempts must be >= 1")
        if self.starting_points is not None and self.starting_points < 1:
            raise ValidationError("starting points must be >= 1")
        if self.temperature < 0:
            raise ValidationError("temperature must be >= 0")


@dataclass
class EASConfig:
    lr: float = 0.01
    imitation: float = 0.1
    divergence_ratio: float = 1.5


@dataclass
class SearchTrace:
    instance_id: int
    strategy: str
    best_so_far: list = field(default_factory=list)
    mean_cost: list = field(default_factory=list)
    std_cost: list = field(default_factory=list)
    best_cost: float = math.inf
    best_solution: list | None = None
    n_trajectories: int = 0
    all_best: float = math.inf  # min over every recorded trajectory, for checking

    def record(self, costs: np.ndarray):
        self.n_trajectories += len(costs)
        self.mean_cost.append(float(costs.mean()))
        self.std_cost.append(float(costs.std()))
        self.all_best = min(self.all_best, float(costs.min()))
        self.best_so_far.append(self.best_cost)

    def improvements(self) -> list:
        """Per-attempt gain of the incumbent (0 for the first attempt)."""
        seq = self.best_so_far
        return [0.0] + [a - b for a, b in zip(seq[:-1], seq[1:])]

    def check(self):
        """Best-so-far must be non-increasing, equal the min over all samples, and its
        gains must telescope to first minus final best."""
        seq = self.best_so_far
        if any(b > a for a, b in zip(seq[:-1], seq[1:])):
            raise AssertionError(f"best-so-far increased for instance {self.instance_id}")
        if self.best_cost != self.all_best:
            raise AssertionError("final best does not match the recorded trajectories")
        if seq and not telescopes(self.improvements(), seq[0], seq[-1]):
            raise AssertionError(f"improvements do not telescope for instance {self.instance_id}")


def telescopes(gains, first: float, final: float) -> bool:
    """``fsum(gains) == first - final``.

    Exact whenever consecutive incumbents lie within a factor of two of each
    other (their differences are then exact floats); otherwise each rounded
    difference may contribute half an ulp, which is allowed for.
    """
    total = math.fsum(gains)
    if final >= first / 2 and final >= 0:
        return total == first - final
    return abs(total - (first - final)) <= len(gains) * math.ulp(first)


class _Tracker:
    """Keeps per-instance incumbents across attempts."""

    def __init__(self, batch: InstanceBatch, strategy: str):
        self.batch = batch
        self.traces = [SearchTrace(iid, strategy) for iid in batch.ids]
        self.best_ret = torch.full((batch.batch,), -math.inf, dtype=torch.float64)
        self.best_actions = None
        self.best_valid = None
        self.best_start = torch.zeros(batch.batch, dtype=torch.long)

    def update(self, trajs: Trajectories):
        rets = trajs.returns
        best_p = rets.argmax(1)  # lowest index among ties
        bi = torch.arange(rets.shape[0])
        cand = rets[bi, best_p]
        improved = cand > self.best_ret
        T = trajs.actions.shape[2]
        H = horizon(self.batch.kind, self.batch.n)
        if self.best_actions is None:
            self.best_actions = torch.zeros(rets.shape[0], H, dtype=torch.long)
            self.best_valid = torch.zeros(rets.shape[0], H, dtype=torch.bool)
        for i in improved.nonzero()[:, 0].tolist():
            p = int(best_p[i])
            self.best_ret[i] = cand[i]
            self.best_actions[i] = 0
            self.best_valid[i] = False
            self.best_actions[i, :T] = trajs.actions[i, p]
            self.best_valid[i, :T] = trajs.valid[i, p]
            self.best_start[i] = trajs.start[i, p]
            tr = self.traces[i]
            tr.best_cost = float(-cand[i])
            tr.best_solution = trajs.solution(i, p)
        costs = trajs.costs.numpy()
        for i, tr in enumerate(self.traces):
            tr.record(costs[i])
        return improved

    def incumbents(self, kind) -> Trajectories:
        b, H = self.best_actions.shape
        z = torch.zeros(b, 1, H)
        return Trajectories(kind, self.batch.ids, self.best_start[:, None], self.best_actions[:, None],
                            torch.zeros(b, 1, H, dtype=torch.long), self.best_valid[:, None], z, z,
                            self.best_ret[:, None], torch.zeros(b, 1, H + 1, dtype=torch.long))


def _uniforms(seed, batch, attempt, n_starts, temperature):
    if temperature == 0:
        return None
    return rng.attempt_uniforms(seed, batch.ids, attempt, n_starts, horizon(batch.kind, batch.n),
                                salt=SEARCH_SALT)


def _search_batch(strategy, batch: InstanceBatch, policy: Policy, budget: BudgetSpec, seed: int,
                  memory_net: MemoryNet | None = None, eas_config: EASConfig | None = None,
                  memory_size: int = 40, shared_memory: bool = False):
    if strategy not in STRATEGIES:
        raise ValidationError(f"unknown strategy {strategy!r}")
    starts = default_starts(batch.kind, batch.n, budget.starting_points)
    P, B = len(starts), budget.attempts
    temperature = 0.0 if strategy == "greedy" else budget.temperature
    tracker = _Tracker(batch, strategy)
    with torch.no_grad():
        emb = policy.encode(batch)
    memory = None
    if strategy == "memento":
        if memory_net is None:
            raise ValidationError("memento search needs a memory net")
        memory = Memory(batch.batch, starts, batch.n, memory_size, shared=shared_memory, dtype=emb.dtype)
    offsets = opt = None
    first_mean = None
    trajs = None
    if strategy == "eas":
        eas_config = eas_config or EASConfig()
        offsets = torch.zeros_like(emb, requires_grad=True)
        opt = torch.optim.Adam([offsets], lr=eas_config.lr)
    for a in range(B):
        if strategy == "greedy" and a > 0:
            # deterministic decoding: later attempts repeat the first one exactly
            tracker.update(trajs)
            continue
        u = _uniforms(seed, batch, a, P, temperature)
        if strategy == "eas":
            trajs = _eas_attempt(policy, batch, starts, temperature, u, emb, offsets, opt, tracker,
                                 eas_config, a)
        else:
            hook = None if memory is None else MemoryHook(memory, memory_net, (B - a) / B)
            with torch.no_grad():
                trajs = rollout(policy, batch, starts, temperature, u, hook, embeddings=emb,
                                attempt_index=a)
            tracker.update(trajs)
            if memory is not None:
                memory.write(trajs, a, B)
        if strategy == "eas":
            mean = float(trajs.costs.mean())
            first_mean = mean if first_mean is None else first_mean
            if mean > eas_config.divergence_ratio * first_mean:
                raise DivergenceError(
                    f"EAS diverged at attempt {a}: mean cost {mean:.4f} vs {first_mean:.4f} at attempt 1",
                    {"attempt": a, "mean_cost": mean, "first_mean_cost": first_mean})
    return tracker.traces


def _eas_attempt(policy, batch, starts, temperature, u, emb, offsets, opt, tracker, cfg, a):
    with torch.enable_grad():
        trajs = rollout(policy, batch, starts, temperature, u, embeddings=emb + offsets, attempt_index=a)
        rets = trajs.returns.detach()
        prev_best = tracker.best_ret.clone()
        if a == 0:
            baseline = rets.mean(1, keepdim=True)
        else:
            baseline = prev_best[:, None]
        adv = (rets - baseline).to(emb.dtype)
        loss = -(adv * trajs.logp_sum()).mean()
        tracker.update(trajs)
        if cfg.imitation:
            inc = tracker.incumbents(batch.kind)
            inc_logp = replay_logps(policy, batch, inc, embeddings=emb + offsets,
                                    temperature=temperature or 1.0)
            loss = loss - cfg.imitation * inc_logp.sum(-1).mean()
        opt.zero_grad()
        if loss.requires_grad:
            loss.backward()
            opt.step()
    return trajs


def _chunks(n, size):
    return [list(range(i, min(i + size, n))) for i in range(0, n, size)]


def run_search(strategy, instances, policy: Policy, budget: BudgetSpec, seed: int = 0,
               memory_net=None, eas_config=None, workers: int = 1, chunk_size: int = 25,
               memory_size: int = 40, shared_memory: bool = False, timing: bool = True):
    """Search every instance; returns one SearchTrace per instance, in input order."""
    batch = instances if isinstance(instances, InstanceBatch) else InstanceBatch.from_instances(instances)
    chunks = _chunks(batch.batch, chunk_size)

    def work(idx):
        t0 = time.perf_counter()
        traces = _search_batch(strategy, batch.select(idx), policy, budget, seed, memory_net,
                               eas_config, memory_size, shared_memory)
        wall = (time.perf_counter() - t0) * 1000.0 / len(idx)
        for tr in traces:
            tr.wall_ms = wall if timing else 0.0
        return traces

    if workers <= 1:
        results = [work(idx) for idx in chunks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, chunks))
    return [tr for chunk in results for tr in chunk]


def sampling_search(instance, policy, budget: BudgetSpec, seed: int = 0) -> SearchTrace:
    return run_search("greedy" if budget.temperature == 0 else "sampling", [instance], policy, budget, seed)[0]


def memento_search(instance, policy, memory_net, budget: BudgetSpec, seed: int = 0, **kw) -> SearchTrace:
    return run_search("memento", [instance], policy, budget, seed, memory_net=memory_net, **kw)[0]


def eas_search(instance, policy, budget: BudgetSpec, eas_config: EASConfig | None = None,
               seed: int = 0) -> SearchTrace:
    return run_search("eas", [instance], policy, budget, seed, eas_config=eas_config)[0]


# ------------------------------------------------------------------ evaluate

METRIC_COLUMNS = ("instance_id", "strategy", "budget", "best_cost", "gap", "wall_ms")


def optimality_gap(cost: float, reference: float) -> float:
    """Gap in percent."""
    if not reference > 0:
        raise ValidationError(f"reference cost must be positive, got {reference}")
    return 100.0 * (cost - reference) / reference


def read_reference(path) -> dict:
    with open(path, newline="") as fh:
        return {int(row["instance_id"]): float(row["cost"]) for row in csv.DictReader(fh)}


def write_reference(path, ids, costs) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["instance_id", "cost"])
        for iid, c in zip(ids, costs):
            w.writerow([iid, repr(float(c))])


@dataclass
class EvalResult:
    rows: list
    traces: list
    mean_cost: float
    mean_gap: float | None


def evaluate(dataset: Dataset, strategy: str, policy: Policy, budget: BudgetSpec, seed: int = 0,
             reference=None, memory_net=None, eas_config=None, workers: int = 1, chunk_size: int = 25,
             timing: bool = True, **kw) -> EvalResult:
    """Search a whole dataset and tabulate per-instance best cost and gap.

    ``reference`` is a sequence of costs aligned with the dataset, a dict keyed
    by instance id, or a path to a reference CSV.
    """
    if policy.kind is not dataset.kind:
        raise ValidationError(f"checkpoint is for {policy.kind.value}, dataset is {dataset.kind.value}")
    ref = None
    if reference is not None:
        if isinstance(reference, (str, bytes)) or hasattr(reference, "__fspath__"):
            reference = read_reference(reference)
        if isinstance(reference, dict):
            missing = [inst.id for inst in dataset if inst.id not in reference]
            if missing or len(reference) != len(dataset):
                raise ValidationError("reference file does not match the dataset")
            ref = [reference[inst.id] for inst in dataset]
        else:
            ref = [float(c) for c in reference]
            if len(ref) != len(dataset):
                raise ValidationError(f"reference has {len(ref)} costs for {len(dataset)} instances")
    traces = run_search(strategy, list(dataset), policy, budget, seed, memory_net=memory_net,
                        eas_config=eas_config, workers=workers, chunk_size=chunk_size, timing=timing, **kw)
    rows = []
    for k, (inst, tr) in enumerate(zip(dataset, traces)):
        tr.check()
        # the rollout accumulates its return step by step; report the exactly
        # rounded cost of the incumbent so it compares cleanly with references
        cost = solution_cost(inst, tr.best_solution)
        if abs(cost - tr.best_cost) > 1e-9:
            raise AssertionError(f"incumbent cost mismatch on instance {tr.instance_id}")
        gap = None if ref is None else optimality_gap(cost, ref[k])
        rows.append({"instance_id": tr.instance_id, "strategy": strategy, "budget": budget.attempts,
                     "best_cost": cost, "gap": gap, "wall_ms": tr.wall_ms})
    mean_cost = float(np.mean([r["best_cost"] for r in rows]))
    mean_gap = None if ref is None else float(np.mean([r["gap"] for r in rows]))
    return EvalResult(rows, traces, mean_cost, mean_gap)


def write_metrics(path, rows, append: bool = False) -> None:
    mode = "a" if append else "w"
    with open(path, mode, newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if not append:
            w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow([r["instance_id"], r["strategy"], r["budget"], repr(float(r["best_cost"])),
                        "" if r["gap"] is None else repr(float(r["gap"])), f"{r['wall_ms']:.3f}"])


def write_traces(path, traces) -> None:
    """Per-attempt curves: best-so-far and latest-sample statistics."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["instance_id", "strategy", "attempt", "best_so_far", "mean_cost", "std_cost"])
        for tr in traces:
            for a, (b, m, s) in enumerate(zip(tr.best_so_far, tr.mean_cost, tr.std_cost)):
                w.writerow([tr.instance_id, tr.strategy, a, repr(b), repr(m), repr(s)])
