"""Inspecting learned update rules: rule grids, the REINFORCE capacity check, ablations."""
from __future__ import annotations

import copy
import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import rng
from .env import InstanceBatch, feasible_mask, reset
from .errors import ValidationError
from .memory import FEATURES, SUBSETS, MemoryNet, correction_logits, score_rows

STAGES = {"low": 0.9, "mid": 0.5, "high": 0.1}  # budget consumed low/mid/high -> remaining budget
RET_RANGE = (-3.0, 3.0)
LOGP_RANGE = (-6.0, 0.0)
RESOLUTION = 61


class ReinforceSurrogate:
    """Analytic weight ``ret * (1 - exp(logp))``: the REINFORCE logit gradient of the taken action."""

    def __call__(self, features):
        return features[..., FEATURES.index("ret")] * (1.0 - torch.exp(features[..., FEATURES.index("action_logp")]))


@dataclass
class RuleGrid:
    ret_axis: np.ndarray
    logp_axis: np.ndarray
    fixed: dict
    values: np.ndarray  # (len(ret_axis), len(logp_axis))
    stage: str = ""

    def quadrant_means(self):
        r_hi = self.ret_axis > 0
        r_lo = self.ret_axis < 0
        mid = 0.5 * (self.logp_axis[0] + self.logp_axis[-1])
        l_hi = self.logp_axis > mid
        l_lo = self.logp_axis < mid
        v = self.values
        return {
            "high_ret_low_logp": float(v[np.ix_(r_hi, l_lo)].mean()),
            "high_ret_high_logp": float(v[np.ix_(r_hi, l_hi)].mean()),
            "low_ret_low_logp": float(v[np.ix_(r_lo, l_lo)].mean()),
            "low_ret_high_logp": float(v[np.ix_(r_lo, l_hi)].mean()),
        }


def rule_grid(net, remaining_budget: float, horizon: int = 19, ret_range=RET_RANGE,
              logp_range=LOGP_RANGE, resolution: int = RESOLUTION, budget_at_write: float = 0.5,
              memory_logit: float = 0.0, stage: str = "") -> RuleGrid:
    """Evaluate a memory net over a (normalised return, action logp) grid.

    The other inputs are fixed: trajectory logp = logp * horizon / 4, tail
    logp = logp, plus the given budget values.
    """
    if resolution < 2 or ret_range[0] >= ret_range[1] or logp_range[0] >= logp_range[1]:
        raise ValidationError("degenerate rule-grid axes")
    rets = np.linspace(*ret_range, resolution)
    logps = np.linspace(*logp_range, resolution)
    R, L = np.meshgrid(rets, logps, indexing="ij")
    feats = np.zeros(R.shape + (len(FEATURES),))
    col = FEATURES.index
    feats[..., col("action_logp")] = L
    feats[..., col("ret")] = R
    feats[..., col("budget_at_write")] = budget_at_write
    feats[..., col("memory_logit_at_write")] = memory_logit
    feats[..., col("traj_logp")] = L * horizon / 4.0
    feats[..., col("tail_logp")] = L
    feats[..., col("remaining_budget")] = remaining_budget
    with torch.no_grad():
        values = score_rows(net, torch.from_numpy(feats)).double().numpy()
    fixed = {"budget_at_write": budget_at_write, "memory_logit_at_write": memory_logit,
             "traj_logp": f"logp*{horizon}/4", "tail_logp": "logp", "remaining_budget": remaining_budget}
    return RuleGrid(rets, logps, fixed, values, stage)


def write_rule_grid(path, grid: RuleGrid) -> None:
    with open(path, "w", newline="") as fh:
        for k, v in sorted(grid.fixed.items()):
            fh.write(f"# {k}={v}\n")
        fh.write(f"# stage={grid.stage}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["ret", "logp", "correction"])
        for i, r in enumerate(grid.ret_axis):
            for j, lp in enumerate(grid.logp_axis):
                w.writerow([repr(float(r)), repr(float(lp)), repr(float(grid.values[i, j]))])


def read_rule_grid(path) -> RuleGrid:
    fixed, rows = {}, []
    with open(path) as fh:
        lines = fh.read().splitlines()
    body = []
    for line in lines:
        if line.startswith("#"):
            k, v = line[1:].strip().split("=", 1)
            fixed[k] = v
        else:
            body.append(line)
    reader = csv.DictReader(body)
    for row in reader:
        rows.append((float(row["ret"]), float(row["logp"]), float(row["correction"])))
    rets = np.unique([r[0] for r in rows])
    logps = np.unique([r[1] for r in rows])
    values = np.array([r[2] for r in rows]).reshape(len(rets), len(logps))
    return RuleGrid(rets, logps, fixed, values, fixed.pop("stage", ""))


def export_rule_grid(net, out_dir, stages=None, horizon: int = 19, **kw) -> dict:
    """One CSV per budget stage; returns ``{stage: (path, RuleGrid)}``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = {}
    for stage, remaining in (stages or STAGES).items():
        grid = rule_grid(net, remaining, horizon=horizon, stage=stage, **kw)
        path = out / f"rule_grid_{stage}.csv"
        write_rule_grid(path, grid)
        result[stage] = (path, grid)
    return result


# ----------------------------------------------------------- REINFORCE check

@dataclass
class CapacityReport:
    cases: int
    max_taken_deviation: float
    max_off_action_residual: float
    details: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_taken_deviation < 1e-9


def reinforce_case(logits, action: int, advantage: float):
    """Return (surrogate increment, REINFORCE logit gradient) for one decision.

    The surrogate builds a single memory entry for the taken action and
    aggregates it one-hot with the analytic weight; the gradient comes from
    autograd of ``advantage * log_softmax(logits)[action]``.
    """
    logits = torch.as_tensor(logits, dtype=torch.float64).clone().requires_grad_(True)
    logprobs = torch.log_softmax(logits, dim=-1)
    (grad,) = torch.autograd.grad(advantage * logprobs[action], logits)
    feats = torch.zeros(1, len(FEATURES), dtype=torch.float64)
    feats[0, FEATURES.index("action_logp")] = float(logprobs[action].detach())
    feats[0, FEATURES.index("ret")] = advantage
    inc = correction_logits(torch.tensor([action]), feats, ReinforceSurrogate(), logits.shape[-1])
    return inc.detach(), grad.detach()


def reinforce_capacity_check(policy=None, instance=None, n_cases: int = 1000, seed: int = 0,
                             max_actions: int = 6) -> CapacityReport:
    """Compare the surrogate memory update to the REINFORCE logit gradient.

    With a policy and instance, cases use the policy's logits at the instance's
    initial states (feasible actions only); the rest are random logit vectors.
    Only the taken coordinate can match: the off-action terms ``-R pi(b)`` are
    not representable by a one-hot aggregation and are reported separately.
    """
    gen = rng.stream(seed, 0xF1)
    cases = []
    if policy is not None and instance is not None:
        batch = InstanceBatch.from_instances([instance])
        state = reset(batch)
        mask = feasible_mask(state)
        with torch.no_grad():
            logits = policy.logits(state, policy.encode(batch)).double()
        for p in range(state.shape[1]):
            feas = mask[0, p].nonzero()[:, 0]
            cases.append(logits[0, p, feas].numpy())
    while len(cases) < n_cases:
        k = int(gen.integers(2, max_actions + 1))
        cases.append(gen.normal(0.0, 2.0, size=k))
    dev = res = 0.0
    details = []
    for c in cases[:n_cases]:
        action = int(gen.integers(0, len(c)))
        adv = float(gen.exponential(1.0))
        inc, grad = reinforce_case(c, action, adv)
        d = abs(float(inc[action] - grad[action]))
        off = torch.cat([grad[:action], grad[action + 1:]])
        r = float(off.abs().max()) if len(off) else 0.0
        dev, res = max(dev, d), max(res, r)
        details.append((len(c), action, adv, d, r))
    return CapacityReport(len(details), dev, res, details)


def write_capacity_report(path, report: CapacityReport) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# cases={report.cases}\n# max_taken_deviation={report.max_taken_deviation!r}\n")
        fh.write(f"# max_off_action_residual={report.max_off_action_residual!r}\n")
        fh.write("# off-action terms -R*pi(b) are outside the one-hot aggregation and not compared\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["n_actions", "action", "advantage", "taken_deviation", "off_action_residual"])
        for row in report.details:
            w.writerow([row[0], row[1], repr(row[2]), repr(row[3]), repr(row[4])])


# ------------------------------------------------------------------ ablation

def run_ablation(subsets, policy, train_config, dataset, budget, seed: int = 0, workers: int = 1,
                 train_fn=None, timing: bool = False):
    """Train one memory net per feature subset and evaluate each with MEMENTO search.

    Returns ``(curve rows, summary rows)``. Each subset starts from a copy of
    the same base policy.
    """
    from dataclasses import replace

    from .search import evaluate
    from .training import train

    train_fn = train_fn or train
    curves, summary = [], []
    for subset in subsets:
        if subset not in SUBSETS:
            raise ValidationError(f"unknown feature subset {subset!r}")
        base = copy.deepcopy(policy)
        cfg = replace(train_config, features=subset, refine=False)
        net = MemoryNet(subset, hidden=cfg.hidden, seed=cfg.seed)
        net, _ = train_fn(cfg, base, net, timing=timing)
        res = evaluate(dataset, "memento", base, budget, seed, memory_net=net, workers=workers, timing=timing)
        traces = res.traces
        for a in range(budget.attempts):
            curves.append({"subset": subset, "attempt": a,
                           "best_so_far": float(np.mean([t.best_so_far[a] for t in traces])),
                           "latest_mean": float(np.mean([t.mean_cost[a] for t in traces]))})
        summary.append({"subset": subset, "final_best": res.mean_cost,
                        "per_instance": [t.best_cost for t in traces]})
    return curves, summary


def write_ablation(out_dir, curves, summary) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "ablation_curves.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subset", "attempt", "best_so_far", "latest_mean"])
        for r in curves:
            w.writerow([r["subset"], r["attempt"], repr(r["best_so_far"]), repr(r["latest_mean"])])
    with open(out / "ablation_summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subset", "final_best"])
        for r in summary:
            w.writerow([r["subset"], repr(r["final_best"])])
