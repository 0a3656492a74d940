
import numpy as np
import pytest
import torch

from memento.analysis import (RESOLUTION, STAGES, ReinforceSurrogate, export_rule_grid, read_rule_grid,
                              reinforce_capacity_check, reinforce_case, rule_grid, run_ablation, write_ablation,
                              write_capacity_report)
from memento.errors import ValidationError
from memento.instances import generate_dataset
from memento.memory import MemoryNet
from memento.policy import Policy, PolicyConfig
from memento.search import BudgetSpec
from memento.training import TrainConfig


class Constant:
    def __call__(self, features):
        return torch.full(features.shape[:-1], 0.25, dtype=features.dtype)


def test_constant_net_gives_constant_grid():
    grid = rule_grid(Constant(), 0.5)
    assert grid.values.shape == (RESOLUTION, RESOLUTION)
    assert np.all(grid.values == 0.25)


def test_surrogate_grid_matches_closed_form():
    grid = rule_grid(ReinforceSurrogate(), 0.5)
    R, L = np.meshgrid(grid.ret_axis, grid.logp_axis, indexing="ij")
    assert np.max(np.abs(grid.values - R * (1 - np.exp(L)))) <= 1e-12
    assert grid.ret_axis[0] == -3 and grid.ret_axis[-1] == 3
    assert grid.logp_axis[0] == -6 and grid.logp_axis[-1] == 0


def test_surrogate_quadrants():
    q = rule_grid(ReinforceSurrogate(), 0.5).quadrant_means()
    assert q["high_ret_low_logp"] > q["low_ret_high_logp"]


def test_degenerate_axes_rejected():
    with pytest.raises(ValidationError):
        rule_grid(Constant(), 0.5, ret_range=(1.0, 1.0))
    with pytest.raises(ValidationError):
        rule_grid(Constant(), 0.5, resolution=1)


def test_export_is_pure_and_round_trips(tmp_path):
    net = MemoryNet(seed=3, final_init=0.5)
    first = export_rule_grid(net, tmp_path / "a")
    export_rule_grid(net, tmp_path / "b")
    assert set(first) == set(STAGES) == {"low", "mid", "high"}
    for stage, (path, grid) in first.items():
        assert path.read_bytes() == (tmp_path / "b" / path.name).read_bytes()
        text = path.read_text()
        assert "# budget_at_write=0.5" in text and f"# remaining_budget={STAGES[stage]}" in text
        back = read_rule_grid(path)
        assert np.array_equal(back.values, grid.values) and back.stage == stage
        assert np.all(np.isfinite(back.values))


def test_remaining_budget_changes_trained_style_grid():
    net = MemoryNet(seed=1, final_init=1.0)
    low = rule_grid(net, STAGES["low"]).values
    high = rule_grid(net, STAGES["high"]).values
    assert not np.array_equal(low, high)


# ------------------------------------------------------------ REINFORCE check

def test_two_action_closed_form():
    inc, grad = reinforce_case([0.0, 0.0], 0, 1.0)
    assert grad.tolist() == pytest.approx([0.5, -0.5], abs=1e-15)
    assert inc.tolist() == pytest.approx([0.5, 0.0], abs=1e-15)


def test_zero_advantage_gives_zero():
    inc, grad = reinforce_case([0.3, -1.0, 2.0], 2, 0.0)
    assert inc.abs().max() == 0 and grad.abs().max() == 0


def test_random_five_action_case():
    gen = np.random.default_rng(4)
    logits = gen.normal(size=5)
    inc, grad = reinforce_case(logits, 3, 1.7)
    p = np.exp(logits - logits.max())
    p /= p.sum()
    assert abs(float(inc[3]) - 1.7 * (1 - p[3])) < 1e-9
    assert abs(float(inc[3] - grad[3])) < 1e-9


def test_capacity_report(tmp_path):
    pol = Policy(PolicyConfig(embed_dim=8, n_heads=2, ff_dim=8))
    inst = generate_dataset("TSP", 6, 1, 0)[0]
    report = reinforce_capacity_check(pol, inst, n_cases=200, seed=1)
    assert report.cases == 200 and report.passed
    assert report.max_off_action_residual > 0  # not representable by one-hot aggregation
    write_capacity_report(tmp_path / "r.csv", report)
    assert (tmp_path / "r.csv").read_text().count("\n") == 200 + 5


# -------------------------------------------------------------------- ablation

def test_ablation_outputs(tmp_path):
    pol = Policy(PolicyConfig(embed_dim=8, n_heads=2, ff_dim=8))
    cfg = TrainConfig(kind="TSP", n=6, budget=3, batch_size=2, starts=6, accumulation=1, steps=1)
    ds = generate_dataset("TSP", 6, 3, 2)
    curves, summary = run_ablation(["A", "D"], pol, cfg, ds, BudgetSpec(4, 6), seed=0)
    assert [s["subset"] for s in summary] == ["A", "D"]
    assert len(curves) == 2 * 4
    for s in ("A", "D"):
        seq = [c["best_so_far"] for c in curves if c["subset"] == s]
        assert all(b <= a for a, b in zip(seq, seq[1:]))
    write_ablation(tmp_path, curves, summary)
    assert (tmp_path / "ablation_summary.csv").read_text().splitlines()[0] == "subset,final_best"
    with pytest.raises(ValidationError):
        run_ablation(["Z"], pol, cfg, ds, BudgetSpec(2, 6))
