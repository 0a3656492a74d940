import math
from dataclasses import replace

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

import memento.training as training
from fdcheck import fd_gradient, max_rel_error
from memento import rng
from memento.env import InstanceBatch, default_starts, horizon
from memento.errors import DivergenceError, ValidationError
from memento.instances import brute_force, generate_dataset
from memento.memory import MemoryNet
from memento.policy import Policy, PolicyConfig, rollout
from memento.training import (GroupedAdam, PretrainConfig, TrainConfig, attempt_weight, improvement_advantage,
                              make_optimizer, optimizer_step, pretrain, replay_episode_loss, run_episode, train)


def micro(kind="TSP", n=5, K=3, b=2, seed=0, **kw):
    policy = Policy(PolicyConfig(kind=kind, embed_dim=8, n_layers=1, n_heads=2, ff_dim=8), seed=seed).double()
    net = MemoryNet(seed=seed, final_init=0.3).double()
    starts = n if kind == "TSP" else n - 1
    cfg = TrainConfig(kind=kind, n=n, budget=K, batch_size=b, starts=starts, **kw)
    batch = InstanceBatch.from_instances(generate_dataset(kind, n, b, seed + 100).instances)
    return policy, net, cfg, batch


# ---------------------------------------------------------------- advantage

def test_improvement_advantage_examples():
    assert improvement_advantage(-10.0, -12.0) == (2.0, -10.0)
    assert improvement_advantage(-12.0, -10.0) == (0.0, -10.0)


@given(st.lists(st.floats(-100, 0, allow_nan=False), min_size=1, max_size=50))
def test_advantages_telescope(returns):
    best = returns[0]
    total = 0.0
    for r in returns[1:]:
        adv, best = improvement_advantage(r, best)
        assert adv >= 0
        total += adv
    assert total == pytest.approx(max(returns) - returns[0], abs=1e-9)


def test_attempt_weight():
    assert attempt_weight(0, 0.01) == pytest.approx(0.00995033085, abs=1e-11)
    assert attempt_weight(199, 0.01) == math.log(200.01)
    w = [attempt_weight(i) for i in range(300)]
    assert all(b > a for a, b in zip(w, w[1:]))
    with pytest.raises(ValidationError):
        attempt_weight(0, 0.0)


def test_refine_mode_freezes_base():
    cfg = TrainConfig(refine=True)
    assert cfg.lr_encoder == 0 and cfg.lr_decoder == 0 and cfg.lr_memory == pytest.approx(0.0004)
    assert not cfg.train_base
    with pytest.raises(ValidationError):
        TrainConfig(budget=0)


# ---------------------------------------------------------------- optimizer

def test_adam_hand_computed_steps():
    p = torch.tensor([1.0, -2.0], dtype=torch.float64, requires_grad=True)
    opt = GroupedAdam({"g": ([p], 0.1)})
    g1 = torch.tensor([0.5, -3.0], dtype=torch.float64)
    opt.step({id(p): g1})
    # first step: m_hat = g, v_hat = g^2, so the update is lr * g / (|g| + eps)
    expect = torch.tensor([1.0, -2.0]) - 0.1 * g1 / (g1.abs() + 1e-8)
    assert torch.allclose(p.detach(), expect.double(), atol=1e-12)
    g2 = torch.tensor([-1.0, 1.0], dtype=torch.float64)
    opt.step({id(p): g2})
    b1, b2 = 0.9, 0.999
    m = (1 - b1) * (b1 * g1 + g2)
    v = (1 - b2) * (b2 * g1 ** 2 + g2 ** 2)
    m_hat, v_hat = m / (1 - b1 ** 2), v / (1 - b2 ** 2)
    expect = expect.double() - 0.1 * m_hat / (v_hat.sqrt() + 1e-8)
    assert torch.allclose(p.detach(), expect, atol=1e-12)


def test_zero_gradient_leaves_parameters():
    p = torch.tensor([0.3, 0.4], dtype=torch.float64, requires_grad=True)
    opt = GroupedAdam({"g": ([p], 0.1)})
    opt.step({id(p): torch.zeros(2, dtype=torch.float64)})
    assert p.detach().tolist() == [0.3, 0.4]


def test_group_learning_rates_respected():
    policy, net, cfg, _ = micro()
    cfg = replace(cfg, lr_encoder=0.0)
    opt = make_optimizer(policy, net, cfg)
    params = dict(policy.named_parameters())
    params.update({f"memory/{k}": v for k, v in net.named_parameters()})
    before = {k: v.detach().clone() for k, v in params.items()}
    optimizer_step(opt, params, {k: torch.ones_like(v) for k, v in params.items()})
    enc = {n for n, _ in policy.named_parameters() if n.startswith(("embed", "layers"))}
    for k, v in params.items():
        changed = not torch.equal(before[k], v.detach())
        assert changed == (k not in enc), k
    with pytest.raises(ValidationError):
        optimizer_step(opt, params, {"nope": torch.zeros(1)})
    with pytest.raises(ValidationError):
        optimizer_step(opt, params, {"memory/out.bias": torch.zeros(3)})


# ---------------------------------------------------------------- episodes

def test_episode_telescoping_and_nonnegative_terms():
    policy, net, cfg, batch = micro(n=7, K=8, b=3)
    _, _, stats, kept = run_episode(policy, net, batch, cfg, (5, 1), keep_records=True)
    assert torch.allclose(stats.advantage_sums, stats.best_returns - stats.first_returns, atol=1e-12, rtol=0)
    assert 0 <= stats.zero_advantage_fraction < 1
    for rec in kept:
        assert bool((rec.coef > 0).all())
        assert bool((rec.trajs.logp_sum() <= 0).all())


def test_single_attempt_has_no_gradient():
    policy, net, cfg, batch = micro(K=1)
    pg, mg, stats, kept = run_episode(policy, net, batch, cfg, (0, 1), keep_records=True)
    assert kept == []
    assert pg.norm() == 0.0 and mg.norm() == 0.0


@pytest.mark.parametrize("kind", ["TSP", "CVRP"])
def test_joint_gradient_matches_finite_differences(kind):
    policy, net, cfg, batch = micro(kind, n=5, K=3, b=2, seed=1)
    pg, mg, stats, kept = run_episode(policy, net, batch, cfg, (3, 7), keep_records=True)
    assert kept, "micro-setup must contain at least one improving attempt"
    with torch.no_grad():
        assert float(replay_episode_loss(policy, net, batch, kept)) == pytest.approx(stats.loss, abs=1e-12)
    params = list(policy.parameters()) + list(net.parameters())
    fd = fd_gradient(lambda: replay_episode_loss(policy, net, batch, kept), params)
    analytic = [pg.tensors[k] for k, _ in policy.named_parameters()] + [mg.tensors[k] for k, _ in net.named_parameters()]
    assert max_rel_error(analytic, fd) < 1e-4


def test_gradient_linear_in_advantages():
    policy, net, cfg, batch = micro(n=6, K=4, seed=2)
    _, _, _, kept = run_episode(policy, net, batch, cfg, (1, 1), keep_records=True)
    assert kept
    params = list(policy.parameters()) + list(net.parameters())
    g1 = torch.autograd.grad(replay_episode_loss(policy, net, batch, kept), params, allow_unused=True)
    for rec in kept:
        rec.coef = rec.coef * 2
    g2 = torch.autograd.grad(replay_episode_loss(policy, net, batch, kept), params, allow_unused=True)
    for a, b in zip(g1, g2):
        if a is not None:
            assert float((2 * a - b).abs().max()) < 1e-10


def test_episode_accumulated_matches_autograd_of_loss():
    policy, net, cfg, batch = micro("CVRP", n=6, K=4, seed=3)
    pg, mg, _, kept = run_episode(policy, net, batch, cfg, (2, 2), keep_records=True)
    params = list(policy.parameters()) + list(net.parameters())
    grads = torch.autograd.grad(replay_episode_loss(policy, net, batch, kept), params, allow_unused=True)
    names = [f"p/{k}" for k, _ in policy.named_parameters()] + [f"m/{k}" for k, _ in net.named_parameters()]
    ours = {**{f"p/{k}": v for k, v in pg.tensors.items()}, **{f"m/{k}": v for k, v in mg.tensors.items()}}
    for name, g in zip(names, grads):
        ref = torch.zeros_like(ours[name]) if g is None else g
        assert torch.allclose(ours[name], ref, atol=1e-13), name


def test_non_finite_loss_aborts(monkeypatch):
    policy, net, cfg, batch = micro(K=3)
    real = training.replay_logps

    def poisoned(*a, **kw):
        return real(*a, **kw) * float("nan")

    monkeypatch.setattr(training, "replay_logps", poisoned)
    with pytest.raises(DivergenceError) as err:
        run_episode(policy, net, batch, cfg, (3, 7))
    assert "attempt" in err.value.diagnostics


# ---------------------------------------------------------------- loops

def _tiny_train_config(**kw):
    return TrainConfig(kind="TSP", n=6, budget=3, batch_size=2, starts=6, accumulation=2, steps=2, seed=4, **kw)


def test_train_zero_steps_keeps_policy():
    policy = Policy(PolicyConfig(embed_dim=8, n_heads=2, ff_dim=8))
    before = {k: v.clone() for k, v in policy.state_dict().items()}
    net, rows = train(replace(_tiny_train_config(), steps=0), policy)
    assert rows == []
    assert all(torch.equal(before[k], v) for k, v in policy.state_dict().items())
    fresh = MemoryNet(seed=4)
    assert all(torch.equal(a, b) for a, b in zip(net.state_dict().values(), fresh.state_dict().values()))


def test_train_deterministic_and_logged(tmp_path):
    runs = []
    for k in range(2):
        policy = Policy(PolicyConfig(embed_dim=8, n_heads=2, ff_dim=8))
        net, rows = train(_tiny_train_config(), policy, log_path=tmp_path / f"log{k}.csv", timing=False)
        runs.append((policy.state_dict(), net.state_dict(), (tmp_path / f"log{k}.csv").read_bytes()))
    (p1, m1, l1), (p2, m2, l2) = runs
    assert l1 == l2
    assert l1.decode().splitlines()[0] == "step,mean_cost,best_of_K,grad_norm,val_best,wall_ms"
    assert all(torch.equal(p1[k], p2[k]) for k in p1) and all(torch.equal(m1[k], m2[k]) for k in m1)


def test_train_refine_only_moves_memory_net():
    policy = Policy(PolicyConfig(embed_dim=8, n_heads=2, ff_dim=8))
    before = {k: v.clone() for k, v in policy.state_dict().items()}
    train(_tiny_train_config(refine=True), policy)
    assert all(torch.equal(before[k], v) for k, v in policy.state_dict().items())


def test_train_rejects_kind_mismatch():
    with pytest.raises(ValidationError):
        train(_tiny_train_config(), Policy(PolicyConfig(kind="CVRP", embed_dim=8, n_heads=2, ff_dim=8)))


def test_shared_baseline_sums_to_zero():
    rets = torch.from_numpy(rng.stream(1).normal(size=(4, 10)))
    adv = rets - rets.mean(1, keepdim=True)
    assert float(adv.sum(1).abs().max()) < 1e-12


def test_pretraining_improves_tsp10():
    ds = generate_dataset("TSP", 10, 100, 555)
    batch = InstanceBatch.from_instances(ds.instances)
    opt = np.array([brute_force(inst)[0] for inst in ds.instances[:20]])
    cfg = PretrainConfig(kind="TSP", n=10, steps=150, batch_size=32, starts=10, lr=1e-3, seed=1)
    pcfg = PolicyConfig(embed_dim=32, n_heads=4, ff_dim=64)
    untrained = Policy(pcfg, seed=1)
    starts = default_starts(batch.kind, 10)
    with torch.no_grad():
        u = rng.attempt_uniforms(0, batch.ids, 0, 10, horizon(batch.kind, 10))
        before = rollout(untrained, batch, starts, 1.0, u).costs.mean(1).numpy()
        greedy_before = rollout(untrained, batch, starts, 0.0).costs.min(1).values.numpy()
    trained, rows = pretrain(cfg, pcfg)
    assert len(rows) == 150
    with torch.no_grad():
        greedy_after = rollout(trained, batch, starts, 0.0).costs.min(1).values.numpy()
    gap_before = np.mean(greedy_before[:20] / opt - 1)
    gap_after = np.mean(greedy_after[:20] / opt - 1)
    assert gap_after < gap_before
    assert (greedy_after <= before).sum() >= 90
