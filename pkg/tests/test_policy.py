import math

import numpy as np
import pytest
import torch

from fdcheck import fd_gradient, max_rel_error
from memento import rng
from memento.env import InstanceBatch, check_feasible, default_starts, feasible_mask, horizon, reset, step
from memento.errors import ContractError, ValidationError
from memento.instances import Instance, Kind, generate_dataset
from memento.policy import Policy, PolicyConfig, replay_logps, rollout, sample_action, weighted_logp_grad


def small_policy(kind="TSP", seed=0, d=8):
    return Policy(PolicyConfig(kind=kind, embed_dim=d, n_layers=2, n_heads=2, ff_dim=16), seed=seed).double()


def uniforms(batch, n_starts, seed=0, attempt=0):
    return rng.attempt_uniforms(seed, batch.ids, attempt, n_starts, horizon(batch.kind, batch.n))


def sample(policy, ds, seed=0, temperature=1.0):
    batch = InstanceBatch.from_instances(ds.instances)
    starts = default_starts(batch.kind, batch.n)
    with torch.no_grad():
        return batch, rollout(policy, batch, starts, temperature, uniforms(batch, len(starts), seed))


# ------------------------------------------------------------------ encoder

def test_identical_nodes_identical_embeddings():
    coords = np.random.default_rng(0).random((5, 2))
    coords[3] = coords[1]
    with torch.no_grad():
        emb = small_policy().encode(InstanceBatch.from_instances([Instance(Kind.TSP, coords)]))
    assert torch.allclose(emb[0, 1], emb[0, 3], atol=1e-14)


@pytest.mark.parametrize("kind", ["TSP", "CVRP"])
def test_encoder_permutation_equivariance(kind):
    inst = generate_dataset(kind, 7, 1, 2)[0]
    perm = np.array([0, 4, 2, 6, 1, 5, 3]) if kind == "CVRP" else np.random.default_rng(1).permutation(7)
    permuted = Instance(inst.kind, inst.coords[perm], None if inst.demands is None else inst.demands[perm],
                        inst.capacity)
    pol = small_policy(kind)
    a = pol.encode(InstanceBatch.from_instances([inst]))[0]
    b = pol.encode(InstanceBatch.from_instances([permuted]))[0]
    assert torch.allclose(a[torch.from_numpy(perm)], b, atol=1e-12)


def test_embeddings_finite_sweep():
    ds = generate_dataset("TSP", 10, 1000, 3)
    emb = Policy(PolicyConfig()).encode(InstanceBatch.from_instances(ds.instances))
    assert bool(torch.isfinite(emb).all())


# ------------------------------------------------------------------- logits

def test_single_feasible_action_takes_all_mass():
    inst = generate_dataset("TSP", 4, 1, 0)[0]
    pol = small_policy()
    s = reset([inst], [0])
    s, _ = step(s, [[1]])
    s, _ = step(s, [[2]])
    with torch.no_grad():
        probs = torch.softmax(pol.logits(s, pol.encode(InstanceBatch.from_instances([inst]))), -1)
    assert float(probs[0, 0, 3]) >= 1 - 1e-12


def test_zero_pointer_projection_gives_uniform():
    pol = small_policy()
    with torch.no_grad():
        pol.wo_glimpse.weight.zero_()
    inst = generate_dataset("TSP", 6, 1, 0)[0]
    batch = InstanceBatch.from_instances([inst])
    s, _ = step(reset(batch, [0, 1]), [[3, 4]])
    probs = torch.softmax(pol.logits(s, pol.encode(batch)), -1)
    mask = feasible_mask(s)
    assert torch.allclose(probs[mask], torch.full_like(probs[mask], 1 / 4), atol=1e-15)


def test_logits_pure_and_masked():
    inst = generate_dataset("CVRP", 6, 1, 0)[0]
    pol = small_policy("CVRP")
    batch = InstanceBatch.from_instances([inst])
    s = reset(batch, [1, 2])
    with torch.no_grad():
        l1, l2 = pol.logits(s, pol.encode(batch)), pol.logits(s, pol.encode(batch))
    assert torch.equal(l1, l2)
    mask = feasible_mask(s)
    assert bool((l1[~mask] == -1e9).all()) and bool(torch.isfinite(l1[mask]).all())
    assert float(l1[mask].abs().max()) <= 10.0


def test_logits_reject_terminal_state():
    inst = Instance(Kind.TSP, np.array([[0.0, 0.0], [1.0, 1.0]]))
    pol = small_policy()
    s, _ = step(reset([inst], [0]), [[1]])
    with pytest.raises(ContractError):
        pol.logits(s, pol.encode(InstanceBatch.from_instances([inst])))


# ----------------------------------------------------------------- sampling

def test_sample_action_closed_forms():
    a, logp = sample_action(torch.tensor([[0.0, 0.0]], dtype=torch.float64), 1.0, torch.tensor([0.3]))
    assert int(a[0]) == 0 and float(logp[0]) == pytest.approx(math.log(0.5), abs=1e-15)
    a, _ = sample_action(torch.tensor([[0.0, 0.0]], dtype=torch.float64), 1.0, torch.tensor([0.7]))
    assert int(a[0]) == 1
    logits = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    _, lp1 = sample_action(logits, 1.0, torch.tensor([0.0]))
    _, lp2 = sample_action(logits, 2.0, torch.tensor([0.0]))
    assert float(lp1[0]) == pytest.approx(math.log(math.e / (math.e + 1)), abs=1e-14)
    assert float(lp2[0]) == pytest.approx(math.log(math.exp(0.5) / (math.exp(0.5) + 1)), abs=1e-14)


def test_greedy_ties_lowest_index():
    a, logp = sample_action(torch.tensor([[0.5, 2.0, 2.0, -1e9]], dtype=torch.float64), 0.0)
    assert int(a[0]) == 1


def test_all_masked_rejected():
    with pytest.raises(ContractError):
        sample_action(torch.full((1, 3), -1e9, dtype=torch.float64), 1.0, torch.tensor([0.5]))
    with pytest.raises(ValidationError):
        sample_action(torch.zeros(1, 3), -1.0, torch.tensor([0.5]))


def test_sampling_frequencies_match_softmax():
    logits = torch.tensor([1.0, -0.5, 0.3, -1e9, 2.0], dtype=torch.float64)
    n = 100_000
    u = torch.from_numpy(rng.stream(99).random(n))
    a, _ = sample_action(logits.expand(n, -1), 1.3, u)
    p = torch.softmax(logits / 1.3, -1).numpy()
    freq = np.bincount(a.numpy(), minlength=5) / n
    sigma = np.sqrt(p * (1 - p) / n)
    assert freq[3] == 0
    assert np.all(np.abs(freq - p) <= 3 * sigma + 1e-12)


# ------------------------------------------------------------------ rollout

def test_two_node_rollout_forced():
    inst = Instance(Kind.TSP, np.array([[0.0, 0.0], [0.6, 0.8]]))
    batch = InstanceBatch.from_instances([inst])
    trajs = rollout(small_policy(), batch, [0, 1], 1.0, uniforms(batch, 2))
    assert trajs.actions.shape == (1, 2, 1)
    assert torch.allclose(trajs.logps, torch.zeros_like(trajs.logps), atol=1e-12)
    assert torch.allclose(trajs.costs, torch.full((1, 2), 2.0, dtype=torch.float64), atol=1e-15)


@pytest.mark.parametrize("kind,n", [("TSP", 10), ("CVRP", 11)])
def test_rollouts_deterministic_and_feasible(kind, n):
    ds = generate_dataset(kind, n, 8, 4)
    pol = small_policy(kind)
    batch, t1 = sample(pol, ds, seed=5)
    _, t2 = sample(pol, ds, seed=5)
    assert torch.equal(t1.actions, t2.actions) and torch.equal(t1.returns, t2.returns)
    for i, inst in enumerate(ds):
        for p in range(t1.shape[1]):
            check_feasible(inst, t1.solution(i, p), float(t1.returns[i, p]))
    assert torch.equal(t1.memory_logits, torch.zeros_like(t1.memory_logits))


def test_rollout_log_probs_match_teacher_forcing():
    ds = generate_dataset("CVRP", 8, 4, 1)
    pol = small_policy("CVRP")
    batch, trajs = sample(pol, ds)
    with torch.no_grad():
        replay = replay_logps(pol, batch, trajs)
    assert torch.allclose(replay, trajs.logps, atol=1e-12)


def test_greedy_deterministic_and_mask_respecting():
    ds = generate_dataset("TSP", 8, 1000, 9)
    pol = Policy(PolicyConfig())
    batch = InstanceBatch.from_instances(ds.instances)
    with torch.no_grad():
        a = rollout(pol, batch, [0, 3], 0.0)
        b = rollout(pol, batch, [0, 3], 0.0)
    assert torch.equal(a.actions, b.actions)
    sorted_tours = torch.sort(a.route_log, dim=-1).values
    assert torch.equal(sorted_tours, torch.arange(8).expand_as(sorted_tours))


def test_relabelling_leaves_cost_distribution_unchanged():
    inst = generate_dataset("TSP", 8, 1, 17)[0]
    perm = np.random.default_rng(3).permutation(8)
    relabelled = Instance(Kind.TSP, inst.coords[perm], id=inst.id + 1)
    pol = small_policy(d=16)
    inv = np.argsort(perm)
    costs = []
    for candidate, starts in ((inst, list(range(8))), (relabelled, inv.tolist())):
        batch = InstanceBatch.from_instances([candidate])
        vals = []
        with torch.no_grad():
            for attempt in range(250):
                u = rng.attempt_uniforms(11, batch.ids, attempt, 8, 7)
                vals.append(rollout(pol, batch, starts, 1.0, u).costs[0].numpy())
        costs.append(np.concatenate(vals))
    a, b = costs
    se = math.sqrt(a.var() / len(a) + b.var() / len(b))
    assert abs(a.mean() - b.mean()) <= 3 * se


# ---------------------------------------------------------------- gradients

def _objective(pol, batch, trajs, weights):
    return lambda: float((weights * replay_logps(pol, batch, trajs).sum(-1)).sum())


@pytest.mark.parametrize("kind,n", [("TSP", 5), ("CVRP", 5)])
def test_weighted_logp_grad_matches_finite_differences(kind, n):
    ds = generate_dataset(kind, n, 2, 21)
    pol = small_policy(kind, seed=3)
    batch, trajs = sample(pol, ds, seed=2)
    weights = torch.from_numpy(rng.stream(4).normal(size=trajs.shape))
    g = weighted_logp_grad(pol, batch, trajs, weights)
    names = [name for name, _ in pol.named_parameters()]
    fd = fd_gradient(_objective(pol, batch, trajs, weights), list(pol.parameters()))
    assert max_rel_error([g.tensors[k] for k in names], fd) < 1e-4


def test_weighted_logp_grad_zero_and_linear():
    ds = generate_dataset("TSP", 6, 2, 8)
    pol = small_policy()
    batch, trajs = sample(pol, ds)
    zero = weighted_logp_grad(pol, batch, trajs, torch.zeros(trajs.shape))
    assert all(float(t.abs().max()) == 0.0 for t in zero.tensors.values())
    w1 = torch.zeros(trajs.shape, dtype=torch.float64)
    w2 = torch.zeros(trajs.shape, dtype=torch.float64)
    w1[0, 1], w2[1, 4] = 0.7, -1.3
    g1 = weighted_logp_grad(pol, batch, trajs, w1)
    g2 = weighted_logp_grad(pol, batch, trajs, w2)
    both = weighted_logp_grad(pol, batch, trajs, w1 + w2)
    assert np.max(np.abs(g1.flat() + g2.flat() - both.flat())) < 1e-10
    with pytest.raises(ValidationError):
        weighted_logp_grad(pol, batch, trajs, torch.zeros(3))
