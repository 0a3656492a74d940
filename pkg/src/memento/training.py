"""Base-policy pretraining and budgeted multi-shot training of the memory.

Training runs ``budget`` sequential attempts per instance with a live memory.
Each attempt's rollouts are scored by their improvement over the best return
seen so far on the same (instance, starting point) chain, weighted by
``log(1 + eps + attempt)``, and turned into a REINFORCE gradient through the
memory-augmented policy. Gradients are averaged over attempts and instances
before a single optimizer step.
"""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass

import numpy as np
import torch

from . import rng
from .env import InstanceBatch, Trajectories, default_starts, horizon
from .errors import DivergenceError, ValidationError
from .instances import Kind, generate_dataset
from .memory import Memory, MemoryHook, MemoryNet, replay_corrections
from .policy import Gradients, Policy, PolicyConfig, named_grads, replay_logps, rollout

log = logging.getLogger(__name__)

TRAIN_SALT = 0x7EA1
PRETRAIN_SALT = 0x93E7


def improvement_advantage(ret, best_so_far):
    """ReLU improvement over the incumbent; returns ``(advantage, new_best)``.

    Works elementwise on floats, numpy arrays or tensors.
    """
    if torch.is_tensor(ret):
        return (ret - best_so_far).clamp_min(0.0), torch.maximum(ret, best_so_far)
    if isinstance(ret, np.ndarray) or isinstance(best_so_far, np.ndarray):
        return np.maximum(ret - best_so_far, 0.0), np.maximum(ret, best_so_far)
    return max(ret - best_so_far, 0.0), max(ret, best_so_far)


def attempt_weight(attempt: int, eps: float = 0.01) -> float:
    """``log(1 + eps + attempt)`` with 0-based attempts."""
    if attempt < 0 or eps <= 0:
        raise ValidationError("attempt must be >= 0 and eps > 0")
    return math.log(1.0 + eps + attempt)


@dataclass
class TrainConfig:
    kind: str = "TSP"
    n: int = 20
    budget: int = 50
    batch_size: int = 16
    starts: int = 20
    accumulation: int = 4
    lr_memory: float = 0.004
    lr_encoder: float = 1e-4
    lr_decoder: float = 1e-4
    epsilon: float = 0.01
    steps: int = 100
    seed: int = 0
    refine: bool = False
    memory_size: int = 40
    features: str = "D"
    shared_memory: bool = False
    hidden: int = 8
    checkpoint_every: int = 0
    val_every: int = 0
    val_size: int = 16
    val_budget: int = 50

    def __post_init__(self):
        if min(self.budget, self.batch_size, self.starts, self.accumulation) < 1 or self.steps < 0:
            raise ValidationError("budget, batch size, starts and accumulation must be positive")
        if self.epsilon <= 0:
            raise ValidationError("epsilon must be > 0")
        if not all(math.isfinite(lr) and lr >= 0 for lr in (self.lr_memory, self.lr_encoder, self.lr_decoder)):
            raise ValidationError("learning rates must be finite and non-negative")
        if self.refine:
            # frozen base, memory-only refinement at a tenth of the rate
            self.lr_encoder = 0.0
            self.lr_decoder = 0.0
            self.lr_memory *= 0.1

    @property
    def train_base(self) -> bool:
        return self.lr_encoder > 0 or self.lr_decoder > 0


@dataclass
class PretrainConfig:
    kind: str = "TSP"
    n: int = 20
    steps: int = 2000
    batch_size: int = 64
    starts: int = 20
    lr: float = 1e-3
    seed: int = 0


# ------------------------------------------------------------------ optimizer

class GroupedAdam:
    """Adam with one parameter group per module part, each with its own rate."""

    def __init__(self, groups: dict):
        # groups: name -> (list of parameters, lr)
        self.names = list(groups)
        self.opt = torch.optim.Adam(
            [{"params": list(params), "lr": lr, "name": name} for name, (params, lr) in groups.items()])

    def step(self, grads_by_param: dict) -> None:
        """``grads_by_param`` maps each parameter tensor's id to its gradient."""
        for group in self.opt.param_groups:
            for p in group["params"]:
                g = grads_by_param.get(id(p))
                if g is not None and g.shape != p.shape:
                    raise ValidationError(f"gradient shape {tuple(g.shape)} != parameter {tuple(p.shape)}")
                p.grad = None if g is None else g.to(p.dtype).clone()
        self.opt.step()
        self.opt.zero_grad(set_to_none=True)


def optimizer_step(optimizer: GroupedAdam, params, grads) -> None:
    """Apply named gradients (``Gradients`` or list) to ``params`` (name -> tensor)."""
    tensors = grads.tensors if isinstance(grads, Gradients) else grads
    mapping = {}
    for name, g in tensors.items():
        if name not in params:
            raise ValidationError(f"gradient for unknown parameter {name!r}")
        mapping[id(params[name])] = g
    optimizer.step(mapping)


def make_optimizer(policy: Policy, memory_net: MemoryNet, config: TrainConfig) -> GroupedAdam:
    return GroupedAdam({
        "memory": (memory_net.parameters(), config.lr_memory),
        "encoder": (policy.encoder_parameters(), config.lr_encoder),
        "decoder": (policy.decoder_parameters(), config.lr_decoder),
    })


# ------------------------------------------------------------------ episodes

@dataclass
class AttemptRecord:
    """Everything needed to recompute one attempt's loss by teacher forcing."""
    rows: torch.Tensor  # (R, 2) (instance, start column) pairs with positive advantage
    trajs: Trajectories  # restricted to rows, shape (R, 1, T)
    records: list  # retrieval records restricted to rows
    coef: torch.Tensor  # (R,) loss coefficient: weight * advantage / normaliser


@dataclass
class EpisodeStats:
    mean_cost: float
    best_of_budget: float
    mean_advantage: float
    zero_advantage_fraction: float
    first_returns: torch.Tensor
    best_returns: torch.Tensor
    advantage_sums: torch.Tensor
    advantages: torch.Tensor | None = None  # (K, batch, starts)
    best_trajectory: tuple | None = None
    loss: float = 0.0


def _subset_trajs(trajs: Trajectories, bi, pi) -> Trajectories:
    def sel(x):
        return x[bi, pi][:, None]
    return Trajectories(trajs.kind, tuple(trajs.ids[int(i)] for i in bi), sel(trajs.start), sel(trajs.actions),
                        sel(trajs.nodes), sel(trajs.valid), sel(trajs.logps), sel(trajs.memory_logits),
                        sel(trajs.returns), sel(trajs.route_log), trajs.attempt_index)


def run_episode(policy: Policy, memory_net: MemoryNet, batch: InstanceBatch, config: TrainConfig,
                key: tuple, keep_records: bool = False):
    """Roll out ``config.budget`` attempts per instance and compute loss gradients.

    Returns ``(policy Gradients, memory Gradients, EpisodeStats, attempt records)``;
    records are only kept with ``keep_records``.
    """
    starts = default_starts(batch.kind, batch.n, config.starts)
    B, P, K, n = batch.batch, len(starts), config.budget, batch.n
    H = horizon(batch.kind, n)
    train_base = config.train_base
    enc_params = policy.encoder_parameters()
    dec_params = policy.decoder_parameters()
    mem_params = list(memory_net.parameters())
    with torch.set_grad_enabled(train_base):
        emb = policy.encode(batch)
    emb_leaf = emb.detach().requires_grad_(train_base)
    memory = Memory(B, starts, n, config.memory_size, shared=config.shared_memory, dtype=emb.dtype)
    dec_acc = [torch.zeros_like(p) for p in dec_params]
    mem_acc = [torch.zeros_like(p) for p in mem_params]
    emb_acc = torch.zeros_like(emb_leaf)
    best = first = None
    adv_sum = torch.zeros(B, P, dtype=torch.float64)
    adv_history = []
    adv_total, zero_count, costs_sum, loss_total = 0.0, 0, 0.0, 0.0
    kept = []
    norm = B * P * K
    for i in range(K):
        records = []
        u = rng.attempt_uniforms(key[0], batch.ids, i, P, H, salt=key[1])
        hook = MemoryHook(memory, memory_net, (K - i) / K, records)
        with torch.no_grad():
            trajs = rollout(policy, batch, starts, 1.0, u, hook, embeddings=emb_leaf.detach(), attempt_index=i)
        rets = trajs.returns
        if best is None:
            adv = torch.zeros_like(rets)
            best = rets.clone()
            first = rets.clone()
        else:
            adv, best = improvement_advantage(rets, best)
        adv_sum += adv
        adv_history.append(adv)
        adv_total += float(adv.sum())
        zero_count += int((adv <= 0).sum())
        costs_sum += float(trajs.costs.sum())
        coef_all = attempt_weight(i, config.epsilon) * adv / norm
        rows = (adv > 0).nonzero()
        if len(rows):
            bi, pi = rows[:, 0], rows[:, 1]
            sub = _subset_trajs(trajs, bi, pi)
            sub_records = [rec.select(bi, pi) for rec in records]
            coef = coef_all[bi, pi].to(emb.dtype)
            with torch.enable_grad():
                logps = replay_logps(policy, batch.select(bi.tolist()), sub, embeddings=emb_leaf[bi],
                                     corrections=replay_corrections(sub_records, memory_net, n))
                loss = -(coef * logps.sum(-1)[:, 0]).sum()
                if not torch.isfinite(loss):
                    raise DivergenceError("non-finite training loss",
                                          {"attempt": i, "coef_max": float(coef.detach().max()),
                                           "logp_min": float(logps.detach().min())})
                targets = dec_params + mem_params + ([emb_leaf] if train_base else [])
                grads = torch.autograd.grad(loss, targets, allow_unused=True)
            loss_total += float(loss.detach())
            for acc, g in zip(dec_acc + mem_acc, grads[:len(dec_acc) + len(mem_acc)]):
                if g is not None:
                    acc += g
            if train_base and grads[-1] is not None:
                emb_acc += grads[-1]
            if keep_records:
                kept.append(AttemptRecord(rows, sub, sub_records, coef.detach()))
        memory.write(trajs, i, K)
    enc_grads = [torch.zeros_like(p) for p in enc_params]
    if train_base and bool(emb_acc.abs().sum() > 0):
        enc_grads = list(torch.autograd.grad(emb, enc_params, grad_outputs=emb_acc, allow_unused=True))
    policy_grads = Gradients({}, 1)
    names = dict((id(p), name) for name, p in policy.named_parameters())
    for p, g in zip(enc_params + dec_params, enc_grads + dec_acc):
        policy_grads.tensors[names[id(p)]] = torch.zeros_like(p) if g is None else g.detach()
    mem_grads = named_grads(memory_net, mem_acc)
    bi = int(best.max(1).values.argmax())
    stats = EpisodeStats(
        mean_cost=costs_sum / norm, best_of_budget=float(-best.max(1).values.mean()),
        mean_advantage=adv_total / norm, zero_advantage_fraction=zero_count / norm,
        first_returns=first, best_returns=best, advantage_sums=adv_sum,
        advantages=torch.stack(adv_history),
        best_trajectory=(batch.ids[bi], float(best.max(1).values[bi])), loss=loss_total)
    return policy_grads, mem_grads, stats, kept


def replay_episode_loss(policy: Policy, memory_net: MemoryNet, batch: InstanceBatch, kept) -> torch.Tensor:
    """The episode loss recomputed from recorded attempts, differentiable in all parameters.

    Memory contents are data, so they are replayed verbatim; only the network
    outputs depend on the parameters.
    """
    emb = policy.encode(batch)
    total = torch.zeros((), dtype=emb.dtype)
    for rec in kept:
        bi = rec.rows[:, 0]
        logps = replay_logps(policy, batch.select(bi.tolist()), rec.trajs, embeddings=emb[bi],
                             corrections=replay_corrections(rec.records, memory_net, batch.n))
        total = total - (rec.coef * logps.sum(-1)[:, 0]).sum()
    return total


def memento_loss_grad(policy, memory_net, batch, config: TrainConfig, key=(0, TRAIN_SALT)):
    """Gradients of the budgeted loss on one instance batch."""
    if not isinstance(batch, InstanceBatch):
        batch = InstanceBatch.from_instances(batch)
    pg, mg, stats, _ = run_episode(policy, memory_net, batch, config, key)
    return pg, mg, stats


# ------------------------------------------------------------------ loops

LOG_COLUMNS = ("step", "mean_cost", "best_of_K", "grad_norm", "val_best", "wall_ms")


def _training_batch(config, step, acc, salt):
    seed = int(rng.stream(config.seed, salt, step, acc).integers(0, 2 ** 63))
    return InstanceBatch.from_instances(generate_dataset(config.kind, config.n, config.batch_size, seed).instances)


def train(config: TrainConfig, policy: Policy, memory_net: MemoryNet | None = None, log_path=None,
          checkpoint_fn=None, validation=None, timing: bool = True):
    """Train the memory net (and, unless refining, the base policy) in place.

    ``validation`` is an optional callable ``(policy, memory_net) -> float``
    run every ``val_every`` steps. ``checkpoint_fn(step, policy, memory_net)``
    is called every ``checkpoint_every`` steps. Returns the log rows.
    """
    if Kind.parse(config.kind) is not policy.kind:
        raise ValidationError("config kind does not match the checkpoint")
    if memory_net is None:
        memory_net = MemoryNet(config.features, hidden=config.hidden, seed=config.seed)
    opt = make_optimizer(policy, memory_net, config)
    params = dict(policy.named_parameters())
    params.update({f"memory/{k}": v for k, v in memory_net.named_parameters()})
    rows = []
    for step in range(config.steps):
        t0 = time.perf_counter()
        pg_total, mg_total = Gradients(), Gradients()
        costs, bests = [], []
        for acc in range(config.accumulation):
            batch = _training_batch(config, step, acc, TRAIN_SALT)
            pg, mg, stats, _ = run_episode(policy, memory_net, batch, config,
                                           (int(rng.stream(config.seed, TRAIN_SALT, step, acc).integers(0, 2 ** 63)),
                                            TRAIN_SALT))
            pg_total.add(pg)
            mg_total.add(mg)
            costs.append(stats.mean_cost)
            bests.append(stats.best_of_budget)
        pg_total.scale(1.0 / config.accumulation)
        mg_total.scale(1.0 / config.accumulation)
        grads = {}
        if config.train_base:
            grads.update(pg_total.tensors)
        grads.update({f"memory/{k}": v for k, v in mg_total.tensors.items()})
        grad_norm = math.sqrt(pg_total.norm() ** 2 * config.train_base + mg_total.norm() ** 2)
        if not math.isfinite(grad_norm):
            raise DivergenceError("non-finite gradient norm", {"step": step})
        optimizer_step(opt, params, grads)
        bad = [k for k, v in params.items() if not torch.isfinite(v).all()]
        if bad:
            raise DivergenceError("non-finite parameters after the update", {"step": step, "parameters": bad[:5]})
        val = ""
        if validation is not None and config.val_every and (step + 1) % config.val_every == 0:
            val = repr(float(validation(policy, memory_net)))
        wall = (time.perf_counter() - t0) * 1000.0 if timing else 0.0
        row = {"step": step, "mean_cost": float(np.mean(costs)), "best_of_K": float(np.mean(bests)),
               "grad_norm": grad_norm, "val_best": val, "wall_ms": wall}
        rows.append(row)
        log.info("train step %d cost %.4f best %.4f |g| %.3g %s", step, row["mean_cost"],
                 row["best_of_K"], grad_norm, val)
        if log_path is not None:
            write_log(log_path, rows)
        if checkpoint_fn is not None and config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
            checkpoint_fn(step + 1, policy, memory_net)
    return memory_net, rows


def pretrain(config: PretrainConfig, policy_config: PolicyConfig | None = None, log_path=None,
             timing: bool = True, policy: Policy | None = None):
    """One-shot REINFORCE with the multi-start shared baseline.

    The baseline of each rollout is the mean return over the starting points
    of the same instance.
    """
    if policy is None:
        policy_config = policy_config or PolicyConfig(kind=config.kind)
        policy = Policy(policy_config, seed=config.seed)
    opt = torch.optim.Adam(policy.parameters(), lr=config.lr)
    starts = default_starts(Kind.parse(config.kind), config.n, config.starts)
    H = horizon(Kind.parse(config.kind), config.n)
    rows = []
    for step in range(config.steps):
        t0 = time.perf_counter()
        batch = _training_batch(config, step, 0, PRETRAIN_SALT)
        u = rng.attempt_uniforms(config.seed, batch.ids, step, len(starts), H, salt=PRETRAIN_SALT)
        trajs = rollout(policy, batch, starts, 1.0, u)
        rets = trajs.returns.to(policy.dtype)
        adv = rets - rets.mean(1, keepdim=True)
        loss = -(adv * trajs.logp_sum()).mean()
        if not torch.isfinite(loss):
            raise DivergenceError("non-finite pretraining loss", {"step": step})
        opt.zero_grad()
        loss.backward()
        grad_norm = float(torch.nn.utils.clip_grad_norm_(policy.parameters(), 1e9))
        opt.step()
        wall = (time.perf_counter() - t0) * 1000.0 if timing else 0.0
        rows.append({"step": step, "mean_cost": float(trajs.costs.mean()),
                     "best_of_K": float(trajs.costs.min(1).values.mean()), "grad_norm": grad_norm,
                     "val_best": "", "wall_ms": wall})
        if step % 100 == 0:
            log.info("pretrain step %d mean cost %.4f", step, rows[-1]["mean_cost"])
        if log_path is not None and (step % 50 == 0 or step == config.steps - 1):
            write_log(log_path, rows)
    return policy, rows


def write_log(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in rows:
            w.writerow([r["step"], repr(float(r["mean_cost"])), repr(float(r["best_of_K"])),
                        repr(float(r["grad_norm"])), r["val_best"], f"{r['wall_ms']:.3f}"])
