"""Attention encoder / pointer decoder construction policy.

A reduced POMO-style model: node embeddings from a few self-attention
blocks, then a single glimpse + pointer layer per decoding step. Logits are
clipped with ``clip * tanh`` and infeasible actions get ``MASKED_LOGIT``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .env import (MASKED_LOGIT, InstanceBatch, State, Trajectories, feasible_mask, horizon,
                  reset, step)
from .errors import ContractError, DivergenceError, ValidationError
from .instances import Kind

# Corrections this large would swamp the feasibility mask; treat them as divergence.
MAX_CORRECTION = 1e6


@dataclass
class PolicyConfig:
    kind: str = "TSP"
    embed_dim: int = 64
    n_layers: int = 2
    n_heads: int = 4
    ff_dim: int = 128
    clip: float = 10.0

    def __post_init__(self):
        self.kind = Kind.parse(self.kind).value
        if self.embed_dim % self.n_heads:
            raise ValidationError("embed_dim must be divisible by n_heads")

    def to_dict(self):
        return asdict(self)


def _split_heads(x, heads):
    # (batch, m, d) -> (batch, heads, m, d/heads)
    b, m, d = x.shape
    return x.reshape(b, m, heads, d // heads).transpose(1, 2)


def _merge_heads(x):
    b, h, m, dk = x.shape
    return x.transpose(1, 2).reshape(b, m, h * dk)


class EncoderLayer(nn.Module):
    def __init__(self, d, heads, ff):
        super().__init__()
        self.heads = heads
        self.wq = nn.Linear(d, d, bias=False)
        self.wk = nn.Linear(d, d, bias=False)
        self.wv = nn.Linear(d, d, bias=False)
        self.wo = nn.Linear(d, d)
        self.norm1 = nn.LayerNorm(d)
        self.ff = nn.Sequential(nn.Linear(d, ff), nn.ReLU(), nn.Linear(ff, d))
        self.norm2 = nn.LayerNorm(d)

    def forward(self, h):
        q = _split_heads(self.wq(h), self.heads)
        k = _split_heads(self.wk(h), self.heads)
        v = _split_heads(self.wv(h), self.heads)
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1]), dim=-1)
        h = self.norm1(h + self.wo(_merge_heads(att @ v)))
        return self.norm2(h + self.ff(h))


@dataclass
class DecoderCache:
    embeddings: torch.Tensor  # (batch, n, d)
    glimpse_k: torch.Tensor  # (batch, heads, n, dk)
    glimpse_v: torch.Tensor  # (batch, heads, n, dk)
    graph_q: torch.Tensor  # (batch, d)


class Policy(nn.Module):
    def __init__(self, config: PolicyConfig | None = None, seed: int = 0):
        super().__init__()
        self.config = config = config or PolicyConfig()
        d = config.embed_dim
        self.kind = Kind.parse(config.kind)
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(seed)
        try:
            if self.kind is Kind.TSP:
                self.embed = nn.Linear(2, d)
            else:
                self.embed_depot = nn.Linear(2, d)
                self.embed = nn.Linear(3, d)
            self.layers = nn.ModuleList(
                EncoderLayer(d, config.n_heads, config.ff_dim) for _ in range(config.n_layers))
            self.wq_first = nn.Linear(d, d, bias=False)
            self.wq_last = nn.Linear(d, d, bias=False)
            self.wq_graph = nn.Linear(d, d, bias=False)
            if self.kind is Kind.CVRP:
                self.wq_load = nn.Linear(1, d, bias=False)
            self.wk_glimpse = nn.Linear(d, d, bias=False)
            self.wv_glimpse = nn.Linear(d, d, bias=False)
            self.wo_glimpse = nn.Linear(d, d, bias=False)
        finally:
            torch.random.set_rng_state(gen_state)

    # parameter groups for the optimizer
    def encoder_parameters(self):
        return [p for name, p in self.named_parameters() if name.startswith(("embed", "layers"))]

    def decoder_parameters(self):
        return [p for name, p in self.named_parameters() if not name.startswith(("embed", "layers"))]

    @property
    def dtype(self):
        return self.wq_first.weight.dtype

    def encode(self, batch: InstanceBatch) -> torch.Tensor:
        """Node embeddings, shape (batch, n, d)."""
        if batch.kind is not self.kind:
            raise ValidationError(f"policy is for {self.kind.value}, got {batch.kind.value} instances")
        coords = batch.coords.to(self.dtype)
        if self.kind is Kind.TSP:
            h = self.embed(coords)
        else:
            load = (batch.demands.to(self.dtype) / batch.capacity[:, None].to(self.dtype))[:, 1:, None]
            h = torch.cat([self.embed_depot(coords[:, :1]),
                           self.embed(torch.cat([coords[:, 1:], load], dim=-1))], dim=1)
        for layer in self.layers:
            h = layer(h)
        return h

    def precompute(self, embeddings: torch.Tensor) -> DecoderCache:
        heads = self.config.n_heads
        return DecoderCache(
            embeddings,
            _split_heads(self.wk_glimpse(embeddings), heads),
            _split_heads(self.wv_glimpse(embeddings), heads),
            self.wq_graph(embeddings.mean(1)))

    def step_logits(self, cache: DecoderCache, state: State, mask: torch.Tensor) -> torch.Tensor:
        """Base logits for every rollout, shape (batch, pomo, n); masked at MASKED_LOGIT."""
        h = cache.embeddings
        b, p = state.shape
        d = h.shape[-1]
        first = state.start if self.kind is Kind.TSP else torch.zeros_like(state.start)
        h_first = h.gather(1, first[:, :, None].expand(b, p, d))
        h_last = h.gather(1, state.position[:, :, None].expand(b, p, d))
        q = self.wq_first(h_first) + self.wq_last(h_last) + cache.graph_q[:, None, :]
        if self.kind is Kind.CVRP:
            load = state.remaining.to(h.dtype) / state.instances.capacity[:, None].to(h.dtype)
            q = q + self.wq_load(load[:, :, None])
        qh = _split_heads(q, self.config.n_heads)
        score = qh @ cache.glimpse_k.transpose(-1, -2) / math.sqrt(qh.shape[-1])
        score = score.masked_fill(~mask[:, None, :, :], MASKED_LOGIT)
        glimpse = self.wo_glimpse(_merge_heads(torch.softmax(score, dim=-1) @ cache.glimpse_v))
        compat = glimpse @ h.transpose(-1, -2) / math.sqrt(d)
        logits = self.config.clip * torch.tanh(compat)
        return logits.masked_fill(~mask, MASKED_LOGIT)

    def logits(self, state: State, embeddings: torch.Tensor) -> torch.Tensor:
        if bool(state.done.all()):
            raise ContractError("logits requested for a terminal state")
        return self.step_logits(self.precompute(embeddings), state, feasible_mask(state))


def sample_action(logits: torch.Tensor, temperature: float, uniforms=None):
    """Draw actions from ``softmax(logits / temperature)``.

    ``uniforms`` has the leading shape of ``logits`` without the action axis
    and drives inverse-CDF sampling. ``temperature == 0`` selects greedy
    decoding (argmax, lowest index wins ties) and reports the log-probability
    under the untempered distribution. Returns ``(action, logp)``.
    """
    if temperature < 0:
        raise ValidationError("temperature must be positive (0 selects greedy)")
    if not bool(torch.isfinite(logits).all()):
        raise DivergenceError("non-finite logits")
    if bool((logits <= MASKED_LOGIT / 2).all(-1).any()):
        raise ContractError("all actions are masked")
    if temperature == 0:
        logprobs = torch.log_softmax(logits, dim=-1)
        action = torch.argmax(logits, dim=-1)
    else:
        logprobs = torch.log_softmax(logits / temperature, dim=-1)
        if uniforms is None:
            raise ValidationError("stochastic sampling needs uniforms")
        u = torch.as_tensor(uniforms, dtype=torch.float64)
        cdf = logprobs.detach().double().exp().cumsum(-1)
        x = u * cdf[..., -1]
        action = (cdf <= x[..., None]).sum(-1).clamp_max(logits.shape[-1] - 1)
    logp = logprobs.gather(-1, action[..., None])[..., 0]
    return action, logp


def rollout(policy: Policy, instances, start_points=None, temperature: float = 1.0,
            uniforms=None, memory_hook=None, embeddings=None, attempt_index: int = 0) -> Trajectories:
    """Construct one solution per (instance, starting point).

    ``uniforms`` is an array (batch, pomo, horizon) of draws in [0, 1). With a
    ``memory_hook`` the sampling logits are ``l + l_M``, where ``l_M`` is what
    the hook returns for the current state. Gradients flow into the returned
    log-probabilities when grad mode is on.
    """
    batch = instances if isinstance(instances, InstanceBatch) else InstanceBatch.from_instances(instances)
    state = reset(batch, start_points)
    if embeddings is None:
        embeddings = policy.encode(batch)
    cache = policy.precompute(embeddings)
    H = horizon(batch.kind, batch.n)
    if uniforms is not None:
        uniforms = torch.as_tensor(uniforms, dtype=torch.float64)
        if tuple(uniforms.shape[:2]) != state.shape or uniforms.shape[2] < H:
            raise ValidationError(f"uniforms must have shape {state.shape + (H,)}")
    actions, nodes, valid, logps, mem_logits = [], [], [], [], []
    for t in range(H):
        if bool(state.done.all()):
            break
        mask = feasible_mask(state)
        logits = policy.step_logits(cache, state, mask)
        if memory_hook is not None:
            correction = memory_hook(state)
            if not bool((correction.detach().abs() < MAX_CORRECTION).all()):
                raise DivergenceError("memory correction logits out of range", {"step": t})
            logits = (logits + correction).masked_fill(~mask, MASKED_LOGIT)
        action, logp = sample_action(logits, temperature, None if uniforms is None else uniforms[:, :, t])
        if memory_hook is not None:
            mem_logits.append(correction.detach().gather(2, action[:, :, None])[:, :, 0])
        else:
            mem_logits.append(torch.zeros(state.shape, dtype=logp.dtype))
        live = ~state.done
        nodes.append(state.position)
        valid.append(live)
        actions.append(action)
        logps.append(torch.where(live, logp, torch.zeros_like(logp)))
        state, _ = step(state, action)
    if not bool(state.done.all()):
        raise ContractError("rollout did not terminate within the horizon")
    return Trajectories(
        kind=batch.kind, ids=batch.ids, start=state.start,
        actions=torch.stack(actions, 2), nodes=torch.stack(nodes, 2), valid=torch.stack(valid, 2),
        logps=torch.stack(logps, 2), memory_logits=torch.stack(mem_logits, 2),
        returns=-state.length, route_log=state.route_log, attempt_index=attempt_index)


def replay_logps(policy: Policy, instances, trajs: Trajectories, embeddings=None,
                 corrections=None, temperature: float = 1.0) -> torch.Tensor:
    """Teacher-forced log-probabilities of recorded actions, shape (batch, pomo, T).

    ``corrections`` is an optional callable ``(t, state) -> l_M`` replaying the
    memory's correction logits at step ``t``.
    """
    batch = instances if isinstance(instances, InstanceBatch) else InstanceBatch.from_instances(instances)
    state = reset(batch, trajs.start)
    if embeddings is None:
        embeddings = policy.encode(batch)
    cache = policy.precompute(embeddings)
    temperature = temperature or 1.0
    out = []
    for t in range(trajs.actions.shape[2]):
        mask = feasible_mask(state)
        logits = policy.step_logits(cache, state, mask)
        if corrections is not None:
            logits = (logits + corrections(t, state)).masked_fill(~mask, MASKED_LOGIT)
        logprobs = torch.log_softmax(logits / temperature, dim=-1)
        action = trajs.actions[:, :, t]
        out.append(logprobs.gather(2, action[:, :, None])[:, :, 0] * trajs.valid[:, :, t])
        state, _ = step(state, action)
    return torch.stack(out, 2)


@dataclass
class Gradients:
    """Named gradient tensors congruent with a module's parameters."""
    tensors: dict = field(default_factory=dict)
    count: int = 0

    def add(self, other: "Gradients") -> "Gradients":
        for name, g in other.tensors.items():
            if name in self.tensors:
                self.tensors[name] = self.tensors[name] + g
            else:
                self.tensors[name] = g.clone()
        self.count += other.count
        return self

    def scale(self, factor: float) -> "Gradients":
        self.tensors = {k: v * factor for k, v in self.tensors.items()}
        return self

    def norm(self) -> float:
        return float(math.sqrt(sum(float((g.double() ** 2).sum()) for g in self.tensors.values())))

    def flat(self) -> np.ndarray:
        return np.concatenate([g.detach().double().reshape(-1).numpy() for _, g in sorted(self.tensors.items())])


def named_grads(module: nn.Module, grads, prefix: str = "") -> Gradients:
    names = [name for name, _ in module.named_parameters()]
    out = {}
    for name, p, g in zip(names, module.parameters(), grads):
        out[prefix + name] = torch.zeros_like(p) if g is None else g.detach()
    return Gradients(out, 1)


def weighted_logp_grad(policy: Policy, instances, trajs: Trajectories, weights) -> Gradients:
    """Exact gradient of ``sum_k w_k * sum_t log pi(a_t | s_t)`` w.r.t. policy parameters."""
    weights = torch.as_tensor(weights, dtype=policy.dtype)
    if tuple(weights.shape) != trajs.shape:
        raise ValidationError(f"weights shape {tuple(weights.shape)} != trajectories {trajs.shape}")
    params = list(policy.parameters())
    with torch.enable_grad():
        logps = replay_logps(policy, instances, trajs)
        objective = (weights * logps.sum(-1)).sum()
        grads = torch.autograd.grad(objective, params, allow_unused=True)
    return named_grads(policy, grads)
