"""Construction MDP for TSP and CVRP, batched over (instances, starting points).

States are immutable values: ``step`` returns a new state. Every tensor of a
state has leading shape (batch, pomo) where batch indexes instances and pomo
indexes starting points.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import torch

from .errors import ContractError, ValidationError
from .instances import Instance, Kind, solution_cost

MASKED_LOGIT = -1e9


@dataclass(frozen=True)
class InstanceBatch:
    kind: Kind
    coords: torch.Tensor  # (batch, n, 2) float64
    dist: torch.Tensor  # (batch, n, n) float64
    demands: torch.Tensor | None = None  # (batch, n) long
    capacity: torch.Tensor | None = None  # (batch,) long
    ids: tuple = ()

    @classmethod
    def from_instances(cls, instances) -> "InstanceBatch":
        if isinstance(instances, Instance):
            instances = [instances]
        instances = list(instances)
        if not instances:
            raise ValidationError("empty instance batch")
        kind, n = instances[0].kind, instances[0].n
        if any(inst.kind is not kind or inst.n != n for inst in instances):
            raise ValidationError("all instances of a batch must share kind and size")
        coords = torch.from_numpy(np.stack([inst.coords for inst in instances]))
        dist = ((coords[:, :, None, :] - coords[:, None, :, :]) ** 2).sum(-1).sqrt()
        demands = capacity = None
        if kind is Kind.CVRP:
            demands = torch.from_numpy(np.stack([inst.demands for inst in instances]))
            capacity = torch.tensor([inst.capacity for inst in instances], dtype=torch.long)
        return cls(kind, coords, dist, demands, capacity, tuple(inst.id for inst in instances))

    @property
    def batch(self) -> int:
        return self.coords.shape[0]

    @property
    def n(self) -> int:
        return self.coords.shape[1]

    def select(self, idx) -> "InstanceBatch":
        idx = list(idx)
        t = torch.tensor(idx, dtype=torch.long)
        return InstanceBatch(
            self.kind, self.coords[t], self.dist[t],
            None if self.demands is None else self.demands[t],
            None if self.capacity is None else self.capacity[t],
            tuple(self.ids[i] for i in idx))


def max_starts(kind: Kind, n: int) -> int:
    return n if kind is Kind.TSP else n - 1


def horizon(kind: Kind, n: int) -> int:
    """Upper bound on the number of steps from reset to termination."""
    return n - 1 if kind is Kind.TSP else 2 * (n - 1)


def default_starts(kind: Kind, n: int, n_starts: int | None = None) -> list[int]:
    limit = max_starts(kind, n)
    n_starts = limit if n_starts is None else n_starts
    if not 1 <= n_starts <= limit:
        raise ValidationError(f"number of starting points must be in [1, {limit}], got {n_starts}")
    offset = 0 if kind is Kind.TSP else 1
    return list(range(offset, offset + n_starts))


@dataclass(frozen=True)
class State:
    instances: InstanceBatch
    start: torch.Tensor  # (batch, pomo) long
    visited: torch.Tensor  # (batch, pomo, n) bool
    position: torch.Tensor  # (batch, pomo) long
    step: int
    length: torch.Tensor  # (batch, pomo) float64, cost accumulated so far
    done: torch.Tensor  # (batch, pomo) bool
    remaining: torch.Tensor | None = None  # (batch, pomo) long, CVRP only
    route_log: torch.Tensor | None = None  # (batch, pomo, step) long

    @property
    def kind(self) -> Kind:
        return self.instances.kind

    @property
    def shape(self):
        return tuple(self.position.shape)


def reset(instances, start_points=None) -> State:
    """Fresh states for every (instance, starting point) pair.

    TSP: the agent stands on the starting node. CVRP: the agent stands on the
    depot and the starting point is the customer its first move is forced to.
    """
    batch = instances if isinstance(instances, InstanceBatch) else InstanceBatch.from_instances(instances)
    b, n = batch.batch, batch.n
    if start_points is None:
        start_points = default_starts(batch.kind, n)
    if isinstance(start_points, (int, np.integer)):
        start_points = [int(start_points)]
    start = torch.as_tensor(start_points, dtype=torch.long)
    if start.dim() == 1:
        start = start[None, :].expand(b, -1).clone()
    if start.dim() != 2 or start.shape[0] != b:
        raise ValidationError("start points must be a list or a (batch, pomo) tensor")
    low = 0 if batch.kind is Kind.TSP else 1
    if start.numel() == 0 or start.min() < low or start.max() >= n:
        raise ValidationError(f"start points must lie in [{low}, {n - 1}]")
    p = start.shape[1]
    visited = torch.zeros(b, p, n, dtype=torch.bool)
    if batch.kind is Kind.TSP:
        visited.scatter_(2, start[:, :, None], True)
        position = start.clone()
        remaining = None
    else:
        visited[:, :, 0] = True
        position = torch.zeros(b, p, dtype=torch.long)
        remaining = batch.capacity[:, None].expand(b, p).clone()
    return State(batch, start, visited, position, 0,
                 torch.zeros(b, p, dtype=torch.float64), torch.zeros(b, p, dtype=torch.bool),
                 remaining, position[:, :, None].clone())


def feasible_mask(state: State) -> torch.Tensor:
    """Action mask that also covers finished rollouts.

    A finished CVRP rollout may only take the depot (a padding no-op), so
    rollouts of unequal length can be stepped in lockstep.
    """
    if state.kind is Kind.TSP:
        return ~state.visited
    batch = state.instances
    n = batch.n
    if state.step == 0:
        return torch.nn.functional.one_hot(state.start, n).bool()
    demand_ok = batch.demands[:, None, :] <= state.remaining[:, :, None]
    mask = ~state.visited & demand_ok
    at_customer = state.position != 0
    mask[:, :, 0] = at_customer | ~mask[:, :, 1:].any(-1)
    mask[state.done] = False
    mask[:, :, 0] |= state.done
    return mask


def action_mask(state: State) -> torch.Tensor:
    """Feasible actions, shape (batch, pomo, n). Rejects terminal states."""
    if bool(state.done.any()):
        raise ContractError("action_mask called on a terminal state")
    return feasible_mask(state)


def step(state: State, action) -> tuple[State, torch.Tensor]:
    """Apply ``action`` (batch, pomo); returns the next state and its done flags."""
    action = torch.as_tensor(action, dtype=torch.long).reshape(state.shape)
    mask = feasible_mask(state)
    if not bool(mask.gather(2, action[:, :, None]).all()):
        raise ContractError("masked action chosen")
    if state.kind is Kind.TSP and bool(state.done.any()):
        raise ContractError("step called on a terminal state")
    batch = state.instances
    b_idx = torch.arange(state.shape[0])[:, None]
    leg = batch.dist[b_idx, state.position, action]
    visited = state.visited.clone()
    visited.scatter_(2, action[:, :, None], True)
    length = state.length + leg
    remaining = state.remaining
    if state.kind is Kind.TSP:
        done = visited.all(-1)
        length = length + torch.where(done, batch.dist[b_idx, action, state.start], 0.0)
    else:
        demand = batch.demands[b_idx, action]
        remaining = torch.where(action == 0, batch.capacity[:, None], state.remaining - demand)
        done = state.done | (visited.all(-1) & (action == 0))
    route_log = torch.cat([state.route_log, action[:, :, None]], dim=2)
    new = replace(state, visited=visited, position=action, step=state.step + 1, length=length,
                  done=done, remaining=remaining, route_log=route_log)
    return new, done


def decode_solution(kind: Kind, route_log) -> list[int]:
    """Turn one rollout's position log into a tour or a depot-delimited routing."""
    seq = [int(x) for x in route_log]
    if kind is Kind.TSP:
        return seq
    while len(seq) > 2 and seq[-1] == 0 and seq[-2] == 0:
        seq.pop()
    return seq


@dataclass
class Trajectory:
    """A single constructed solution."""
    instance_id: int
    start_point: int
    actions: list
    nodes: list  # position before each action
    action_logps: list
    memory_logits_taken: list
    ret: float
    attempt_index: int
    solution: list

    @property
    def cost(self) -> float:
        return -self.ret


@dataclass
class Trajectories:
    """A batch of rollouts, one per (instance, starting point); padded in time."""
    kind: Kind
    ids: tuple
    start: torch.Tensor  # (batch, pomo)
    actions: torch.Tensor  # (batch, pomo, T) long
    nodes: torch.Tensor  # (batch, pomo, T) long
    valid: torch.Tensor  # (batch, pomo, T) bool, False on padding steps
    logps: torch.Tensor  # (batch, pomo, T)
    memory_logits: torch.Tensor  # (batch, pomo, T)
    returns: torch.Tensor  # (batch, pomo) float64
    route_log: torch.Tensor  # (batch, pomo, T+1)
    attempt_index: int = 0

    @property
    def costs(self) -> torch.Tensor:
        return -self.returns

    @property
    def shape(self):
        return tuple(self.returns.shape)

    def logp_sum(self) -> torch.Tensor:
        return (self.logps * self.valid).sum(-1)

    def solution(self, i: int, p: int) -> list[int]:
        return decode_solution(self.kind, self.route_log[i, p].tolist())

    def get(self, i: int, p: int) -> Trajectory:
        keep = self.valid[i, p]
        return Trajectory(
            instance_id=self.ids[i], start_point=int(self.start[i, p]),
            actions=self.actions[i, p][keep].tolist(), nodes=self.nodes[i, p][keep].tolist(),
            action_logps=self.logps[i, p][keep].tolist(),
            memory_logits_taken=self.memory_logits[i, p][keep].tolist(),
            ret=float(self.returns[i, p]), attempt_index=self.attempt_index,
            solution=self.solution(i, p))


def check_feasible(instance: Instance, solution, ret: float | None = None, tol: float = 1e-9) -> float:
    """Validate a decoded solution; optionally check it against a return value."""
    cost = solution_cost(instance, solution)
    if ret is not None and abs(ret + cost) >= tol:
        raise ContractError(f"return {ret} inconsistent with solution cost {cost}")
    return cost
