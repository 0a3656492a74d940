"""Per-node episodic memory and the learned correction-logit rule.

Each (instance, starting point, node) owns a FIFO ring buffer of past
transitions taken while standing on that node. When the agent is back on
the node, the buffer is read, turned into normalised feature rows, scored by
a small MLP, and the scores are summed per action into correction logits
that are added to the base policy's logits.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .env import Trajectories
from .errors import ContractError, ValidationError
from .policy import Gradients, named_grads

# stored per entry, in this order; the action index is kept separately
STORED = ("action_logp", "ret", "budget_at_write", "memory_logit_at_write", "traj_logp", "tail_logp")
FEATURES = STORED + ("remaining_budget",)
RET_COL = 1

SUBSETS = {
    "A": ("action_logp", "ret"),
    "B": ("action_logp", "ret", "remaining_budget"),
    "C": ("action_logp", "ret", "budget_at_write", "remaining_budget"),
    "D": FEATURES,
}
DEFAULT_CAPACITY = 40


def subset_columns(subset: str) -> list[int]:
    try:
        names = SUBSETS[subset]
    except KeyError:
        raise ValidationError(f"unknown feature subset {subset!r}; expected one of {sorted(SUBSETS)}") from None
    return [FEATURES.index(name) for name in names]


@dataclass(frozen=True)
class MemoryEntry:
    action: int
    action_logp: float
    ret: float
    budget_at_write: float
    memory_logit_at_write: float
    traj_logp: float
    tail_logp: float

    def stored(self):
        return [getattr(self, name) for name in STORED]


class MemoryNet(nn.Module):
    """Two hidden GELU layers of width 8 mapping a feature row to a scalar weight."""

    def __init__(self, subset: str = "D", hidden: int = 8, n_layers: int = 2, seed: int = 0,
                 final_init: float = 1e-3):
        super().__init__()
        self.subset = subset
        self.columns = subset_columns(subset)
        self.in_dim = len(self.columns)
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(seed)
        try:
            dims = [self.in_dim] + [hidden] * n_layers
            layers = []
            for a, b in zip(dims[:-1], dims[1:]):
                layers += [nn.Linear(a, b), nn.GELU()]
            self.hidden = nn.Sequential(*layers)
            self.out = nn.Linear(dims[-1], 1)
            nn.init.uniform_(self.out.weight, -final_init, final_init)
            nn.init.uniform_(self.out.bias, -final_init, final_init)
        finally:
            torch.random.set_rng_state(gen_state)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        if features.shape[-1] != self.in_dim:
            raise ValidationError(f"memory net expects {self.in_dim} features, got {features.shape[-1]}")
        return self.out(self.hidden(features))[..., 0]

    def zero_(self) -> "MemoryNet":
        """Make the net output exactly 0 everywhere."""
        with torch.no_grad():
            self.out.weight.zero_()
            self.out.bias.zero_()
        return self

    def param_versions(self):
        return tuple(p._version for p in self.parameters())


class Memory:
    """Ring buffers indexed by (instance, starting point, node).

    With ``shared=True`` every starting point of an instance writes to and
    reads from the same per-node buffers.
    """

    def __init__(self, batch: int, starts, n_nodes: int, capacity: int = DEFAULT_CAPACITY,
                 shared: bool = False, dtype=torch.float32):
        if capacity < 1:
            raise ValidationError("memory capacity must be >= 1")
        starts = torch.as_tensor(starts, dtype=torch.long)
        if starts.dim() == 1:
            starts = starts[None, :].expand(batch, -1)
        self.starts = starts.clone()
        self.n_starts = starts.shape[1]
        self.n_nodes = n_nodes
        self.capacity = capacity
        self.shared = shared
        cols = 1 if shared else self.n_starts
        self.actions = torch.zeros(batch, cols, n_nodes, capacity, dtype=torch.long)
        self.data = torch.zeros(batch, cols, n_nodes, capacity, len(STORED), dtype=dtype)
        self.count = torch.zeros(batch, cols, n_nodes, dtype=torch.long)
        self.cursor = torch.zeros(batch, cols, n_nodes, dtype=torch.long)
        self.attempts = 0

    @property
    def batch(self) -> int:
        return self.actions.shape[0]

    def _column(self, instance: int, start_point: int) -> int:
        if not 0 <= instance < self.batch:
            raise ValidationError(f"instance index {instance} out of range")
        matches = (self.starts[instance] == start_point).nonzero()
        if len(matches) == 0:
            raise ValidationError(f"unknown starting point {start_point}")
        return 0 if self.shared else int(matches[0, 0])

    def retrieve(self, start_point: int, node: int, instance: int = 0) -> list[MemoryEntry]:
        """Entries of one slot, oldest first."""
        col = self._column(instance, start_point)
        if not 0 <= node < self.n_nodes:
            raise ValidationError(f"node {node} out of range")
        k = int(self.count[instance, col, node])
        cur = int(self.cursor[instance, col, node])
        order = range(k) if k < self.capacity else [(cur + j) % self.capacity for j in range(k)]
        acts = self.actions[instance, col, node]
        data = self.data[instance, col, node]
        return [MemoryEntry(int(acts[j]), *[float(x) for x in data[j]]) for j in order]

    def size(self) -> int:
        return int(self.count.sum())

    def slot_view(self, position: torch.Tensor):
        """Gather the slots of the current nodes. position: (batch, pomo).

        Returns actions (batch, pomo, E), stored data (batch, pomo, E, 6) and a
        validity mask (batch, pomo, E).
        """
        b, p = position.shape
        cols = torch.zeros_like(position) if self.shared else torch.arange(p)[None, :].expand(b, p)
        bi = torch.arange(b)[:, None].expand(b, p)
        acts = self.actions[bi, cols, position]
        data = self.data[bi, cols, position]
        valid = torch.arange(self.capacity)[None, None, :] < self.count[bi, cols, position][:, :, None]
        return acts, data, valid

    def write_entries(self, instance: int, start_point: int, node: int, entries) -> None:
        col = self._column(instance, start_point)
        for e in entries:
            self._push(torch.tensor([instance]), torch.tensor([col]), torch.tensor([node]),
                       torch.tensor([e.action]), torch.tensor([e.stored()], dtype=self.data.dtype))

    def _push(self, bi, ci, node, action, values):
        cur = self.cursor[bi, ci, node]
        self.actions[bi, ci, node, cur] = action
        self.data[bi, ci, node, cur] = values
        self.cursor[bi, ci, node] = (cur + 1) % self.capacity
        self.count[bi, ci, node] = (self.count[bi, ci, node] + 1).clamp_max(self.capacity)

    def write(self, trajs: Trajectories, attempt_index: int, total_budget: int) -> None:
        """Append every transition of a finished attempt to its node's slot."""
        if not 0 <= attempt_index < total_budget:
            raise ValidationError("attempt_index must lie in [0, total_budget)")
        if trajs.actions.shape[:2] != (self.batch, self.n_starts):
            raise ValidationError("trajectory batch does not match the memory layout")
        logps = (trajs.logps.detach() * trajs.valid).to(self.data.dtype)
        tail = logps.flip(-1).cumsum(-1).flip(-1)
        traj = tail[:, :, 0]
        rets = trajs.returns.to(self.data.dtype)
        budget = attempt_index / total_budget
        b, p, T = trajs.actions.shape
        bi_all = torch.arange(b)[:, None].expand(b, p)
        ci_all = torch.zeros(b, p, dtype=torch.long) if self.shared else torch.arange(p)[None, :].expand(b, p)
        for t in range(T):
            live = trajs.valid[:, :, t]
            values = torch.stack([
                logps[:, :, t], rets, torch.full_like(rets, budget),
                trajs.memory_logits[:, :, t].detach().to(self.data.dtype), traj, tail[:, :, t]], dim=-1)
            if self.shared:
                # all starts hit the same slots: serialise in start order
                for j in range(p):
                    sel = live[:, j]
                    self._push(bi_all[:, j][sel], ci_all[:, j][sel], trajs.nodes[:, j, t][sel],
                               trajs.actions[:, j, t][sel], values[:, j][sel])
            else:
                self._push(bi_all[live], ci_all[live], trajs.nodes[:, :, t][live],
                           trajs.actions[:, :, t][live], values[live])
        self.attempts += 1

    def state_tensors(self) -> dict:
        return {"starts": self.starts, "actions": self.actions, "data": self.data,
                "count": self.count, "cursor": self.cursor,
                "attempts": torch.tensor([self.attempts])}

    @classmethod
    def from_tensors(cls, tensors: dict, shared: bool = False) -> "Memory":
        mem = cls.__new__(cls)
        mem.starts = tensors["starts"].clone()
        mem.n_starts = mem.starts.shape[1]
        mem.actions = tensors["actions"].clone()
        mem.data = tensors["data"].clone()
        mem.count = tensors["count"].clone()
        mem.cursor = tensors["cursor"].clone()
        mem.n_nodes = mem.actions.shape[2]
        mem.capacity = mem.actions.shape[3]
        mem.shared = shared
        mem.attempts = int(tensors["attempts"][0])
        return mem


def write_trajectory(memory: Memory, trajs: Trajectories, attempt_index: int, total_budget: int) -> None:
    memory.write(trajs, attempt_index, total_budget)


def normalise(data: torch.Tensor, valid: torch.Tensor, remaining_budget) -> torch.Tensor:
    """Stored data (..., E, 6) -> feature rows (..., E, 7).

    The return column is z-scored over the valid entries of each slot (all
    zeros when its variance vanishes); log-probability and budget columns pass
    through unchanged; the remaining budget is appended to every row.
    """
    validf = valid.to(data.dtype)
    k = validf.sum(-1, keepdim=True).clamp_min(1.0)
    ret = data[..., RET_COL]
    mean = (ret * validf).sum(-1, keepdim=True) / k
    centred = (ret - mean) * validf
    var = (centred ** 2).sum(-1, keepdim=True) / k
    z = torch.where(var > 1e-20, centred / var.clamp_min(1e-20).sqrt(), torch.zeros_like(centred))
    feats = torch.cat([data[..., :RET_COL], z[..., None], data[..., RET_COL + 1:]], dim=-1)
    rb = torch.as_tensor(remaining_budget, dtype=data.dtype)
    rb = rb.reshape(rb.shape + (1,) * (feats.dim() - 1 - rb.dim())).expand(feats.shape[:-1])
    return torch.cat([feats, rb[..., None]], dim=-1) * validf[..., None]


def build_features(entries, remaining_budget: float, dtype=torch.float64):
    """Retrieved entries -> (actions (k,), features (k, 7))."""
    if len(entries) == 0:
        raise ContractError("build_features needs at least one entry")
    if not 0.0 <= remaining_budget <= 1.0:
        raise ValidationError("remaining_budget must be a fraction in [0, 1]")
    actions = torch.tensor([e.action for e in entries], dtype=torch.long)
    data = torch.tensor([e.stored() for e in entries], dtype=dtype)
    feats = normalise(data, torch.ones(len(entries), dtype=torch.bool), remaining_budget)
    return actions, feats


def score_rows(net, features: torch.Tensor) -> torch.Tensor:
    """Apply a memory net, or any callable on full 7-column rows, to feature rows."""
    cols = getattr(net, "columns", None)
    x = features if cols is None else features[..., cols]
    if isinstance(net, nn.Module):
        x = x.to(next(net.parameters()).dtype)
    return net(x).to(features.dtype)


def correction_logits(actions: torch.Tensor, features: torch.Tensor, memory_net: MemoryNet,
                      n_actions: int, valid: torch.Tensor | None = None) -> torch.Tensor:
    """``l_M[j] = sum of H(features row)`` over entries whose action is ``j``.

    Features carry all 7 columns; the net picks its own subset. Works on a
    single slot (k,) or on batched slots (..., E) with a ``valid`` mask.
    """
    if actions.numel() and (int(actions.max()) >= n_actions or int(actions.min()) < 0):
        raise ValidationError("action index out of range")
    out = torch.zeros(actions.shape[:-1] + (n_actions,), dtype=features.dtype)
    if actions.shape[-1] == 0 or (valid is not None and not bool(valid.any())):
        return out
    w = score_rows(memory_net, features)
    if valid is not None:
        w = w * valid
    return out.scatter_add(-1, actions, w)


@dataclass
class RetrievalRecord:
    """What the memory net saw at one decoding step."""
    actions: torch.Tensor  # (batch, pomo, E)
    features: torch.Tensor  # (batch, pomo, E, 7)
    valid: torch.Tensor  # (batch, pomo, E)
    versions: tuple = ()

    def select(self, bi, pi) -> "RetrievalRecord":
        return RetrievalRecord(self.actions[bi, pi][:, None], self.features[bi, pi][:, None],
                               self.valid[bi, pi][:, None], self.versions)


class MemoryHook:
    """Callable handed to ``rollout``: state -> correction logits (batch, pomo, n)."""

    def __init__(self, memory: Memory, net: MemoryNet, remaining_budget, records: list | None = None):
        self.memory = memory
        self.net = net
        self.remaining_budget = remaining_budget
        self.records = records

    def __call__(self, state):
        acts, data, valid = self.memory.slot_view(state.position)
        feats = normalise(data, valid, self.remaining_budget)
        if self.records is not None:
            self.records.append(RetrievalRecord(acts, feats, valid, self.net.param_versions()))
        return correction_logits(acts, feats, self.net, self.memory.n_nodes, valid)


def replay_corrections(records, net: MemoryNet, n_actions: int):
    """Corrections callable for ``policy.replay_logps`` built from recorded retrievals."""
    def corrections(t, state):
        rec = records[t]
        return correction_logits(rec.actions, rec.features, net, n_actions, rec.valid)
    return corrections


def memory_net_grad(records, upstream, net: MemoryNet, n_actions: int) -> Gradients:
    """Gradient for the memory net given upstream gradients on the correction logits.

    ``upstream[t]`` holds dLoss/dl_M at step ``t``, shaped like the correction
    logits. Records taken under different parameter values are rejected.
    """
    if len(records) != len(upstream):
        raise ValidationError("one upstream gradient per record is required")
    now = net.param_versions()
    if any(rec.versions and rec.versions != now for rec in records):
        raise ContractError("stale retrieval records: memory net parameters changed since capture")
    params = list(net.parameters())
    with torch.enable_grad():
        total = sum((correction_logits(rec.actions, rec.features, net, n_actions, rec.valid)
                     * torch.as_tensor(g, dtype=rec.features.dtype)).sum()
                    for rec, g in zip(records, upstream))
        if not torch.is_tensor(total) or not total.requires_grad:
            return named_grads(net, [None] * len(params))
        grads = torch.autograd.grad(total, params, allow_unused=True)
    return named_grads(net, grads)


def entries_to_array(entries) -> np.ndarray:
    return np.array([[e.action] + e.stored() for e in entries], dtype=np.float64)
