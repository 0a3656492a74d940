"""Routing instances: generation, costing, exhaustive oracles and .dset files."""
from __future__ import annotations

import io
import itertools
import json
import math
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from . import rng
from .errors import (CapacityViolation, CustomerCoverageError, DelimiterError, FormatError,
                     SizeCapError, ValidationError)

DSET_MAGIC = b"MEMDSET\x00"
DSET_VERSION = 1

TSP_BRUTE_FORCE_CAP = 10
CVRP_BRUTE_FORCE_CAP = 8  # customers
MAX_DEMAND = 9


class Kind(str, Enum):
    TSP = "TSP"
    CVRP = "CVRP"

    @classmethod
    def parse(cls, value) -> "Kind":
        if isinstance(value, Kind):
            return value
        try:
            return cls(str(value).upper())
        except ValueError:
            raise ValidationError(f"unknown problem kind {value!r}") from None


def default_capacity(n_customers: int) -> int:
    return 30 if n_customers <= 50 else 50


@dataclass(frozen=True, eq=False)
class Instance:
    kind: Kind
    coords: np.ndarray  # (n, 2) float64
    demands: np.ndarray | None = None  # (n,) int64, demands[0] == 0 is the depot
    capacity: int | None = None
    id: int = 0

    def __post_init__(self):
        coords = np.ascontiguousarray(self.coords, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[1] != 2 or coords.shape[0] < 2:
            raise ValidationError(f"coords must have shape (n>=2, 2), got {coords.shape}")
        if not np.all((coords >= 0.0) & (coords <= 1.0)):
            raise ValidationError("coordinates must lie in the unit square")
        coords.setflags(write=False)
        object.__setattr__(self, "coords", coords)
        if self.kind is Kind.TSP:
            if self.demands is not None or self.capacity is not None:
                raise ValidationError("TSP instances carry no demands or capacity")
            return
        if self.demands is None or self.capacity is None:
            raise ValidationError("CVRP instances need demands and capacity")
        demands = np.ascontiguousarray(self.demands, dtype=np.int64)
        if demands.shape != (coords.shape[0],):
            raise ValidationError("demands must have one entry per node")
        if demands[0] != 0:
            raise ValidationError("depot demand must be 0")
        if self.capacity <= 0 or np.any(demands[1:] <= 0) or np.any(demands[1:] > self.capacity):
            raise ValidationError("customer demands must lie in (0, capacity]")
        demands.setflags(write=False)
        object.__setattr__(self, "demands", demands)
        object.__setattr__(self, "capacity", int(self.capacity))

    @property
    def n(self) -> int:
        return self.coords.shape[0]

    def distance_matrix(self) -> np.ndarray:
        diff = self.coords[:, None, :] - self.coords[None, :, :]
        return np.sqrt((diff ** 2).sum(-1))

    def __eq__(self, other):
        if not isinstance(other, Instance):
            return NotImplemented
        return (self.kind is other.kind and self.id == other.id
                and np.array_equal(self.coords, other.coords)
                and self.capacity == other.capacity
                and ((self.demands is None and other.demands is None)
                     or (self.demands is not None and other.demands is not None
                         and np.array_equal(self.demands, other.demands))))

    __hash__ = None


@dataclass(frozen=True, eq=False)
class Dataset:
    kind: Kind
    n: int
    instances: tuple = field(default_factory=tuple)
    seed: int = 0

    def __len__(self):
        return len(self.instances)

    def __iter__(self):
        return iter(self.instances)

    def __getitem__(self, idx):
        return self.instances[idx]

    def to_bytes(self) -> bytes:
        return dump_dataset(self)

    def __eq__(self, other):
        return isinstance(other, Dataset) and self.to_bytes() == other.to_bytes()

    __hash__ = None


def generate_instance(kind, n: int, seed: int, index: int = 0) -> Instance:
    kind = Kind.parse(kind)
    gen = rng.stream(seed, 0xDA7A, index)
    coords = gen.random((n, 2))
    iid = rng.instance_id(seed, index)
    if kind is Kind.TSP:
        return Instance(kind, coords, id=iid)
    demands = np.zeros(n, dtype=np.int64)
    demands[1:] = gen.integers(1, MAX_DEMAND + 1, size=n - 1)
    return Instance(kind, coords, demands, default_capacity(n - 1), id=iid)


def generate_dataset(kind, n: int, count: int, seed: int) -> Dataset:
    """Uniform instances in the unit square; a pure function of its arguments.

    Each instance draws from its own stream keyed by ``(seed, index)``, so any
    slice of a dataset can be regenerated independently.
    """
    kind = Kind.parse(kind)
    if n < 2:
        raise ValidationError(f"n must be >= 2, got {n}")
    if count < 1:
        raise ValidationError(f"count must be >= 1, got {count}")
    instances = tuple(generate_instance(kind, n, seed, i) for i in range(count))
    return Dataset(kind, n, instances, int(seed))


def tour_cost(instance: Instance, tour) -> float:
    """Closed-tour Euclidean length, including the edge back to the first node."""
    tour = np.asarray(tour, dtype=np.int64)
    n = instance.n
    if tour.shape != (n,) or not np.array_equal(np.sort(tour), np.arange(n)):
        raise ValidationError("tour must be a permutation of all node indices")
    return _path_length(instance.coords, np.append(tour, tour[0]))


def _path_length(coords, seq) -> float:
    # fsum is exactly rounded, so rotating or reversing a tour (or reordering
    # routes) cannot change the reported cost
    pts = coords[seq]
    return math.fsum(np.sqrt(((pts[1:] - pts[:-1]) ** 2).sum(-1)).tolist())


def split_routes(routes) -> list[list[int]]:
    """Depot-delimited sequence -> list of customer lists. Validates delimiters only."""
    seq = [int(x) for x in routes]
    if len(seq) < 2 or seq[0] != 0 or seq[-1] != 0:
        raise DelimiterError("routing must start and end at the depot (node 0)")
    out, cur = [], []
    for node in seq[1:]:
        if node == 0:
            if not cur:
                raise DelimiterError("empty route (consecutive depot visits)")
            out.append(cur)
            cur = []
        else:
            cur.append(node)
    return out


def routes_cost(instance: Instance, routes) -> float:
    """Total Euclidean length of a depot-delimited CVRP routing."""
    if instance.kind is not Kind.CVRP:
        raise ValidationError("routes_cost needs a CVRP instance")
    parts = split_routes(routes)
    seen = [node for part in parts for node in part]
    if any(node < 1 or node >= instance.n for node in seen):
        raise CustomerCoverageError("routing references an unknown node")
    if len(seen) != len(set(seen)):
        raise CustomerCoverageError("a customer is visited more than once")
    if len(seen) != instance.n - 1:
        raise CustomerCoverageError("some customers are never visited")
    for part in parts:
        if int(instance.demands[part].sum()) > instance.capacity:
            raise CapacityViolation(f"route {part} exceeds capacity {instance.capacity}")
    return _path_length(instance.coords, np.asarray([int(x) for x in routes], dtype=np.int64))


def solution_cost(instance: Instance, solution) -> float:
    if instance.kind is Kind.TSP:
        return tour_cost(instance, solution)
    return routes_cost(instance, solution)


def brute_force(instance: Instance):
    """Exact optimum by exhaustive enumeration. Returns ``(cost, solution)``."""
    if instance.kind is Kind.TSP:
        return _brute_force_tsp(instance)
    return _brute_force_cvrp(instance)


def _brute_force_tsp(instance: Instance):
    n = instance.n
    if n > TSP_BRUTE_FORCE_CAP:
        raise SizeCapError(f"TSP brute force is capped at n={TSP_BRUTE_FORCE_CAP}, got {n}")
    dist = instance.distance_matrix()
    if n == 2:
        return tour_cost(instance, [0, 1]), [0, 1]
    # node 0 fixed: enumerates every tour up to rotation
    perms = np.array(list(itertools.permutations(range(1, n))), dtype=np.int64)
    tours = np.concatenate([np.zeros((len(perms), 1), dtype=np.int64), perms], axis=1)
    costs = dist[tours, np.roll(tours, -1, axis=1)].sum(1)
    # near-ties are re-scored with the exactly rounded cost
    near = np.flatnonzero(costs <= costs.min() + 1e-9)
    scored = [(tour_cost(instance, tours[k]), k) for k in near]
    cost, best = min(scored)
    return cost, tours[best].tolist()


def _best_route(dist, customers):
    """Cheapest depot-closed route over a set of customers, by enumeration."""
    best_cost, best_order = np.inf, None
    for order in itertools.permutations(customers):
        path = (0,) + order + (0,)
        c = sum(dist[a, b] for a, b in zip(path[:-1], path[1:]))
        if c < best_cost:
            best_cost, best_order = c, list(order)
    return best_cost, best_order


def _brute_force_cvrp(instance: Instance):
    customers = list(range(1, instance.n))
    m = len(customers)
    if m > CVRP_BRUTE_FORCE_CAP:
        raise SizeCapError(f"CVRP brute force is capped at {CVRP_BRUTE_FORCE_CAP} customers, got {m}")
    dist = instance.distance_matrix()
    demands = instance.demands
    route = {}
    for mask in range(1, 1 << m):
        members = [customers[k] for k in range(m) if mask >> k & 1]
        if demands[members].sum() <= instance.capacity:
            route[mask] = _best_route(dist, members)
    # set-partition DP; the route containing the lowest customer is split off first
    best = {0: (0.0, [])}
    for mask in range(1, 1 << m):
        low = mask & -mask
        rest = mask ^ low
        cand_cost, cand = np.inf, None
        sub = rest
        while True:
            part = sub | low
            if part in route and (mask ^ part) in best:
                c = route[part][0] + best[mask ^ part][0]
                if c < cand_cost:
                    cand_cost, cand = c, [route[part][1]] + best[mask ^ part][1]
            if sub == 0:
                break
            sub = (sub - 1) & rest
        best[mask] = (cand_cost, cand)
    _, parts = best[(1 << m) - 1]
    seq = [0]
    for part in parts:
        seq += part + [0]
    return routes_cost(instance, seq), seq


def tsp_reference_cost(instance: Instance, time_limit: float = 60.0):
    """Exact TSP optimum via a degree-constrained MILP with lazy subtour cuts.

    Used to build reference-cost files for sizes out of brute-force reach.
    """
    from scipy.optimize import Bounds, LinearConstraint, milp
    from scipy.sparse import lil_matrix
    from scipy.sparse.csgraph import connected_components

    n = instance.n
    if n <= 3:
        return brute_force(instance)
    dist = instance.distance_matrix()
    edges = [(i, j) for i in range(n) for j in range(i + 1, n)]
    c = np.array([dist[i, j] for i, j in edges])
    deg = lil_matrix((n, len(edges)))
    for e, (i, j) in enumerate(edges):
        deg[i, e] = 1
        deg[j, e] = 1
    constraints = [LinearConstraint(deg.tocsr(), 2, 2)]
    while True:
        res = milp(c, constraints=constraints, integrality=np.ones(len(edges)),
                   bounds=Bounds(0, 1), options={"time_limit": time_limit})
        if res.x is None:
            raise RuntimeError(f"MILP failed: {res.message}")
        chosen = [edges[e] for e in np.flatnonzero(res.x > 0.5)]
        adj = lil_matrix((n, n))
        for i, j in chosen:
            adj[i, j] = adj[j, i] = 1
        k, labels = connected_components(adj.tocsr(), directed=False)
        if k == 1:
            break
        for comp in range(k):
            members = set(np.flatnonzero(labels == comp).tolist())
            row = np.array([1.0 if (i in members and j in members) else 0.0 for i, j in edges])
            constraints.append(LinearConstraint(row[None, :], -np.inf, len(members) - 1))
    nbrs = {i: [] for i in range(n)}
    for i, j in chosen:
        nbrs[i].append(j)
        nbrs[j].append(i)
    tour, prev = [0], None
    while len(tour) < n:
        cur = tour[-1]
        nxt = nbrs[cur][0] if nbrs[cur][0] != prev else nbrs[cur][1]
        prev = cur
        tour.append(nxt)
    return tour_cost(instance, tour), tour


# --------------------------------------------------------------------- files

def dump_dataset(dataset: Dataset) -> bytes:
    header = {
        "format": "memento-dset",
        "format_version": DSET_VERSION,
        "kind": dataset.kind.value,
        "n": dataset.n,
        "count": len(dataset),
        "seed": dataset.seed,
    }
    head = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(DSET_MAGIC)
    buf.write(struct.pack("<I", len(head)))
    buf.write(head)
    for inst in dataset:
        buf.write(struct.pack("<Q", inst.id))
        buf.write(inst.coords.astype("<f8").tobytes())
        if dataset.kind is Kind.CVRP:
            buf.write(struct.pack("<q", inst.capacity))
            buf.write(inst.demands.astype("<i8").tobytes())
    return buf.getvalue()


def load_dataset_bytes(data: bytes) -> Dataset:
    if data[:len(DSET_MAGIC)] != DSET_MAGIC:
        raise FormatError("not a dataset file (bad magic)")
    pos = len(DSET_MAGIC)
    try:
        (hlen,) = struct.unpack_from("<I", data, pos)
        header = json.loads(data[pos + 4:pos + 4 + hlen])
    except (struct.error, ValueError) as exc:
        raise FormatError(f"corrupt dataset header: {exc}") from None
    if header.get("format_version") != DSET_VERSION:
        raise FormatError(f"unsupported dataset format version {header.get('format_version')!r}")
    pos += 4 + hlen
    kind, n, count = Kind.parse(header["kind"]), int(header["n"]), int(header["count"])
    rec = 8 + 16 * n + (8 + 8 * n if kind is Kind.CVRP else 0)
    if len(data) - pos != rec * count:
        raise FormatError("dataset file is truncated or has trailing bytes")
    instances = []
    for _ in range(count):
        (iid,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        coords = np.frombuffer(data, "<f8", 2 * n, pos).reshape(n, 2).astype(np.float64)
        pos += 16 * n
        if kind is Kind.CVRP:
            (cap,) = struct.unpack_from("<q", data, pos)
            pos += 8
            demands = np.frombuffer(data, "<i8", n, pos).astype(np.int64)
            pos += 8 * n
            instances.append(Instance(kind, coords, demands, cap, id=iid))
        else:
            instances.append(Instance(kind, coords, id=iid))
    return Dataset(kind, n, tuple(instances), int(header["seed"]))


def save_dataset(path, dataset: Dataset) -> None:
    Path(path).write_bytes(dump_dataset(dataset))


def load_dataset(path) -> Dataset:
    return load_dataset_bytes(Path(path).read_bytes())
