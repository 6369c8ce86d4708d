"""Variable bookkeeping and the set algebra of heterogeneous fusion.

Every scalar-block random variable (a target state, a time-tagged copy of a
target state, or an agent bias) is a :class:`Variable`. Ordering is derived
from ``(kind, entity, time_tag)`` alone, so agents that build their variable
sets independently agree on block layout without negotiation.

Sets used by the fusion rules, for an edge ``(i, j)``:

* ``tasks[i]``                      local task set of agent ``i``
* ``common_set(t, (i, j))``         variables held by both endpoints
* ``subtree_union(t, (i, j), i)``   union of task sets on ``i``'s side of the cut edge
* ``passthrough_set(t, (i, j), i)`` what ``i`` relays to ``j`` without holding it locally
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Iterator, NamedTuple

import numpy as np

from .errors import DimensionMismatch, UnknownEdge

TARGET = "target"
BIAS = "bias"
_KIND_RANK = {TARGET: 0, BIAS: 1}
_KIND_PREFIX = {TARGET: "x", BIAS: "s"}


@dataclass(frozen=True, eq=False)
class Variable:
    kind: str
    entity: int
    time_tag: int | None = None
    dim: int = field(default=1, compare=False)

    def __post_init__(self):
        if self.kind not in _KIND_RANK:
            raise ValueError(f"unknown variable kind {self.kind!r}")
        if self.dim < 1:
            raise ValueError("variable dimension must be >= 1")
        # hashed constantly during set algebra, so precompute; ints only, so the
        # value survives pickling into worker processes
        tag = self.time_tag
        object.__setattr__(self, "_hash", hash((_KIND_RANK[self.kind], self.entity,
                                                 tag is None, 0 if tag is None else tag)))

    def __hash__(self):
        return self._hash

    def __eq__(self, other):
        if other.__class__ is not Variable:
            return NotImplemented
        return (self._hash == other._hash and self.entity == other.entity
                and self.time_tag == other.time_tag and self.kind == other.kind)

    @property
    def id(self) -> str:
        tag = "" if self.time_tag is None else f"@{self.time_tag}"
        return f"{_KIND_PREFIX[self.kind]}{self.entity}{tag}"

    @property
    def key(self) -> tuple:
        # newest copy first within one target
        tag = 0 if self.time_tag is None else -self.time_tag
        return (_KIND_RANK[self.kind], self.entity, tag)

    @property
    def base(self) -> "Variable":
        """The untagged variable this copy belongs to."""
        if self.time_tag is None:
            return self
        b = self.__dict__.get("_base")
        if b is None:
            b = Variable(self.kind, self.entity, None, self.dim)
            object.__setattr__(self, "_base", b)
        return b

    def at(self, k: int) -> "Variable":
        return Variable(self.kind, self.entity, k, self.dim)

    def __repr__(self):
        return self.id


def target(t: int, dim: int = 2, time_tag: int | None = None) -> Variable:
    return Variable(TARGET, t, time_tag, dim)


def bias(i: int, dim: int = 2) -> Variable:
    return Variable(BIAS, i, None, dim)


class VariableSet:
    """Immutable, canonically ordered set of variables."""

    __slots__ = ("_vars", "_members", "_offsets", "_hash", "_idx_cache")

    def __init__(self, variables: Iterable[Variable] = ()):
        if isinstance(variables, VariableSet):
            self._init(variables._vars)
            return
        seen: dict[Variable, Variable] = {}
        for v in variables:
            prev = seen.get(v)
            if prev is not None and prev.dim != v.dim:
                raise DimensionMismatch(f"{v.id} given with dims {prev.dim} and {v.dim}")
            seen[v] = v
        self._init(tuple(sorted(seen, key=lambda v: v.key)))

    def _init(self, ordered: tuple):
        self._vars = ordered
        self._members = frozenset(ordered)
        self._offsets = None
        self._hash = None
        self._idx_cache = None

    @classmethod
    def _ordered(cls, ordered) -> "VariableSet":
        # trusted: already canonical and duplicate-free
        out = object.__new__(cls)
        out._init(tuple(ordered))
        return out

    def index_of(self, sub: "VariableSet") -> np.ndarray:
        """Scalar indices of ``sub`` within this set's layout, cached per ``sub``.

        Raises ``KeyError`` naming the first missing variable.
        """
        cache = self._idx_cache
        if cache is None:
            cache = self._idx_cache = {}
        idx = cache.get(sub)
        if idx is None:
            lay = self.offsets()
            out = []
            for v in sub._vars:
                s = lay.get(v)
                if s is None:
                    raise KeyError(v)
                out.extend(range(*s))
            idx = np.asarray(out, dtype=np.intp)
            idx.flags.writeable = False
            if len(cache) < 256:
                cache[sub] = idx
        return idx

    def offsets(self) -> dict:
        """``{variable: (start, stop)}`` scalar layout, cached."""
        if self._offsets is None:
            out, off = {}, 0
            for v in self._vars:
                out[v] = (off, off + v.dim)
                off += v.dim
            self._offsets = out
        return self._offsets

    def __iter__(self) -> Iterator[Variable]:
        return iter(self._vars)

    def __len__(self):
        return len(self._vars)

    def __contains__(self, v):
        return v in self._members

    def __getitem__(self, i):
        return self._vars[i]

    def __eq__(self, other):
        if isinstance(other, VariableSet):
            return self is other or self._vars == other._vars
        return NotImplemented

    def __hash__(self):
        if self._hash is None:
            self._hash = hash(self._vars)
        return self._hash

    def __or__(self, other):
        other = other if isinstance(other, VariableSet) else VariableSet(other)
        if other._members <= self._members:
            return self
        return VariableSet((*self._vars, *other._vars))

    def __and__(self, other):
        members = other._members if isinstance(other, VariableSet) else set(other)
        return VariableSet._ordered(v for v in self._vars if v in members)

    def __sub__(self, other):
        members = other._members if isinstance(other, VariableSet) else set(other)
        return VariableSet._ordered(v for v in self._vars if v not in members)

    def __le__(self, other):
        members = other._members if isinstance(other, VariableSet) else set(other)
        return self._members <= members

    def __repr__(self):
        return "{" + ", ".join(v.id for v in self._vars) + "}"

    @property
    def dim(self) -> int:
        return sum(v.dim for v in self._vars)

    @property
    def vars(self) -> tuple[Variable, ...]:
        return self._vars

    def bases(self) -> "VariableSet":
        return VariableSet(v.base for v in self._vars)

    def select(self, base_set: Iterable[Variable]) -> "VariableSet":
        """All members whose untagged base is in ``base_set``."""
        wanted = base_set._members if isinstance(base_set, VariableSet) else set(base_set)
        return VariableSet._ordered(v for v in self._vars if v.base in wanted)

    def biases(self) -> "VariableSet":
        return VariableSet._ordered(v for v in self._vars if v.kind == BIAS)

    def targets(self) -> "VariableSet":
        return VariableSet._ordered(v for v in self._vars if v.kind == TARGET)


EMPTY = VariableSet()


def _norm_edge(edge) -> tuple[int, int]:
    i, j = edge
    return (i, j) if i <= j else (j, i)


class Violation(NamedTuple):
    kind: str
    agents: tuple
    variables: tuple
    message: str


@dataclass
class TreeTopology:
    """Agents, undirected communication edges, and per-agent task sets."""

    tasks: dict[int, VariableSet]
    edges: list[tuple[int, int]]

    def __post_init__(self):
        self.tasks = {a: VariableSet(s) for a, s in sorted(self.tasks.items())}
        self.edges = sorted({_norm_edge(e) for e in self.edges})
        self._nbrs: dict[int, list[int]] = {a: [] for a in self.tasks}
        for i, j in self.edges:
            for a, b in ((i, j), (j, i)):
                if a in self._nbrs:
                    self._nbrs[a].append(b)
        for a in self._nbrs:
            self._nbrs[a].sort()

    @property
    def agents(self) -> list[int]:
        return list(self.tasks)

    @property
    def n_agents(self) -> int:
        return len(self.tasks)

    def neighbors(self, i: int) -> list[int]:
        return self._nbrs[i]

    def full_set(self) -> VariableSet:
        out = EMPTY
        for s in self.tasks.values():
            out = out | s
        return out

    def has_edge(self, edge) -> bool:
        return _norm_edge(edge) in self.edges

    def directed_edges(self) -> list[tuple[int, int]]:
        return [(i, j) for i in self.agents for j in self.neighbors(i)]

    def side(self, edge, root: int) -> list[int]:
        """Agents reachable from ``root`` once ``edge`` is cut."""
        if not self.has_edge(edge):
            raise UnknownEdge(f"edge {edge} not in topology")
        i, j = edge
        if root not in (i, j):
            raise UnknownEdge(f"agent {root} is not an endpoint of {edge}")
        other = j if root == i else i
        seen = {root}
        queue = deque([root])
        while queue:
            a = queue.popleft()
            for b in self._nbrs[a]:
                if b in seen or (a == root and b == other):
                    continue
                seen.add(b)
                queue.append(b)
        return sorted(seen)

    def distances(self, src: int) -> dict[int, int]:
        dist = {src: 0}
        queue = deque([src])
        while queue:
            a = queue.popleft()
            for b in self._nbrs[a]:
                if b not in dist:
                    dist[b] = dist[a] + 1
                    queue.append(b)
        return dist

    def path(self, src: int, dst: int) -> list[int]:
        parent = {src: None}
        queue = deque([src])
        while queue:
            a = queue.popleft()
            if a == dst:
                break
            for b in self._nbrs[a]:
                if b not in parent:
                    parent[b] = a
                    queue.append(b)
        if dst not in parent:
            return []
        out = [dst]
        while parent[out[-1]] is not None:
            out.append(parent[out[-1]])
        return out[::-1]


def validate_topology(t: TreeTopology) -> list[Violation]:
    """Return every violated structural assumption; an empty list means valid."""
    out: list[Violation] = []
    agents = set(t.agents)
    for i, j in t.edges:
        if i == j:
            out.append(Violation("self-loop", (i,), (), f"agent {i} linked to itself"))
        for a in (i, j):
            if a not in agents:
                out.append(Violation("unknown-agent", (a,), (), f"edge ({i},{j}) names unknown agent {a}"))
    if any(v.kind in ("self-loop", "unknown-agent") for v in out):
        return out

    if agents and len(t.distances(t.agents[0])) != len(agents):
        missing = sorted(agents - set(t.distances(t.agents[0])))
        out.append(Violation("disconnected", tuple(missing), (), "network is not connected"))
    if len(t.edges) > len(agents) - 1:
        cyc = _cycle_agents(t)
        out.append(Violation("cycle", tuple(cyc), (), f"network contains a cycle through agents {cyc}"))

    for i, j in t.edges:
        if not len(t.tasks[i] & t.tasks[j]):
            out.append(Violation("no-overlap", (i, j), (), f"neighbors {i} and {j} share no variable"))

    if any(v.kind in ("disconnected", "cycle") for v in out):
        return out

    for var in t.full_set():
        holders = [a for a in t.agents if var in t.tasks[a]]
        for n, a in enumerate(holders):
            for b in holders[n + 1:]:
                gap = [c for c in t.path(a, b) if var not in t.tasks[c]]
                if gap:
                    out.append(Violation(
                        "chain-rule", (a, b, *gap), (var,),
                        f"{var.id} held by {a} and {b} but not by {gap} on the path between them"))
    return out


def _cycle_agents(t: TreeTopology) -> list[int]:
    parent: dict[int, int | None] = {}
    for root in t.agents:
        if root in parent:
            continue
        parent[root] = None
        stack = [(root, None)]
        while stack:
            a, came = stack.pop()
            for b in t.neighbors(a):
                if b == came:
                    continue
                if b in parent:
                    # walk both back to the common ancestor
                    pa, pb = [a], [b]
                    while pa[-1] is not None:
                        pa.append(parent[pa[-1]])
                    while pb[-1] is not None:
                        pb.append(parent[pb[-1]])
                    common = next(x for x in pa if x in pb)
                    return sorted(set(pa[:pa.index(common) + 1] + pb[:pb.index(common) + 1]))
                parent[b] = a
                stack.append((b, a))
    return []


def subtree_union(t: TreeTopology, edge, side: int) -> VariableSet:
    """Union of task sets of all agents on ``side``'s half of the cut ``edge``."""
    i, j = edge
    out = EMPTY
    for a in t.side(edge, side):
        out = out | t.tasks[a]
    return out


def common_set(t: TreeTopology, edge) -> VariableSet:
    if not t.has_edge(edge):
        raise UnknownEdge(f"edge {edge} not in topology")
    i, j = edge
    return t.tasks[i] & t.tasks[j]


def passthrough_set(t: TreeTopology, edge, sender: int) -> VariableSet:
    """Variables ``sender`` relays across ``edge`` without holding them locally."""
    return subtree_union(t, edge, sender) - t.tasks[sender]
