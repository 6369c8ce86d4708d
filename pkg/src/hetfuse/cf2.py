"""Channel-filter fusion rules for homogeneous and heterogeneous state sets.

Every edge ``(i, j)`` of the tree carries a channel filter, one copy per
endpoint, holding the information both endpoints already share. Fusion adds
the neighbor's message and subtracts the channel copy, so nothing is counted
twice. The methods differ in what an agent holds and what it sends:

=======  ==============  ===============================  ====================
method   agent holds     message ``i -> j``               channel tracks
=======  ==============  ===============================  ====================
cf       full state      full state                       full state
fcf      full state      full (joint side) or subtree     full state
bdf      full state      union of tasks on ``i``'s side   shared tasks
abdf     full state      shared tasks                     shared tasks
hscf     own tasks       shared tasks                     shared tasks
=======  ==============  ===============================  ====================
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .errors import DimensionMismatch, NegativeInformation, UnknownEdge
from .ginfo import InfoGaussian, condition_on, marginalize, recombine
from .ias import LinearDynamics, ias_predict, stale_copies, window_marginalize
from .varset import TreeTopology, VariableSet, common_set, subtree_union


class FusionMethod(str, Enum):
    CF = "cf"
    FCF = "fcf"
    BDF = "bdf"
    ABDF = "abdf"
    HSCF = "hscf"

    @classmethod
    def parse(cls, name) -> "FusionMethod":
        if isinstance(name, cls):
            return name
        key = str(name).lower().replace("-", "").replace("_", "")
        aliases = {"cf": cls.CF, "fcf": cls.FCF, "bdf": cls.BDF, "bdfcf": cls.BDF,
                   "abdf": cls.ABDF, "approxbdf": cls.ABDF, "approxbdfcf": cls.ABDF,
                   "abdfcf": cls.ABDF, "hscf": cls.HSCF, "hs": cls.HSCF}
        if key not in aliases:
            raise ValueError(f"unknown fusion method {name!r}")
        return aliases[key]

    @property
    def full_scope(self) -> bool:
        """Whether agents carry the full state vector."""
        return self is not FusionMethod.HSCF

    @property
    def label(self) -> str:
        return {"cf": "CF", "fcf": "F-CF", "bdf": "BDF-CF", "abdf": "ApproxBDF-CF",
                "hscf": "HS-CF"}[self.value]


@dataclass(frozen=True)
class EdgePlan:
    """Variable sets for one directed edge ``sender -> receiver`` (untagged)."""

    sender: int
    receiver: int
    send_set: VariableSet
    channel_vars: VariableSet


def plan_edges(topology: TreeTopology, method, joint=None) -> dict[tuple[int, int], EdgePlan]:
    """Message and channel sets for every directed edge.

    ``joint`` maps an undirected edge to the F-CF agent that sends the full
    joint; by default the lower agent id on each edge.
    """
    method = FusionMethod.parse(method)
    full = topology.full_set()
    joint = dict(joint or {})
    out = {}
    for i, j in topology.directed_edges():
        key = (min(i, j), max(i, j))
        shared = common_set(topology, key)
        if method is FusionMethod.CF:
            send, chan = full, full
        elif method is FusionMethod.FCF:
            holder = joint.get(key, key[0])
            if holder not in key:
                raise UnknownEdge(f"F-CF joint holder {holder} is not an endpoint of {key}")
            send = full if i == holder else subtree_union(topology, (i, j), i)
            chan = full
        elif method is FusionMethod.BDF:
            send, chan = subtree_union(topology, (i, j), i), shared
        else:
            send, chan = shared, shared
        out[(i, j)] = EdgePlan(i, j, send, chan)
    return out


@dataclass
class ChannelState:
    """One endpoint's copy of the common information on ``edge``."""

    edge: tuple[int, int]
    channel_vars: VariableSet
    common: InfoGaussian

    def __post_init__(self):
        if self.common.vars.bases() != self.channel_vars and len(self.common.vars):
            raise DimensionMismatch(
                f"channel over {self.channel_vars} holds common over {self.common.vars}")


@dataclass(frozen=True)
class Message:
    sender: int
    receiver: int
    step: int
    payload: InfoGaussian
    method: FusionMethod


@dataclass
class AgentState:
    id: int
    method: FusionMethod
    tasks: VariableSet
    scope: VariableSet
    local: InfoGaussian
    channels: dict[int, ChannelState] = field(default_factory=dict)
    send_sets: dict[int, VariableSet] = field(default_factory=dict)


def _marg_or_zero(g: InfoGaussian, keep) -> InfoGaussian:
    # a zero-information common prior is flat, and so is every marginal of it
    if not g.lam.any():
        return InfoGaussian.zeros(VariableSet(keep))
    return marginalize(g, keep)


def build_message(agent: AgentState, receiver: int, step: int = 0) -> Message:
    if receiver not in agent.send_sets:
        raise UnknownEdge(f"agent {agent.id} has no link to {receiver}")
    keep = agent.local.vars.select(agent.send_sets[receiver])
    return Message(agent.id, receiver, step, marginalize(agent.local, keep), agent.method)


def fuse(agent: AgentState, incoming: Message, channel: ChannelState | None = None) -> AgentState:
    """Fuse one neighbor message into ``agent``'s local estimate."""
    if incoming.receiver != agent.id:
        raise UnknownEdge(f"message for agent {incoming.receiver} delivered to {agent.id}")
    channel = agent.channels[incoming.sender] if channel is None else channel
    if set(channel.edge) != {agent.id, incoming.sender}:
        raise UnknownEdge(f"channel {channel.edge} does not match link {agent.id}-{incoming.sender}")
    local, payload, common = agent.local, incoming.payload, channel.common
    if not payload.vars <= local.vars:
        raise DimensionMismatch(f"message over {payload.vars} exceeds local {local.vars}")

    method = agent.method
    if method in (FusionMethod.CF, FusionMethod.FCF):
        fused = local + payload - _marg_or_zero(common, payload.vars)
    elif method is FusionMethod.BDF:
        # swap the sender-side branch of the local estimate for the received one;
        # order free as long as the local estimate factors along the tree
        branch = marginalize(local, payload.vars)
        shared = marginalize(branch, common.vars)
        fused = local - branch + shared + payload - common
    else:
        if payload.vars != common.vars:
            raise DimensionMismatch(f"message over {payload.vars}, channel over {common.vars}")
        f = marginalize(local, common.vars) + payload - common
        if common.vars == local.vars:
            fused = f
        else:
            fused = recombine(f, condition_on(local, common.vars))

    if not fused.check_psd():
        raise NegativeInformation(
            f"agent {agent.id} fusing message from {incoming.sender} at step {incoming.step}: "
            f"information matrix min eigenvalue {fused.min_eig():.3e}")
    return replace(agent, local=fused)


def fused_common(channel: ChannelState, *messages: Message) -> InfoGaussian:
    """New common information after both endpoints exchanged ``messages``.

    Each payload contributes its restriction to the channel variables minus
    what the channel already held there. Payloads are applied in sender order
    so both endpoints produce bitwise-identical values.
    """
    common = channel.common
    out = common
    for msg in sorted(messages, key=lambda m: m.sender):
        p = msg.payload
        q = marginalize(p, p.vars & common.vars)
        out = out + q - _marg_or_zero(common, q.vars)
    return out


def update_common(channel: ChannelState, fused_marginal: InfoGaussian) -> ChannelState:
    if fused_marginal.vars != channel.common.vars:
        raise DimensionMismatch(
            f"fused marginal over {fused_marginal.vars}, channel over {channel.common.vars}")
    return replace(channel, common=fused_marginal)


def predict_common(channel: ChannelState, model: LinearDynamics | None, u=None, k: int = 0,
                   window: str = "full") -> ChannelState:
    """Propagate the channel's target copies to step ``k``; static channels are unchanged.

    Old copies are removed by plain marginalization for windowed policies:
    the channel is never deflated.
    """
    if model is None or all(v.time_tag is None for v in channel.common.vars):
        return channel
    u = model.u(k) if u is None else u
    g = ias_predict(channel.common, model, u, k)
    if window != "full":
        if not channel.common.lam.any():
            # a flat channel propagates to a flat marginal
            return replace(channel, common=InfoGaussian.zeros(g.vars - stale_copies(g, 1)))
        g = window_marginalize(g, window=1)
    return replace(channel, common=g)


def initial_channel(edge, channel_vars: VariableSet, prior: InfoGaussian | None) -> ChannelState:
    """Shared prior restricted to the channel, or zero information without one."""
    if prior is None:
        return ChannelState(edge, channel_vars, InfoGaussian.zeros(channel_vars))
    return ChannelState(edge, channel_vars, marginalize(prior, prior.vars.select(channel_vars)))


def init_agents(topology: TreeTopology, method, prior: InfoGaussian | None, joint=None):
    """Agent states for every node, each starting from the shared prior."""
    method = FusionMethod.parse(method)
    plans = plan_edges(topology, method, joint)
    full = topology.full_set()
    agents = {}
    for a in topology.agents:
        scope = full if method.full_scope else topology.tasks[a]
        if prior is None:
            local = InfoGaussian.zeros(scope)
        else:
            local = marginalize(prior, prior.vars.select(scope))
        channels, sends = {}, {}
        for b in topology.neighbors(a):
            plan = plans[(a, b)]
            channels[b] = initial_channel((min(a, b), max(a, b)), plan.channel_vars, prior)
            sends[b] = plan.send_set
        agents[a] = AgentState(a, method, topology.tasks[a], scope, local, channels, sends)
    return agents


def exchange(agents: dict[int, AgentState], step: int = 0) -> dict[tuple[int, int], Message]:
    """One synchronous fusion round over every link.

    All messages are built from the pre-fusion states; each agent then fuses
    in ascending sender id and updates its channel copies.
    """
    msgs = {}
    for a in sorted(agents):
        for b in sorted(agents[a].send_sets):
            msgs[(a, b)] = build_message(agents[a], b, step)
    for a in sorted(agents):
        st = agents[a]
        new_channels = {}
        for b in sorted(st.send_sets):
            st = fuse(st, msgs[(b, a)], st.channels[b])
            ch = st.channels[b]
            new_channels[b] = update_common(ch, fused_common(ch, msgs[(a, b)], msgs[(b, a)]))
        st.channels = {**st.channels, **new_channels}
        agents[a] = st
    return msgs


def channel_disagreement(agents: dict[int, AgentState]) -> float:
    """Largest relative difference between the two endpoint copies of any channel."""
    worst = 0.0
    for a, st in agents.items():
        for b, ch in st.channels.items():
            if b < a:
                continue
            other = agents[b].channels[a].common
            den = max(np.linalg.norm(ch.common.lam), 1e-300)
            worst = max(worst, np.linalg.norm(ch.common.lam - other.lam) / den,
                        np.linalg.norm(ch.common.zeta - other.zeta)
                        / max(np.linalg.norm(ch.common.zeta), 1e-300))
    return float(worst)
