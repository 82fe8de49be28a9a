"""L-round communication engine.

Rows are grouped: a batch of ``B`` decision steps over ``n`` agent slots is a
``(B*n, d)`` matrix, and per-step topologies are stacked ``(B*n, n)`` blocks
where row ``b*n + i``, column ``j`` is ``G[i, j]`` of step ``b`` (``i`` sends
to ``j``).  A single step is just ``B = 1``.

Every function here is written against the dual-mode ops of
:mod:`mcomm.gradcore`, so the same code runs on plain arrays during rollouts
and on graph variables when the loss is built.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import gradcore as gc
from . import kernels
from .gradcore import ParamArray, init_uniform

TOPOLOGIES = ("full", "gated", "attention_topk")
AGGREGATIONS = ("mean", "sum", "attention")
MESSAGES = ("identity", "linear")
MASK_NEG = -1e9


@dataclass(frozen=True)
class ProtocolSpec:
    rounds: int = 1
    hidden_dim: int = 32
    message_dim: int = 32
    topology: str = "full"
    aggregation: str = "mean"
    message: str = "identity"
    topk: int = 2
    attention_dim: int = 16
    policy_hidden: int = 0

    def validate(self, n_agents: int | None = None) -> list[str]:
        errs = []
        if self.rounds < 0:
            errs.append(f"rounds: must be >= 0, got {self.rounds}")
        for name in ("hidden_dim", "message_dim", "attention_dim"):
            if getattr(self, name) <= 0:
                errs.append(f"{name}: must be > 0, got {getattr(self, name)}")
        if self.policy_hidden < 0:
            errs.append(f"policy_hidden: must be >= 0, got {self.policy_hidden}")
        if self.topology not in TOPOLOGIES:
            errs.append(f"topology: must be one of {TOPOLOGIES}, got {self.topology!r}")
        if self.aggregation not in AGGREGATIONS:
            errs.append(f"aggregation: must be one of {AGGREGATIONS}, got {self.aggregation!r}")
        if self.message not in MESSAGES:
            errs.append(f"message: must be one of {MESSAGES}, got {self.message!r}")
        if self.message == "identity" and self.message_dim != self.hidden_dim:
            errs.append(
                f"message_dim: identity messages need message_dim == hidden_dim "
                f"({self.message_dim} != {self.hidden_dim})"
            )
        if self.topology == "attention_topk":
            if self.topk < 1:
                errs.append(f"topk: must be >= 1, got {self.topk}")
            if n_agents is not None and self.topk >= n_agents:
                errs.append(f"topk: k={self.topk} must be < n_agents={n_agents}")
        return errs

    def to_dict(self) -> dict:
        return asdict(self)


class ProtocolParams:
    """Named parameter arrays plus the dimensions they were built for."""

    def __init__(self, spec: ProtocolSpec, obs_dim: int, n_agents: int, n_actions: int, arrays: dict):
        self.spec = spec
        self.obs_dim = obs_dim
        self.n_agents = n_agents
        self.n_actions = n_actions
        self.arrays: dict[str, ParamArray] = arrays

    def __getitem__(self, name: str) -> ParamArray:
        return self.arrays[name]

    def __iter__(self):
        return iter(self.arrays.values())

    def names(self) -> list[str]:
        return list(self.arrays)

    def expected_shapes(self) -> dict[str, tuple[int, int]]:
        return param_shapes(self.spec, self.obs_dim, self.n_agents, self.n_actions)

    def copy(self) -> "ProtocolParams":
        arrays = {k: ParamArray(k, p.value.copy()) for k, p in self.arrays.items()}
        return ProtocolParams(self.spec, self.obs_dim, self.n_agents, self.n_actions, arrays)


def param_shapes(spec: ProtocolSpec, obs_dim: int, n_agents: int, n_actions: int) -> dict:
    hd, md, ad = spec.hidden_dim, spec.message_dim, spec.attention_dim
    shapes = {"obs.W": (obs_dim, hd), "obs.b": (1, hd)}
    if spec.message == "linear":
        shapes.update({"msg.W": (hd, md), "msg.b": (1, md)})
    if spec.topology == "gated":
        shapes.update({"topo.w": (hd, 1), "topo.b": (1, 1)})
    elif spec.topology == "attention_topk":
        shapes.update({"topo.W": (hd, n_agents), "topo.b": (1, n_agents)})
    if spec.aggregation == "attention":
        shapes.update({"aggr.Wq": (hd, ad), "aggr.Wk": (md, ad)})
    for gate in ("z", "r", "n"):
        shapes.update({f"hsu.W{gate}": (md, hd), f"hsu.U{gate}": (hd, hd), f"hsu.b{gate}": (1, hd)})
    if spec.policy_hidden:
        shapes.update({"pi.W1": (hd, spec.policy_hidden), "pi.b1": (1, spec.policy_hidden)})
        shapes.update({"pi.W": (spec.policy_hidden, n_actions), "pi.b": (1, n_actions)})
    else:
        shapes.update({"pi.W": (hd, n_actions), "pi.b": (1, n_actions)})
    shapes.update({"q.W": (n_agents * hd, n_agents), "q.b": (1, n_agents)})
    return shapes


def init_params(spec: ProtocolSpec, obs_dim: int, n_agents: int, n_actions: int, rng) -> ProtocolParams:
    errs = spec.validate(n_agents)
    if errs:
        raise ValueError("; ".join(errs))
    arrays = {}
    for name, shape in param_shapes(spec, obs_dim, n_agents, n_actions).items():
        arrays[name] = init_uniform(rng, name, shape[0], shape)
    return ProtocolParams(spec, obs_dim, n_agents, n_actions, arrays)


class Bound:
    """Parameter view: graph variables when a graph is given, raw arrays otherwise."""

    def __init__(self, params: ProtocolParams, graph: gc.Graph | None = None):
        self.params = params
        self.graph = graph
        self.spec = params.spec

    def __getitem__(self, name: str):
        p = self.params[name]
        return self.graph.param(p) if self.graph is not None else p.value


@dataclass
class RoundState:
    """Logged values of one communication round (all arrays, no graph handles).

    ``G`` is sender-major (row ``i`` lists whom ``i`` sends to); ``alpha`` is
    receiver-major (row ``i`` holds the weights agent ``i`` put on each sender).
    """

    h_in: np.ndarray
    m_star: np.ndarray
    m: np.ndarray
    G: np.ndarray
    alpha: np.ndarray
    h: np.ndarray
    active: np.ndarray
    group: int

    @property
    def steps(self) -> int:
        return self.h.shape[0] // self.group


# ---------------------------------------------------------------------------
# components


def encode_observations(obs, P: Bound):
    obs = obs if isinstance(obs, gc.Var) else gc.as_matrix(obs)
    if obs.shape[1] != P.params.obs_dim:
        raise ValueError(f"observation length {obs.shape[1]} != encoder input {P.params.obs_dim}")
    return gc.tanh(obs @ P["obs.W"] + P["obs.b"])


def encode_messages(h, P: Bound):
    if P.spec.message == "identity":
        return h
    return h @ P["msg.W"] + P["msg.b"]


def pair_mask(active: np.ndarray, n: int) -> np.ndarray:
    """(B*n, n) mask of allowed edges: both endpoints active, no self loops."""
    act = np.asarray(active, dtype=float).reshape(-1, n)
    m = act[:, :, None] * act[:, None, :] * (1.0 - np.eye(n))[None]
    return m.reshape(-1, n)


def topology_scores(h, P: Bound):
    """Sender-side gate logits (gated) or per-slot edge scores (top-k); ``None`` for full."""
    kind = P.spec.topology
    if kind == "gated":
        return h @ P["topo.w"] + P["topo.b"]
    if kind == "attention_topk":
        return h @ P["topo.W"] + P["topo.b"]
    return None


def select_topology(h, P: Bound, active: np.ndarray, n: int, rng=None, mode: str = "training", hard=None):
    """Returns ``(G_hard, G)``: the binary topology and its differentiable stand-in.

    ``hard`` replays a previously drawn topology (used when the loss graph is
    rebuilt from a rollout).
    """
    kind = P.spec.topology
    mask = pair_mask(active, n)
    if kind == "full":
        return mask, mask
    scores = topology_scores(h, P)
    s_val = gc.value_of(scores)
    if kind == "gated":
        gate = gc.sigmoid(scores)
        g_val = gc.value_of(gate)
        if hard is None:
            if mode == "training":
                if rng is None:
                    raise ValueError("gated topology needs an rng in training mode")
                fire = (rng.random(g_val.shape[0]) < g_val[:, 0]).astype(float)
            else:
                fire = (g_val[:, 0] >= 0.5).astype(float)
            hard = fire[:, None] * mask
        soft = gate * mask
    else:
        k = P.spec.topk
        if k >= n:
            raise ValueError(f"top-k topology needs k < n_agents, got k={k}, n={n}")
        if hard is None:
            act = np.asarray(active, dtype=bool).reshape(-1, n)
            blocks = [kernels.topk_mask(s_val[b * n:(b + 1) * n], act[b], k) for b in range(act.shape[0])]
            hard = np.concatenate(blocks, axis=0)
        soft = gc.sigmoid(scores) * mask
    return hard, gc.straight_through(hard, soft)


def aggregate(m_star, G_hard: np.ndarray, G, h, P: Bound, n: int):
    """Returns ``(m, alpha)``; receivers read column ``i`` of each sender's row."""
    kind = P.spec.aggregation
    incoming_hard = gc._block_t(G_hard, n)
    incoming = gc.block_transpose(G, n)
    if kind == "sum":
        weights = incoming
    elif kind == "mean":
        deg = incoming_hard.sum(axis=1, keepdims=True)
        weights = incoming / np.maximum(deg, 1.0)
    else:
        q = h @ P["aggr.Wq"]
        k = m_star @ P["aggr.Wk"]
        scores = gc.bmm_nt(q, k, n) * (1.0 / np.sqrt(P.spec.attention_dim))
        masked = scores + (1.0 - incoming_hard) * MASK_NEG
        weights = gc.softmax(masked) * incoming
    return gc.bmm(weights, m_star, n), weights


def update_hidden(h_prev, m, P: Bound):
    """GRU cell with the aggregated message as input."""
    z = gc.sigmoid(m @ P["hsu.Wz"] + h_prev @ P["hsu.Uz"] + P["hsu.bz"])
    r = gc.sigmoid(m @ P["hsu.Wr"] + h_prev @ P["hsu.Ur"] + P["hsu.br"])
    cand = gc.tanh(m @ P["hsu.Wn"] + (r * h_prev) @ P["hsu.Un"] + P["hsu.bn"])
    return h_prev + z * (cand - h_prev)


def policy_logits(h, P: Bound):
    if P.spec.policy_hidden:
        h = gc.tanh(h @ P["pi.W1"] + P["pi.b1"])
    return h @ P["pi.W"] + P["pi.b"]


def critic_values(h, P: Bound, n: int):
    """Centralized per-agent values from the concatenation of all agents' states."""
    hd = P.spec.hidden_dim
    rows = gc.value_of(h).shape[0]
    joint = gc.reshape(h, (rows // n, n * hd))
    v = joint @ P["q.W"] + P["q.b"]
    return gc.reshape(v, (rows, 1))


def run_rounds(h0, P: Bound, active, n: int, rounds: int, rng=None, mode: str = "training", hard_topologies=None):
    """Apply message/topology/aggregation/update ``rounds`` times.

    Returns ``(h_final, round_states, graph_messages)``; the last item keeps
    the (possibly graph-valued) messages for differentiable metrics.
    """
    active = np.asarray(active, dtype=bool).reshape(-1)
    h = h0
    states, messages = [], []
    for l in range(rounds):
        m_star = encode_messages(h, P)
        forced = None if hard_topologies is None else hard_topologies[l]
        G_hard, G = select_topology(h, P, active, n, rng, mode, hard=forced)
        m, alpha = aggregate(m_star, G_hard, G, h, P, n)
        h_next = update_hidden(h, m, P)
        states.append(
            RoundState(
                h_in=gc.value_of(h),
                m_star=gc.value_of(m_star),
                m=gc.value_of(m),
                G=G_hard,
                alpha=gc.value_of(alpha),
                h=gc.value_of(h_next),
                active=active,
                group=n,
            )
        )
        messages.append(m_star)
        h = h_next
    return h, states, messages


def act(logits, rng=None, mode: str = "training", actions=None):
    """Sample (training) or argmax (greedy) actions.

    Returns ``(actions, log_probs, probs)``; ``log_probs`` is the log-probability
    of the chosen actions, graph-valued when ``logits`` is.
    """
    logp_all = gc.log_softmax(logits)
    lp = gc.value_of(logp_all)
    probs = np.exp(lp)
    if actions is None:
        if mode == "training":
            if rng is None:
                raise ValueError("sampling actions needs an rng")
            u = rng.random(lp.shape[0])
            cdf = np.cumsum(probs, axis=1)
            actions = np.minimum((cdf < u[:, None]).sum(axis=1), lp.shape[1] - 1)
        else:
            # argmax returns the first maximum: lowest index wins ties
            actions = np.argmax(lp, axis=1)
    actions = np.asarray(actions, dtype=np.int64)
    onehot = np.zeros_like(lp)
    onehot[np.arange(lp.shape[0]), actions] = 1.0
    chosen = gc.sum_(logp_all * onehot, axis=1)
    return actions, chosen, probs


def centralized_step(obs, params: ProtocolParams, active, rounds: int, rng=None, mode: str = "execution"):
    """One decision step with all agents processed jointly."""
    P = Bound(params)
    n = params.n_agents
    h0 = encode_observations(obs, P)
    h, states, _ = run_rounds(h0, P, active, n, rounds, rng, mode)
    actions, logp, probs = act(policy_logits(h, P), rng, "training" if mode == "training" else "greedy")
    return actions, states, probs


# ---------------------------------------------------------------------------
# decentralized execution


def decentralized_step(obs, params: ProtocolParams, active, rounds: int):
    """Greedy execution where each agent only touches its own row.

    Agents exchange messages along the senders' chosen edges; the routing of
    those edges is the only thing the harness does on their behalf.
    Returns ``(actions, round_states)``.
    """
    P = Bound(params)
    spec = params.spec
    n = params.n_agents
    obs = gc.as_matrix(obs)
    active = np.asarray(active, dtype=bool).reshape(-1)
    h = [encode_observations(obs[i:i + 1], P) for i in range(n)]
    states = []
    for _ in range(rounds):
        m_star = [encode_messages(h[i], P) for i in range(n)]
        rows = [_outgoing_row(i, h[i], P, active, n) for i in range(n)]
        m, h_next = [], []
        alpha = np.zeros((n, n))
        for i in range(n):
            senders = [j for j in range(n) if rows[j][i] == 1.0]
            mi, w = _receive(i, senders, m_star, h[i], P)
            alpha[i, senders] = w
            m.append(mi)
            h_next.append(update_hidden(h[i], mi, P))
        states.append(
            RoundState(
                h_in=np.vstack(h),
                m_star=np.vstack(m_star),
                m=np.vstack(m),
                G=np.vstack(rows),
                alpha=alpha,
                h=np.vstack(h_next),
                active=active,
                group=n,
            )
        )
        h = h_next
    actions = np.array([int(np.argmax(policy_logits(h[i], P)[0])) for i in range(n)], dtype=np.int64)
    return actions, states


def _outgoing_row(i: int, h_i, P: Bound, active, n: int) -> np.ndarray:
    row = np.zeros(n)
    if not active[i]:
        return row
    targets = [j for j in range(n) if j != i and active[j]]
    kind = P.spec.topology
    if kind == "full":
        row[targets] = 1.0
    elif kind == "gated":
        if gc.sigmoid(h_i @ P["topo.w"] + P["topo.b"])[0, 0] >= 0.5:
            row[targets] = 1.0
    else:
        scores = (h_i @ P["topo.W"] + P["topo.b"])[0]
        targets.sort(key=lambda j: (-scores[j], j))
        row[targets[: P.spec.topk]] = 1.0
    return row


def _receive(i: int, senders: list, m_star: list, h_i, P: Bound):
    md = m_star[i].shape[1]
    if not senders:
        return np.zeros((1, md)), np.zeros(0)
    msgs = np.vstack([m_star[j] for j in senders])
    kind = P.spec.aggregation
    if kind == "sum":
        w = np.ones(len(senders))
    elif kind == "mean":
        w = np.full(len(senders), 1.0 / len(senders))
    else:
        q = h_i @ P["aggr.Wq"]
        k = msgs @ P["aggr.Wk"]
        w = gc.softmax((q @ k.T) * (1.0 / np.sqrt(P.spec.attention_dim)))[0]
    return (w[None, :] @ msgs), w
