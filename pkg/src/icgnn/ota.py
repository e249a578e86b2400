"""Over-the-air distributed execution of the two-stage model.

Each Tx-Rx pair is a node holding one CSI row and its own parameter set.  The
direction stage runs entirely locally; the power stage proceeds in synchronous
rounds where round 1 broadcasts the desired-link gain (plus per-edge unicasts)
and every later round broadcasts the node's current feature row.  Receivers
apply their own weights to received rows.  Delivery is ideal and lossless;
drops can be injected to exercise the protocol checks.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import CTensor, Tensor
from .beamforming import LN2, gain_tables, hybrid_direction, pinv_directions
from .channel import Dataset, SystemConfig
from .model import (
    ModelConfig,
    ModelParams,
    SIGMOID_CLAMP,
    _real_cmatmul,
    batched_gain_tables,
    duplicate_features,
    enhance_features,
    gain_tensor,
    init_params,
    masked_softmax,
)
from .training import TrainConfig, compute_loss


class ProtocolError(RuntimeError):
    """A node could not assemble its received-message set for a round."""


@dataclass
class Message:
    round: int
    sender: int
    receiver: int | None  # None = broadcast
    payload: np.ndarray

    @property
    def dim(self) -> int:
        return int(self.payload.size)

    @property
    def kind(self) -> str:
        return "broadcast" if self.receiver is None else "unicast"


class MessageLog:
    """Chronological record of every transmitted message."""

    def __init__(self):
        self.entries: list[Message] = []

    def extend(self, messages) -> None:
        self.entries.extend(messages)

    def symbol_total(self) -> int:
        return sum(m.dim for m in self.entries)

    def round_symbols(self) -> dict:
        out: dict = {}
        for m in self.entries:
            out[m.round] = out.get(m.round, 0) + m.dim
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["round", "sender", "receiver", "kind", "dim"])
            for m in self.entries:
                writer.writerow([m.round, m.sender, "" if m.receiver is None else m.receiver,
                                 m.kind, m.dim])


@dataclass
class PairNode:
    """One Tx-Rx pair: local CSI row, local parameters, local stage outputs."""

    index: int
    h_row: np.ndarray  # (K, N) — channels from this node's transmitter
    params: ModelParams
    alpha: float | None = None
    gains_row: np.ndarray | None = None  # (K,) effective gains of own direction
    feature: np.ndarray | None = None  # current power-stage feature row


def make_nodes(sample: np.ndarray, params_list) -> list:
    """Split one (K,K,N) sample into per-pair nodes with their own parameters."""
    sample = np.asarray(sample)
    if sample.ndim != 3 or sample.shape[0] != sample.shape[1]:
        raise ValueError(f"expected one sample (K,K,N), got shape {sample.shape}")
    if len(params_list) != sample.shape[0]:
        raise ValueError(f"{len(params_list)} parameter sets for {sample.shape[0]} pairs")
    return [PairNode(k, sample[k].copy(), p) for k, p in enumerate(params_list)]


def _expanded_row(h_row: np.ndarray) -> np.ndarray:
    # every row a copy of the local one: row k of any derived per-row quantity
    # then matches the full-sample computation bit for bit
    k = h_row.shape[0]
    return np.broadcast_to(h_row, (k,) + h_row.shape).copy()


def _local_direction_stage(node: PairNode) -> float:
    """Subgraph-k direction stage with this node's parameters only."""
    cfg = node.params.config.resolved()
    if not cfg.use_sgr:
        raise ValueError("distributed execution requires the subgraph direction stage")
    k = node.index
    n_pairs = node.h_row.shape[0]
    fake = _expanded_row(node.h_row)
    feats = (enhance_features(fake) if cfg.use_feature_enhancement
             else duplicate_features(fake))[k]
    dtype = node.params.dtype
    entries = node.params.entries
    mask_row = (1.0 - np.eye(n_pairs))[k].reshape(1, 1, n_pairs)
    x0 = CTensor(
        ad.constant(feats.real[None].astype(dtype)),
        ad.constant(feats.imag[None].astype(dtype)),
    )  # (1, K, F)
    x = x0
    for layer, spec in enumerate(cfg.cgal):
        flat = lambda t: ad.reshape(t, (n_pairs, t.data.shape[-1]))
        x_flat = ad.cmap(flat, x)
        x0_flat = ad.cmap(flat, x0)
        heads = []
        for d in range(spec.heads):
            base = f"dir_attn{layer}.head{d}"
            z_flat = ad.cmatmul(x_flat, entries[f"{base}.w"])
            z = ad.cmap(lambda t: ad.reshape(t, (1, n_pairs, spec.out_dim)), z_flat)
            out = None
            if cfg.use_message_passing:
                s_src = ad.cmap(
                    lambda t: ad.reshape(t, (1, 1, n_pairs)),
                    ad.cmatmul(z_flat, entries[f"{base}.a_src"]),
                )
                z_des = ad.cmap(lambda t: ad.take(t, [k], axis=0), z_flat)
                s_dst = ad.cmap(
                    lambda t: ad.reshape(t, (1, 1, 1)),
                    ad.cmatmul(z_des, entries[f"{base}.a_dst"]),
                )
                pre = ad.cadd(s_dst, s_src)
                logits = ad.cmodulus(ad.cleaky_relu(pre, cfg.leaky_slope))
                attn = masked_softmax(logits, mask_row, axis=-1)
                agg = ad.cmap(
                    lambda t: ad.reshape(t, (1, 1, spec.out_dim)),
                    _real_cmatmul(attn, z),
                )
                out = agg
            if cfg.use_residual:
                r_flat = ad.cmatmul(x0_flat, entries[f"{base}.w_skip"])
                r = ad.cmap(lambda t: ad.reshape(t, (1, n_pairs, spec.out_dim)), r_flat)
                if out is None:
                    out = r
                else:
                    out = CTensor(
                        ad.add_at(r.re, agg.re, [k], axis=1),
                        ad.add_at(r.im, agg.im, [k], axis=1),
                    )
            elif out is not None:
                zero = ad.constant(np.zeros((1, n_pairs, spec.out_dim), dtype=dtype))
                out = CTensor(
                    ad.add_at(zero, agg.re, [k], axis=1),
                    ad.add_at(zero, agg.im, [k], axis=1),
                )
            if out is None:
                out = ad.cconstant(np.zeros((1, n_pairs, spec.out_dim)), dtype=dtype)
            heads.append(ad.crelu(out))
        x = CTensor(
            ad.concat([h.re for h in heads], axis=-1),
            ad.concat([h.im for h in heads], axis=-1),
        )
    v = ad.cmap(lambda t: ad.reshape(ad.take(t, [k], axis=1), (1, t.data.shape[-1])), x)
    n_layers = len(cfg.cfl) - 1
    for f in range(1, n_layers + 1):
        w, bias = entries[f"dir_fc{f}.w"], entries[f"dir_fc{f}.b"]
        v = ad.cadd(ad.cmatmul(v, w), bias)
        if f < n_layers:
            v = ad.crelu(v)
            v = CTensor(
                ad.batch_norm(v.re, entries[f"dir_fc{f}.bn_re.scale"],
                              entries[f"dir_fc{f}.bn_re.shift"],
                              node.params.bn_states[f"dir_fc{f}.bn_re"], training=False),
                ad.batch_norm(v.im, entries[f"dir_fc{f}.bn_im.scale"],
                              entries[f"dir_fc{f}.bn_im.shift"],
                              node.params.bn_states[f"dir_fc{f}.bn_im"], training=False),
            )
    raw = ad.cast(v.re, np.float64)
    alpha = ad.sigmoid(ad.clip(raw, -SIGMOID_CLAMP, SIGMOID_CLAMP))
    return float(alpha.data.reshape(()))


def local_stage(node: PairNode):
    """Run the fully local part: direction parameter and own gain row.

    Only this node's CSI row is read.  Results are cached on the node.
    """
    node.alpha = _local_direction_stage(node)
    fake = _expanded_row(node.h_row)
    tables = gain_tables(fake)
    alpha_vec = np.full((1, node.h_row.shape[0]), node.alpha)
    gains = gain_tensor(ad.constant(alpha_vec), tuple(t[None] for t in tables))
    node.gains_row = gains.data[0, node.index].copy()
    return node.alpha, node.gains_row


def ota_round_messages(nodes, g: int) -> list:
    """Messages transmitted in round g: gain values (g=1) or feature rows."""
    cfg = nodes[0].params.config.resolved()
    n_rounds = len(cfg.rgal)
    if not 1 <= g <= n_rounds:
        raise ValueError(f"round must be in 1..{n_rounds}, got {g}")
    messages = []
    if g == 1:
        for node in nodes:
            if node.gains_row is None:
                local_stage(node)
            messages.append(Message(1, node.index, None,
                                    np.array([node.gains_row[node.index]])))
            for j in range(len(nodes)):
                if j != node.index:
                    messages.append(Message(1, node.index, j,
                                            np.array([node.gains_row[j]])))
    else:
        want = cfg.rgal[g - 1].in_dim
        for node in nodes:
            if node.feature is None:
                raise ProtocolError(
                    f"round {g}: node {node.index} has no feature row to send"
                )
            if node.feature.size != want:
                raise ProtocolError(
                    f"round {g}: node {node.index} feature dim {node.feature.size}, "
                    f"protocol expects {want}"
                )
            messages.append(Message(g, node.index, None, node.feature.copy()))
    return messages


def _delivered(messages, drop) -> list:
    if not drop:
        return messages
    drop = {tuple(d) for d in drop}
    return [m for m in messages if (m.round, m.sender, m.receiver) not in drop]


def _gather_broadcasts(messages, g: int, receiver: int, n_pairs: int, own) -> list:
    rows = [None] * n_pairs
    rows[receiver] = own
    for m in messages:
        if m.round == g and m.receiver is None and m.sender != receiver:
            rows[m.sender] = m.payload
    for j, row in enumerate(rows):
        if row is None:
            raise ProtocolError(
                f"round {g}: node {receiver} missing broadcast from node {j}"
            )
    return rows


def _check_unicasts(messages, receiver: int, n_pairs: int) -> dict:
    got = {m.sender: m.payload for m in messages
           if m.round == 1 and m.receiver == receiver}
    for j in range(n_pairs):
        if j != receiver and j not in got:
            raise ProtocolError(
                f"round 1: node {receiver} missing unicast from node {j}"
            )
    return got


def _local_power_layer(node: PairNode, x_rows: Tensor, edge_row: Tensor,
                       spec, layer: int, cfg: ModelConfig) -> np.ndarray:
    """One power-stage layer producing this node's own feature row."""
    n_pairs = x_rows.data.shape[1]
    k = node.index
    entries = node.params.entries
    mask_row = (1.0 - np.eye(n_pairs))[k].reshape(1, 1, n_pairs)
    x_flat = ad.reshape(x_rows, (n_pairs, spec.in_dim))
    r = None
    if cfg.use_residual:
        x0_own = ad.constant(np.array([[node.gains_row[k]]], dtype=x_rows.dtype))
        r = ad.reshape(ad.matmul(x0_own, entries[f"pow_attn{layer}.w_skip"]),
                       (1, 1, spec.out_dim))
    heads = []
    for d in range(spec.heads):
        base = f"pow_attn{layer}.head{d}"
        z_flat = ad.matmul(x_flat, entries[f"{base}.w"])
        z = ad.reshape(z_flat, (1, n_pairs, spec.out_dim))
        out = None
        if cfg.use_message_passing:
            z_own = ad.take(z_flat, [k], axis=0)
            s_dst = ad.reshape(ad.matmul(z_own, entries[f"{base}.a_dst"]), (1, 1, 1))
            s_src = ad.reshape(ad.matmul(z_flat, entries[f"{base}.a_src"]), (1, 1, n_pairs))
            edge_coef = ad.matmul(entries[f"{base}.w_edge"], entries[f"{base}.a_edge"])
            s_edge = ad.mul(edge_row, ad.reshape(edge_coef, (1, 1, 1)))
            pre = ad.add(ad.add(s_dst, s_src), s_edge)
            logits = ad.leaky_relu(pre, cfg.leaky_slope)
            attn = masked_softmax(logits, mask_row, axis=-1)
            out = ad.matmul(attn, z)
        if r is not None:
            out = r if out is None else ad.add(out, r)
        if out is None:
            out = ad.constant(np.zeros((1, 1, spec.out_dim), dtype=x_rows.dtype))
        heads.append(ad.relu(out))
    return ad.concat(heads, axis=-1).data.reshape(-1)


def _local_power_head(node: PairNode, cfg: ModelConfig, p_max: float) -> float:
    entries = node.params.entries
    v = ad.constant(node.feature.reshape(1, -1))
    n_layers = len(cfg.rfl) - 1
    for f in range(1, n_layers + 1):
        v = ad.add(ad.matmul(v, entries[f"pow_fc{f}.w"]), entries[f"pow_fc{f}.b"])
        if f < n_layers:
            v = ad.relu(v)
            v = ad.batch_norm(v, entries[f"pow_fc{f}.bn.scale"],
                              entries[f"pow_fc{f}.bn.shift"],
                              node.params.bn_states[f"pow_fc{f}.bn"], training=False)
    raw = ad.cast(v, np.float64)
    p = ad.sigmoid(ad.clip(raw, -SIGMOID_CLAMP, SIGMOID_CLAMP))
    return float(p.data.reshape(())) * p_max


@dataclass
class DistributedResult:
    alpha: np.ndarray  # (K,)
    p: np.ndarray  # (K,)
    w: np.ndarray  # (K, N) beamformers
    log: MessageLog


def distributed_forward(nodes, system: SystemConfig, drop=()) -> DistributedResult:
    """Round-synchronous execution; every node sees only logged messages."""
    n_pairs = len(nodes)
    if sorted(node.index for node in nodes) != list(range(n_pairs)):
        raise ValueError("nodes must cover pair indices 0..K-1 exactly once")
    nodes = sorted(nodes, key=lambda node: node.index)
    cfg = nodes[0].params.config.resolved()
    for node in nodes[1:]:
        if node.params.config.resolved() != cfg:
            raise ValueError("all nodes must share one model configuration")
    if not cfg.use_sgr:
        raise ValueError("distributed execution requires the subgraph direction stage")
    dtype = nodes[0].params.dtype
    for node in nodes:
        local_stage(node)
    log = MessageLog()

    sent = ota_round_messages(nodes, 1)
    log.extend(sent)
    arrived = _delivered(sent, drop)
    unicasts = [_check_unicasts(arrived, k, n_pairs) for k in range(n_pairs)]
    edge_rows = []
    for node in nodes:
        k = node.index
        if cfg.edge_orientation == "outgoing":
            row = node.gains_row
        else:
            row = np.array([node.gains_row[k] if j == k else float(unicasts[k][j][0])
                            for j in range(n_pairs)])
        edge_rows.append(ad.constant(row.astype(dtype).reshape(1, 1, n_pairs)))
    for node in nodes:
        own = np.array([node.gains_row[node.index]])
        rows = _gather_broadcasts(arrived, 1, node.index, n_pairs, own)
        node.feature = np.stack(rows).astype(dtype).reshape(n_pairs)

    for g, spec in enumerate(cfg.rgal):
        if g > 0:
            sent = ota_round_messages(nodes, g + 1)
            log.extend(sent)
            arrived = _delivered(sent, drop)
        new_features = []
        for node in nodes:
            if g == 0:
                x_rows = ad.constant(node.feature.reshape(1, n_pairs, 1))
            else:
                rows = _gather_broadcasts(arrived, g + 1, node.index, n_pairs,
                                          node.feature)
                x_rows = ad.constant(np.stack(rows).astype(dtype)[None])
            new_features.append(
                _local_power_layer(node, x_rows, edge_rows[node.index], spec, g, cfg)
            )
        for node, feat in zip(nodes, new_features):
            node.feature = feat

    alpha = np.array([node.alpha for node in nodes])
    p = np.array([_local_power_head(node, cfg, system.p_max) for node in nodes])
    w = np.stack([
        np.sqrt(p[k]) * hybrid_direction(
            alpha[k], pinv_directions(_expanded_row(nodes[k].h_row))[k],
            nodes[k].h_row[k],
        )
        for k in range(n_pairs)
    ])
    return DistributedResult(alpha, p, w, log)


# ------------------------------------------------------------------ overhead


@dataclass(frozen=True)
class OverheadReport:
    n_pairs: int
    broadcast_dims: tuple  # V_{2,(g-1)} for g = 1..G2
    unicast_symbols: int

    @property
    def broadcast_symbols(self) -> int:
        return self.n_pairs * sum(self.broadcast_dims)

    @property
    def total(self) -> int:
        return self.broadcast_symbols + self.unicast_symbols

    def per_round(self) -> list:
        rows = []
        for g, dim in enumerate(self.broadcast_dims, start=1):
            extra = self.unicast_symbols if g == 1 else 0
            rows.append((g, dim, self.n_pairs * dim + extra))
        return rows


def signaling_overhead(config: ModelConfig, n_pairs: int) -> OverheadReport:
    """Symbol count of one full distributed forward pass."""
    if n_pairs < 1:
        raise ValueError(f"n_pairs must be >= 1, got {n_pairs}")
    cfg = config.resolved()
    dims = tuple(spec.in_dim for spec in cfg.rgal)
    return OverheadReport(n_pairs, dims, n_pairs * (n_pairs - 1))


# ------------------------------------------------- distributed training


def _node_seeds(seed: int, n_pairs: int) -> list:
    ss = np.random.SeedSequence(seed, spawn_key=(0xD1,))
    return [int(s) for s in ss.generate_state(n_pairs)]


def _stack_real(node_params, name) -> Tensor:
    parts = [ad.reshape(p.entries[name], (1,) + p.entries[name].data.shape)
             for p in node_params]
    return ad.concat(parts, axis=0)


def _stack_complex(node_params, name) -> CTensor:
    re = ad.concat([ad.reshape(p.entries[name].re, (1,) + p.entries[name].re.data.shape)
                    for p in node_params], axis=0)
    im = ad.concat([ad.reshape(p.entries[name].im, (1,) + p.entries[name].im.data.shape)
                    for p in node_params], axis=0)
    return CTensor(re, im)


def _per_node_bn(v: Tensor, node_params, name: str, training: bool) -> Tensor:
    # v: (B, K, 1, F); each node normalizes with its own scale/shift/buffers
    b, k, _, width = v.data.shape
    cols = []
    for i, p in enumerate(node_params):
        col = ad.reshape(ad.take(v, [i], axis=1), (b, width))
        col = ad.batch_norm(col, p.entries[f"{name}.scale"], p.entries[f"{name}.shift"],
                            p.bn_states[name], training)
        cols.append(ad.reshape(col, (b, 1, 1, width)))
    return ad.concat(cols, axis=1)


def _stacked_direction(feats: np.ndarray, node_params, cfg: ModelConfig,
                       training: bool) -> Tensor:
    b, k = feats.shape[0], feats.shape[1]
    dtype = node_params[0].dtype
    desired = np.arange(k) * (k + 1)
    mask = 1.0 - np.eye(k)
    x0 = CTensor(ad.constant(feats.real.astype(dtype)),
                 ad.constant(feats.imag.astype(dtype)))  # (B, K, K, F)
    x = x0
    for layer, spec in enumerate(cfg.cgal):
        heads = []
        for d in range(spec.heads):
            base = f"dir_attn{layer}.head{d}"
            w = _stack_complex(node_params, f"{base}.w")  # (K, F, D)
            z = ad.cmatmul(x, w)  # (B, K, K, D): subgraph k transformed by theta_k
            out = None
            if cfg.use_message_passing:
                a_src = _stack_complex(node_params, f"{base}.a_src")
                a_dst = _stack_complex(node_params, f"{base}.a_dst")
                s_src = ad.cmap(lambda t: ad.reshape(t, (b, k, k)),
                                ad.cmatmul(z, a_src))
                z_des = ad.cmap(
                    lambda t: ad.reshape(
                        ad.take(ad.reshape(t, (b, k * k, spec.out_dim)), desired, axis=1),
                        (b, k, 1, spec.out_dim),
                    ),
                    z,
                )
                s_dst = ad.cmap(lambda t: ad.reshape(t, (b, k, 1)),
                                ad.cmatmul(z_des, a_dst))
                pre = ad.cadd(s_dst, s_src)
                logits = ad.cmodulus(ad.cleaky_relu(pre, cfg.leaky_slope))
                attn = masked_softmax(logits, mask, axis=-1)
                agg = _real_cmatmul(ad.reshape(attn, (b, k, 1, k)), z)
                agg = ad.cmap(lambda t: ad.reshape(t, (b, k, spec.out_dim)), agg)
                out = agg
            if cfg.use_residual:
                wsk = _stack_complex(node_params, f"{base}.w_skip")
                r = ad.cmatmul(x0, wsk)  # (B, K, K, D)
                if out is None:
                    out = r
                else:
                    flatten = lambda t: ad.reshape(t, (b, k * k, spec.out_dim))
                    lift = lambda t: ad.reshape(t, (b, k, k, spec.out_dim))
                    out = CTensor(
                        lift(ad.add_at(flatten(r.re), agg.re, desired, axis=1)),
                        lift(ad.add_at(flatten(r.im), agg.im, desired, axis=1)),
                    )
            elif out is not None:
                zero = ad.constant(np.zeros((b, k * k, spec.out_dim), dtype=dtype))
                lift = lambda t: ad.reshape(t, (b, k, k, spec.out_dim))
                out = CTensor(
                    lift(ad.add_at(zero, agg.re, desired, axis=1)),
                    lift(ad.add_at(zero, agg.im, desired, axis=1)),
                )
            if out is None:
                out = ad.cconstant(np.zeros((b, k, k, spec.out_dim)), dtype=dtype)
            heads.append(ad.crelu(out))
        x = CTensor(ad.concat([h.re for h in heads], axis=-1),
                    ad.concat([h.im for h in heads], axis=-1))
    v = ad.cmap(
        lambda t: ad.reshape(
            ad.take(ad.reshape(t, (b, k * k, t.data.shape[-1])), desired, axis=1),
            (b, k, 1, t.data.shape[-1]),
        ),
        x,
    )
    n_layers = len(cfg.cfl) - 1
    for f in range(1, n_layers + 1):
        w = _stack_complex(node_params, f"dir_fc{f}.w")
        bias = _stack_complex(node_params, f"dir_fc{f}.b")
        v = ad.cadd(ad.cmatmul(v, w), bias)
        if f < n_layers:
            v = ad.crelu(v)
            v = CTensor(
                _per_node_bn(v.re, node_params, f"dir_fc{f}.bn_re", training),
                _per_node_bn(v.im, node_params, f"dir_fc{f}.bn_im", training),
            )
    raw = ad.cast(ad.reshape(v.re, (b, k)), np.float64)
    return ad.sigmoid(ad.clip(raw, -SIGMOID_CLAMP, SIGMOID_CLAMP))


def _stacked_power(gains: Tensor, node_params, cfg: ModelConfig, p_max: float,
                   training: bool) -> Tensor:
    b, k, _ = gains.shape
    dtype = node_params[0].dtype
    diag = np.arange(k) * (k + 1)
    mask = 1.0 - np.eye(k)
    node0 = ad.reshape(ad.take(ad.reshape(gains, (b, k * k)), diag, axis=1), (b, k, 1))
    edge_src = gains if cfg.edge_orientation == "outgoing" else ad.transpose(gains, (0, 2, 1))
    x = node0
    for g, spec in enumerate(cfg.rgal):
        xb = ad.reshape(x, (b, 1, k, spec.in_dim))
        r = None
        if cfg.use_residual:
            wsk = _stack_real(node_params, f"pow_attn{g}.w_skip")  # (K, 1, D)
            r = ad.reshape(ad.matmul(ad.reshape(node0, (b, k, 1, 1)), wsk),
                           (b, k, spec.out_dim))
        heads = []
        for d in range(spec.heads):
            base = f"pow_attn{g}.head{d}"
            w = _stack_real(node_params, f"{base}.w")  # (K, F, D)
            z = ad.matmul(xb, w)  # (B, K, K, D): z[b, k, j] = x_j theta_k
            out = None
            if cfg.use_message_passing:
                a_dst = _stack_real(node_params, f"{base}.a_dst")
                a_src = _stack_real(node_params, f"{base}.a_src")
                z_own = ad.reshape(
                    ad.take(ad.reshape(z, (b, k * k, spec.out_dim)), diag, axis=1),
                    (b, k, 1, spec.out_dim),
                )
                s_dst = ad.reshape(ad.matmul(z_own, a_dst), (b, k, 1))
                s_src = ad.reshape(ad.matmul(z, a_src), (b, k, k))
                w_edge = _stack_real(node_params, f"{base}.w_edge")  # (K, 1, D)
                a_edge = _stack_real(node_params, f"{base}.a_edge")  # (K, D, 1)
                edge_coef = ad.reshape(ad.matmul(w_edge, a_edge), (1, k, 1))
                s_edge = ad.mul(edge_src, edge_coef)
                pre = ad.add(ad.add(s_dst, s_src), s_edge)
                logits = ad.leaky_relu(pre, cfg.leaky_slope)
                attn = masked_softmax(logits, mask, axis=-1)
                agg = ad.matmul(ad.reshape(attn, (b, k, 1, k)), z)
                out = ad.reshape(agg, (b, k, spec.out_dim))
            if r is not None:
                out = r if out is None else ad.add(out, r)
            if out is None:
                out = ad.constant(np.zeros((b, k, spec.out_dim), dtype=dtype))
            heads.append(ad.relu(out))
        x = ad.concat(heads, axis=-1)
    v = ad.reshape(x, (b, k, 1, cfg.rfl[0]))
    n_layers = len(cfg.rfl) - 1
    for f in range(1, n_layers + 1):
        w = _stack_real(node_params, f"pow_fc{f}.w")
        bias = _stack_real(node_params, f"pow_fc{f}.b")
        v = ad.add(ad.matmul(v, w), bias)
        if f < n_layers:
            v = ad.relu(v)
            v = _per_node_bn(v, node_params, f"pow_fc{f}.bn", training)
    raw = ad.cast(ad.reshape(v, (b, k)), np.float64)
    p = ad.sigmoid(ad.clip(raw, -SIGMOID_CLAMP, SIGMOID_CLAMP))
    return ad.mul(p, ad.constant(np.float64(p_max)))


def stacked_forward(h: np.ndarray, node_params, system: SystemConfig,
                    training: bool = False):
    """Joint-tape forward over per-node parameters (training simulator)."""
    from .model import ForwardOut

    cfg = node_params[0].config.resolved()
    if not cfg.use_sgr:
        raise ValueError("distributed execution requires the subgraph direction stage")
    h = np.asarray(h)
    feats = enhance_features(h) if cfg.use_feature_enhancement else duplicate_features(h)
    alpha = _stacked_direction(feats, node_params, cfg, training)
    tables = batched_gain_tables(h)
    gains = gain_tensor(alpha, tables)
    dtype = node_params[0].dtype
    p = _stacked_power(ad.cast(gains, dtype), node_params, cfg, system.p_max, training)
    return ForwardOut(alpha=alpha, p=p, gains=gains)


def distributed_outputs(ds: Dataset, node_params, chunk: int = 256):
    """Eval-mode rates (N,K) and EE (N,) under per-node parameters."""
    system = ds.config
    frozen = [p.detached() for p in node_params]
    k = system.n_pairs
    rates = np.empty((len(ds), k))
    ee = np.empty(len(ds))
    for start in range(0, len(ds), chunk):
        out = stacked_forward(ds.h[start : start + chunk], frozen, system)
        g, p = out.gains.data, out.p.data
        weighted = g * p[:, :, None]
        signal = weighted[:, np.arange(k), np.arange(k)]
        interference = weighted.sum(axis=1) - signal
        r = np.log1p(signal / (interference + system.noise_power)) / LN2
        rates[start : start + chunk] = r
        ee[start : start + chunk] = r.sum(axis=1) / (p.sum(axis=1) + system.p_circuit)
    return rates, ee


@dataclass
class DistTrainResult:
    node_params: list
    best_epoch: int
    best_val_loss: float
    history: list = field(default_factory=list)
    overhead: OverheadReport | None = None
    total_symbols: int = 0  # training forwards only; validation excluded


def distributed_train(train_ds: Dataset, val_ds: Dataset, model_config: ModelConfig,
                      config: TrainConfig, log=None) -> DistTrainResult:
    """Per-pair parameters, one shared loss; each node keeps its own optimizer."""
    system = train_ds.config
    k = system.n_pairs
    node_params = [init_params(model_config, seed=s)
                   for s in _node_seeds(config.seed, k)]
    opts = [ad.Adam(p.flat(), lr=config.lr) for p in node_params]
    overhead = signaling_overhead(model_config, k)
    shuffle = np.random.Generator(
        np.random.Philox(np.random.SeedSequence(config.seed, spawn_key=(0x51,)))
    )
    n = len(train_ds)
    best_val = float("inf")
    best_epoch = 0
    best_params = [p.copy() for p in node_params]
    history: list = []
    symbols = 0

    def val_loss_now() -> float:
        total = 0.0
        for start in range(0, len(val_ds), 256):
            hv = val_ds.h[start : start + 256]
            out = stacked_forward(hv, [p.detached() for p in node_params],
                                  system, training=False)
            total += float(compute_loss(out, system, config.penalty, config.loss_eps).data) * hv.shape[0]
        return total / len(val_ds)

    for epoch in range(1, config.epochs + 1):
        order = shuffle.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            out = stacked_forward(train_ds.h[idx], node_params, system, training=True)
            loss = compute_loss(out, system, config.penalty, config.loss_eps)
            for opt in opts:
                opt.zero_grad()
            ad.backward(loss)
            for opt in opts:
                opt.step()
            epoch_loss += float(loss.data) * len(idx)
            symbols += overhead.total * len(idx)
        record = {"epoch": epoch, "train_loss": epoch_loss / n, "symbols": symbols}
        if epoch % config.val_every == 0 or epoch == config.epochs:
            vl = val_loss_now()
            record["val_loss"] = vl
            if vl < best_val:
                best_val = vl
                best_epoch = epoch
                best_params = [p.copy() for p in node_params]
        history.append(record)
        if log:
            log(record)
    if config.epochs == 0:
        best_val = val_loss_now()
        best_params = node_params
    return DistTrainResult(best_params, best_epoch, best_val, history,
                           overhead, symbols)
