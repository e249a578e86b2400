"""Two-stage graph-attention model mapping channel samples to (alpha, p).

Stage 1 works on complex enhanced channel features: per-pair subgraphs, complex
attention layers, then a complex fully-connected stack whose real part is
squashed to the MRT/ZF mixing coefficients alpha in (0,1).  Stage 2 re-expresses
the system through the scalar effective gains induced by those directions and
runs a real edge-assisted attention stack plus a real fully-connected stack to
produce transmit powers p in (0, p_max).

No parameter shape depends on the number of pairs, so one parameter set serves
every K.  All forward code is written on the autodiff tape; evaluation uses
detached parameters so the tape prunes itself away.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Union

import numpy as np

from . import autodiff as ad
from .autodiff import CTensor, Tensor
from .beamforming import gain_tables
from .channel import SystemConfig

SIGMOID_CLAMP = 36.0  # |x| <= 36 keeps float64 sigmoid strictly inside (0,1)


@dataclass(frozen=True)
class GalSpec:
    """One attention layer: input dim, per-head output dim, head count."""

    in_dim: int
    out_dim: int
    heads: int

    def __post_init__(self):
        if min(self.in_dim, self.out_dim, self.heads) < 1:
            raise ValueError(f"attention layer dims must be >= 1, got {self}")

    @property
    def concat_dim(self) -> int:
        return self.out_dim * self.heads


def _check_chain(gal: tuple, fc: tuple, label: str) -> None:
    for prev, cur in zip(gal, gal[1:]):
        if cur.in_dim != prev.concat_dim:
            raise ValueError(
                f"{label} attention chain broken: layer expects {cur.in_dim}, "
                f"previous emits {prev.concat_dim}"
            )
    if len(fc) < 2:
        raise ValueError(f"{label} fully-connected chain needs >= 2 dims")
    if fc[0] != gal[-1].concat_dim:
        raise ValueError(
            f"{label} fully-connected input {fc[0]} != attention output {gal[-1].concat_dim}"
        )
    if fc[-1] != 1:
        raise ValueError(f"{label} head must end in dimension 1, got {fc[-1]}")


@dataclass(frozen=True)
class ModelConfig:
    """Layer table plus the ablation and variant switches."""

    cgal: tuple
    cfl: tuple
    rgal: tuple
    rfl: tuple
    use_message_passing: bool = True
    use_residual: bool = True
    use_sgr: bool = True
    use_feature_enhancement: bool = True
    one_value_variant: bool = False
    leaky_slope: float = 0.2
    edge_orientation: str = "outgoing"  # edge (k,j) carries gain caused by k at j

    def __post_init__(self):
        if self.edge_orientation not in ("outgoing", "incoming"):
            raise ValueError(f"unknown edge orientation {self.edge_orientation!r}")
        if not 0.0 <= self.leaky_slope < 1.0:
            raise ValueError(f"leaky slope out of range: {self.leaky_slope}")
        resolved = self.resolved()
        _check_chain(resolved.cgal, resolved.cfl, "direction")
        _check_chain(resolved.rgal, resolved.rfl, "power")
        if resolved.rgal[0].in_dim != 1:
            raise ValueError("power stage node features are scalars; first in_dim must be 1")

    def resolved(self) -> "ModelConfig":
        """Apply the one-value variant (all power-stage broadcasts become scalars)."""
        if not self.one_value_variant:
            return self
        rgal = tuple(GalSpec(1, 1, 1) for _ in self.rgal)
        rfl = (1,) + tuple(self.rfl[1:])
        if rgal == self.rgal and rfl == self.rfl:
            return self
        return replace(self, rgal=rgal, rfl=rfl)

    def to_kv(self) -> dict:
        def gal_str(layers):
            return ";".join(f"{s.in_dim}:{s.out_dim}:{s.heads}" for s in layers)

        return {
            "cgal": gal_str(self.cgal),
            "cfl": ",".join(str(d) for d in self.cfl),
            "rgal": gal_str(self.rgal),
            "rfl": ",".join(str(d) for d in self.rfl),
            "use_message_passing": str(self.use_message_passing).lower(),
            "use_residual": str(self.use_residual).lower(),
            "use_sgr": str(self.use_sgr).lower(),
            "use_feature_enhancement": str(self.use_feature_enhancement).lower(),
            "one_value_variant": str(self.one_value_variant).lower(),
            "leaky_slope": repr(self.leaky_slope),
            "edge_orientation": self.edge_orientation,
        }

    @classmethod
    def from_kv(cls, kv: dict) -> "ModelConfig":
        def gal_parse(text):
            return tuple(
                GalSpec(*(int(x) for x in part.split(":"))) for part in text.split(";")
            )

        def flag(name):
            return kv[name] == "true"

        return cls(
            cgal=gal_parse(kv["cgal"]),
            cfl=tuple(int(x) for x in kv["cfl"].split(",")),
            rgal=gal_parse(kv["rgal"]),
            rfl=tuple(int(x) for x in kv["rfl"].split(",")),
            use_message_passing=flag("use_message_passing"),
            use_residual=flag("use_residual"),
            use_sgr=flag("use_sgr"),
            use_feature_enhancement=flag("use_feature_enhancement"),
            one_value_variant=flag("one_value_variant"),
            leaky_slope=float(kv["leaky_slope"]),
            edge_orientation=kv["edge_orientation"],
        )


def table_config(n_antennas: int = 4, **flags) -> ModelConfig:
    """The full published layer table (defaults sized for N_T = 4)."""
    return ModelConfig(
        cgal=(GalSpec(2 * n_antennas, 8, 8), GalSpec(64, 128, 8)),
        cfl=(1024, 1024, 1024, 128, 64, 1),
        rgal=(GalSpec(1, 2, 8), GalSpec(16, 16, 8), GalSpec(128, 128, 8)),
        rfl=(1024, 1024, 1024, 128, 64, 1),
        **flags,
    )


def desk_config(n_antennas: int = 4, **flags) -> ModelConfig:
    """Reduced table for desk-scale training runs (same topology, smaller dims)."""
    return ModelConfig(
        cgal=(GalSpec(2 * n_antennas, 8, 4), GalSpec(32, 32, 4)),
        cfl=(128, 128, 64, 1),
        rgal=(GalSpec(1, 4, 4), GalSpec(16, 8, 4), GalSpec(32, 32, 4)),
        rfl=(128, 128, 64, 1),
        **flags,
    )


def tiny_config(n_antennas: int = 2, **flags) -> ModelConfig:
    """Miniature table for gradient checks and unit tests."""
    return ModelConfig(
        cgal=(GalSpec(2 * n_antennas, 4, 2), GalSpec(8, 4, 2)),
        cfl=(8, 6, 1),
        rgal=(GalSpec(1, 2, 2), GalSpec(4, 3, 2)),
        rfl=(6, 4, 1),
        **flags,
    )


# ------------------------------------------------------------------ params


Entry = Union[Tensor, CTensor]


@dataclass
class ModelParams:
    """Named parameter tensors (complex entries are CTensor) plus BN buffers."""

    config: ModelConfig
    entries: dict
    bn_states: dict = field(default_factory=dict)

    def flat(self) -> dict:
        """Real-tensor view for the optimizer: complex entries split into planes."""
        out = {}
        for name, e in self.entries.items():
            if isinstance(e, CTensor):
                out[name + ".re"] = e.re
                out[name + ".im"] = e.im
            else:
                out[name] = e
        return out

    def detached(self) -> "ModelParams":
        """Same data, requires_grad off everywhere — prunes the eval tape."""
        entries = {}
        for name, e in self.entries.items():
            if isinstance(e, CTensor):
                entries[name] = CTensor(Tensor(e.re.data), Tensor(e.im.data))
            else:
                entries[name] = Tensor(e.data)
        return ModelParams(self.config, entries, self.bn_states)

    def copy(self) -> "ModelParams":
        entries = {}
        for name, e in self.entries.items():
            if isinstance(e, CTensor):
                entries[name] = CTensor(
                    ad.parameter(e.re.data.copy()), ad.parameter(e.im.data.copy())
                )
            else:
                entries[name] = ad.parameter(e.data.copy())
        bn = {}
        for name, st in self.bn_states.items():
            new = ad.BNState(st.mean.shape[1], dtype=st.mean.dtype)
            new.mean[:] = st.mean
            new.var[:] = st.var
            bn[name] = new
        return ModelParams(self.config, entries, bn)

    @property
    def n_scalars(self) -> int:
        total = 0
        for e in self.entries.values():
            total += e.re.data.size * 2 if isinstance(e, CTensor) else e.data.size
        return total

    @property
    def dtype(self):
        first = next(iter(self.entries.values()))
        return first.re.dtype if isinstance(first, CTensor) else first.dtype


@dataclass(frozen=True)
class ParamSpec:
    """Template row describing one named parameter tensor."""

    name: str
    shape: tuple
    is_complex: bool
    init: str  # "kaiming" | "zeros" | "ones"
    fan_in: int = 0


def param_template(config: ModelConfig) -> tuple:
    """Ordered parameter layout plus the list of (bn_state_name, width)."""
    cfg = config.resolved()
    rows: list = []
    bn: list = []

    def kaiming(name, shape, fan_in, is_complex):
        rows.append(ParamSpec(name, shape, is_complex, "kaiming", fan_in))

    def bn_block(name, width, is_complex_unused=False):
        rows.append(ParamSpec(name + ".scale", (1, width), False, "ones"))
        rows.append(ParamSpec(name + ".shift", (1, width), False, "zeros"))
        bn.append((name, width))

    for g, spec in enumerate(cfg.cgal):
        for d in range(spec.heads):
            base = f"dir_attn{g}.head{d}"
            kaiming(f"{base}.w", (spec.in_dim, spec.out_dim), spec.in_dim, True)
            kaiming(f"{base}.a_dst", (spec.out_dim, 1), spec.out_dim, True)
            kaiming(f"{base}.a_src", (spec.out_dim, 1), spec.out_dim, True)
            kaiming(f"{base}.w_skip", (cfg.cgal[0].in_dim, spec.out_dim), cfg.cgal[0].in_dim, True)

    for f in range(1, len(cfg.cfl)):
        kaiming(f"dir_fc{f}.w", (cfg.cfl[f - 1], cfg.cfl[f]), cfg.cfl[f - 1], True)
        rows.append(ParamSpec(f"dir_fc{f}.b", (1, cfg.cfl[f]), True, "zeros"))
        if f < len(cfg.cfl) - 1:
            bn_block(f"dir_fc{f}.bn_re", cfg.cfl[f])
            bn_block(f"dir_fc{f}.bn_im", cfg.cfl[f])

    for g, spec in enumerate(cfg.rgal):
        for d in range(spec.heads):
            base = f"pow_attn{g}.head{d}"
            kaiming(f"{base}.w", (spec.in_dim, spec.out_dim), spec.in_dim, False)
            kaiming(f"{base}.a_dst", (spec.out_dim, 1), spec.out_dim, False)
            kaiming(f"{base}.a_src", (spec.out_dim, 1), spec.out_dim, False)
            kaiming(f"{base}.a_edge", (spec.out_dim, 1), spec.out_dim, False)
            kaiming(f"{base}.w_edge", (1, spec.out_dim), 1, False)
        kaiming(f"pow_attn{g}.w_skip", (1, spec.out_dim), 1, False)

    for f in range(1, len(cfg.rfl)):
        kaiming(f"pow_fc{f}.w", (cfg.rfl[f - 1], cfg.rfl[f]), cfg.rfl[f - 1], False)
        rows.append(ParamSpec(f"pow_fc{f}.b", (1, cfg.rfl[f]), False, "zeros"))
        if f < len(cfg.rfl) - 1:
            bn_block(f"pow_fc{f}.bn", cfg.rfl[f])

    return rows, bn


def init_params(config: ModelConfig, seed: int = 0, dtype=np.float32) -> ModelParams:
    """Kaiming-style init, deterministic per (seed, tensor name); biases zero."""
    rows, bn = param_template(config)
    entries: dict = {}
    for spec in rows:
        if spec.init == "kaiming":
            if spec.is_complex:
                re, im = ad.init_complex(spec.shape, spec.fan_in, ad.rng_for(seed, spec.name), dtype)
                entries[spec.name] = CTensor(ad.parameter(re), ad.parameter(im))
            else:
                entries[spec.name] = ad.parameter(
                    ad.init_real(spec.shape, spec.fan_in, ad.rng_for(seed, spec.name), dtype)
                )
        else:
            fill = np.ones if spec.init == "ones" else np.zeros
            if spec.is_complex:
                entries[spec.name] = CTensor(
                    ad.parameter(fill(spec.shape, dtype)), ad.parameter(np.zeros(spec.shape, dtype))
                )
            else:
                entries[spec.name] = ad.parameter(fill(spec.shape, dtype))
    bn_states = {name: ad.BNState(width, dtype) for name, width in bn}
    return ModelParams(config, entries, bn_states)


# ---------------------------------------------------------------- features


def enhance_features(h: np.ndarray) -> np.ndarray:
    """Append direction-enhanced copies to each channel vector.

    The desired channel is duplicated.  Each interference channel h_kj gets the
    residual of h_kk after removing its projection onto h_kj, rescaled back to
    ||h_kj|| — large interference alignment collapses the new feature toward
    zero.  Accepts (K,K,N) or (B,K,K,N); returns (..., K, K, 2N).
    """
    h = np.asarray(h)
    k_idx = np.arange(h.shape[-3])
    hkk = h[..., k_idx, k_idx, :]  # (..., K, N)
    inner = np.einsum("...kjn,...kn->...kj", h.conj(), hkk)
    denom = np.einsum("...kn,...kn->...k", hkk.conj(), hkk).real
    coef = inner / denom[..., :, None]
    resid = hkk[..., :, None, :] - coef[..., None] * h
    resid_norm = np.linalg.norm(resid, axis=-1)
    target = np.linalg.norm(h, axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        scale = np.where(resid_norm < 1e-12, 0.0, target / np.where(resid_norm == 0, 1.0, resid_norm))
    hat = resid * scale[..., None]
    hat[..., k_idx, k_idx, :] = hkk
    return np.concatenate([h, hat], axis=-1)


def duplicate_features(h: np.ndarray) -> np.ndarray:
    """Enhancement-off fallback that keeps the 2N input width."""
    return np.concatenate([h, h], axis=-1)


@dataclass(frozen=True)
class DirectionGraph:
    """Attention mask and desired-row index map for the direction stage."""

    n_pairs: int
    use_sgr: bool
    mask: np.ndarray  # (K,K) per-subgraph, or (K²,K²) fully connected
    desired_rows: np.ndarray  # (K,) flat row index of each pair's desired node


def build_direction_graph(n_pairs: int, use_sgr: bool = True) -> DirectionGraph:
    if n_pairs < 1:
        raise ValueError(f"n_pairs must be >= 1, got {n_pairs}")
    k = n_pairs
    size = k if use_sgr else k * k
    mask = 1.0 - np.eye(size)
    desired = np.arange(k) * (k + 1)
    return DirectionGraph(k, use_sgr, mask, desired)


# --------------------------------------------------------------- attention


def masked_softmax(logits: Tensor, mask: np.ndarray, axis: int = -1) -> Tensor:
    """Softmax over the masked entries; all-masked rows yield all-zero weights."""
    m = np.asarray(mask, dtype=logits.dtype)
    mc = ad.constant(np.broadcast_to(m, logits.shape).copy())
    fill = ad.constant(((1.0 - m) * -1e9).astype(logits.dtype))
    masked = ad.add(ad.mul(logits, mc), fill)
    shift = ad.constant(masked.data.max(axis=axis, keepdims=True))  # detached
    e = ad.mul(ad.exp(ad.sub(masked, shift)), mc)
    denom = ad.tsum(e, axis=axis, keepdims=True)
    live = m.any(axis=axis, keepdims=True)
    guard = ad.constant((~np.broadcast_to(live, denom.shape)).astype(logits.dtype))
    return ad.div(e, ad.add(denom, guard))


def _real_cmatmul(r: Tensor, c: CTensor) -> CTensor:
    return CTensor(ad.matmul(r, c.re), ad.matmul(r, c.im))


def _cgal_layer(x: CTensor, x0: CTensor, graph: DirectionGraph, spec: GalSpec,
                params: ModelParams, layer: int, config: ModelConfig) -> CTensor:
    """One complex attention layer over (B, rows, F) features."""
    b, rows, fin = x.shape
    if fin != spec.in_dim:
        raise ValueError(f"direction layer {layer} expects {spec.in_dim} features, got {fin}")
    k = graph.n_pairs
    flat = lambda t: ad.reshape(t, (b * rows, t.data.shape[-1]))
    x_flat = ad.cmap(flat, x)
    x0_flat = ad.cmap(flat, x0)
    heads = []
    for d in range(spec.heads):
        base = f"dir_attn{layer}.head{d}"
        w = params.entries[f"{base}.w"]
        z_flat = ad.cmatmul(x_flat, w)
        z = ad.cmap(lambda t: ad.reshape(t, (b, rows, spec.out_dim)), z_flat)

        out = None
        if config.use_message_passing:
            s_src = ad.cmap(
                lambda t: ad.reshape(t, (b, rows)),
                ad.cmatmul(z_flat, params.entries[f"{base}.a_src"]),
            )
            if graph.use_sgr:
                z_des = ad.cmap(lambda t: ad.take(t, graph.desired_rows, axis=1), z)
                s_dst = ad.cmap(
                    lambda t: ad.reshape(t, (b, k, 1)),
                    ad.cmatmul(ad.cmap(lambda t: ad.reshape(t, (b * k, spec.out_dim)), z_des),
                               params.entries[f"{base}.a_dst"]),
                )
                src = ad.cmap(lambda t: ad.reshape(t, (b, k, k)), s_src)
            else:
                s_dst = ad.cmap(
                    lambda t: ad.reshape(t, (b, rows, 1)),
                    ad.cmatmul(z_flat, params.entries[f"{base}.a_dst"]),
                )
                src = ad.cmap(lambda t: ad.reshape(t, (b, 1, rows)), s_src)
            pre = ad.cadd(s_dst, src)
            logits = ad.cmodulus(ad.cleaky_relu(pre, config.leaky_slope))
            attn = masked_softmax(logits, graph.mask, axis=-1)
            if graph.use_sgr:
                attn4 = ad.reshape(attn, (b, k, 1, k))
                z4 = ad.cmap(lambda t: ad.reshape(t, (b, k, k, spec.out_dim)), z)
                agg = ad.cmap(lambda t: ad.reshape(t, (b, k, spec.out_dim)), _real_cmatmul(attn4, z4))
            else:
                agg = _real_cmatmul(attn, z)  # (B, K², F)
            out = agg
        if config.use_residual:
            r_flat = ad.cmatmul(x0_flat, params.entries[f"{base}.w_skip"])
            r = ad.cmap(lambda t: ad.reshape(t, (b, rows, spec.out_dim)), r_flat)
            if out is None:
                out = r
            elif graph.use_sgr:
                out = CTensor(
                    ad.add_at(r.re, agg.re, graph.desired_rows, axis=1),
                    ad.add_at(r.im, agg.im, graph.desired_rows, axis=1),
                )
            else:
                out = ad.cadd(agg, r)
        elif out is not None and graph.use_sgr:
            zero = ad.constant(np.zeros((b, rows, spec.out_dim), dtype=x.re.dtype))
            out = CTensor(
                ad.add_at(zero, agg.re, graph.desired_rows, axis=1),
                ad.add_at(zero, agg.im, graph.desired_rows, axis=1),
            )
        if out is None:  # neither message passing nor residual
            out = ad.cconstant(np.zeros((b, rows, spec.out_dim)), dtype=x.re.dtype)
        heads.append(ad.crelu(out))
    return CTensor(
        ad.concat([h.re for h in heads], axis=-1),
        ad.concat([h.im for h in heads], axis=-1),
    )


def cgat_forward(x0: CTensor, graph: DirectionGraph, params: ModelParams,
                 config: ModelConfig, training: bool = False) -> CTensor:
    """Run the complex attention stack; returns (B, rows, concat) features."""
    cfg = config.resolved()
    x = x0
    for g, spec in enumerate(cfg.cgal):
        x = _cgal_layer(x, x0, graph, spec, params, g, cfg)
    return x


def direction_head(x: CTensor, graph: DirectionGraph, params: ModelParams,
                   config: ModelConfig, training: bool = False) -> Tensor:
    """Complex fully-connected stack on desired rows -> alpha in (0,1)^K, float64."""
    cfg = config.resolved()
    b = x.shape[0]
    k = graph.n_pairs
    if x.shape[-1] != cfg.cfl[0]:
        raise ValueError(
            f"direction head expects width {cfg.cfl[0]}, got {x.shape[-1]}"
        )
    v = ad.cmap(lambda t: ad.take(t, graph.desired_rows, axis=1), x)
    v = ad.cmap(lambda t: ad.reshape(t, (b * k, t.data.shape[-1])), v)
    n_layers = len(cfg.cfl) - 1
    for f in range(1, n_layers + 1):
        w = params.entries[f"dir_fc{f}.w"]
        bias = params.entries[f"dir_fc{f}.b"]
        v = cadd_bias(ad.cmatmul(v, w), bias)
        if f < n_layers:
            v = ad.crelu(v)
            v = CTensor(
                ad.batch_norm(v.re, params.entries[f"dir_fc{f}.bn_re.scale"],
                              params.entries[f"dir_fc{f}.bn_re.shift"],
                              params.bn_states[f"dir_fc{f}.bn_re"], training),
                ad.batch_norm(v.im, params.entries[f"dir_fc{f}.bn_im.scale"],
                              params.entries[f"dir_fc{f}.bn_im.shift"],
                              params.bn_states[f"dir_fc{f}.bn_im"], training),
            )
    raw = ad.cast(v.re, np.float64)
    alpha = ad.sigmoid(ad.clip(raw, -SIGMOID_CLAMP, SIGMOID_CLAMP))
    return ad.reshape(alpha, (b, k))


def cadd_bias(v: CTensor, bias: CTensor) -> CTensor:
    return CTensor(ad.add(v.re, bias.re), ad.add(v.im, bias.im))


# -------------------------------------------------------------- power stage


def batched_gain_tables(h: np.ndarray):
    """Stack per-sample hybrid-direction projection tables over a batch."""
    zf, mrt, cross = zip(*(gain_tables(sample) for sample in h))
    return np.stack(zf), np.stack(mrt), np.stack(cross)


def gain_tensor(alpha: Tensor, tables) -> Tensor:
    """Effective gains H(alpha) on the tape from precomputed projection tables.

    alpha: (B,K) float64; tables: (zf_proj, mrt_proj, cross) numpy arrays shaped
    (B,K,K), (B,K,K), (B,K).  Returns (B,K,K) float64 where entry (k,j) is the
    gain produced by pair k's direction at receiver j.
    """
    zf_proj, mrt_proj, cross = tables
    b, k = alpha.shape
    a = ad.reshape(alpha, (b, k, 1))
    one_m = ad.sub(ad.constant(np.float64(1.0)), a)
    num_re = ad.add(ad.mul(a, ad.constant(zf_proj.real)), ad.mul(one_m, ad.constant(mrt_proj.real)))
    num_im = ad.add(ad.mul(a, ad.constant(zf_proj.imag)), ad.mul(one_m, ad.constant(mrt_proj.imag)))
    numer = ad.add(ad.mul(num_re, num_re), ad.mul(num_im, num_im))
    cross_c = ad.constant(cross.reshape(b, k, 1))
    denom = ad.add(
        ad.add(ad.mul(a, a), ad.mul(one_m, one_m)),
        ad.mul(ad.mul(ad.mul(a, one_m), cross_c), ad.constant(np.float64(2.0))),
    )
    return ad.div(numer, denom)


def _rgal_layer(x: Tensor, x0: Tensor, edge_src: Tensor, spec: GalSpec,
                params: ModelParams, layer: int, config: ModelConfig) -> Tensor:
    b, k, fin = x.shape
    if fin != spec.in_dim:
        raise ValueError(f"power layer {layer} expects {spec.in_dim} features, got {fin}")
    mask = 1.0 - np.eye(k)
    x_flat = ad.reshape(x, (b * k, fin))
    r = None
    if config.use_residual:
        r_flat = ad.matmul(ad.reshape(x0, (b * k, 1)), params.entries[f"pow_attn{layer}.w_skip"])
        r = ad.reshape(r_flat, (b, k, spec.out_dim))
    heads = []
    for d in range(spec.heads):
        base = f"pow_attn{layer}.head{d}"
        z_flat = ad.matmul(x_flat, params.entries[f"{base}.w"])
        z = ad.reshape(z_flat, (b, k, spec.out_dim))
        out = None
        if config.use_message_passing:
            s_dst = ad.reshape(ad.matmul(z_flat, params.entries[f"{base}.a_dst"]), (b, k, 1))
            s_src = ad.reshape(ad.matmul(z_flat, params.entries[f"{base}.a_src"]), (b, 1, k))
            # scalar edges: a_edge^T (e * w_edge) collapses to e times one scalar
            edge_coef = ad.matmul(params.entries[f"{base}.w_edge"], params.entries[f"{base}.a_edge"])
            s_edge = ad.mul(edge_src, ad.reshape(edge_coef, (1, 1, 1)))
            pre = ad.add(ad.add(s_dst, s_src), s_edge)
            logits = ad.leaky_relu(pre, config.leaky_slope)
            attn = masked_softmax(logits, mask, axis=-1)
            out = ad.matmul(attn, z)
        if r is not None:
            out = r if out is None else ad.add(out, r)
        if out is None:
            out = ad.constant(np.zeros((b, k, spec.out_dim), dtype=x.dtype))
        heads.append(ad.relu(out))
    return ad.concat(heads, axis=-1)


def rgat_forward(gains: Tensor, params: ModelParams, config: ModelConfig,
                 training: bool = False) -> Tensor:
    """Run the power-stage attention stack on a (B,K,K) gain matrix."""
    cfg = config.resolved()
    b, k, _ = gains.shape
    diag = np.arange(k) * (k + 1)
    node0 = ad.reshape(ad.take(ad.reshape(gains, (b, k * k)), diag, axis=1), (b, k, 1))
    edge_src = gains if cfg.edge_orientation == "outgoing" else ad.transpose(gains, (0, 2, 1))
    x = node0
    for g, spec in enumerate(cfg.rgal):
        x = _rgal_layer(x, node0, edge_src, spec, params, g, cfg)
    return x


def power_head(x: Tensor, params: ModelParams, config: ModelConfig,
               p_max: float, training: bool = False) -> Tensor:
    """Real fully-connected stack -> p in (0, p_max)^K, float64."""
    cfg = config.resolved()
    b, k, fin = x.shape
    if fin != cfg.rfl[0]:
        raise ValueError(f"power head expects width {cfg.rfl[0]}, got {fin}")
    v = ad.reshape(x, (b * k, fin))
    n_layers = len(cfg.rfl) - 1
    for f in range(1, n_layers + 1):
        v = ad.add(ad.matmul(v, params.entries[f"pow_fc{f}.w"]), params.entries[f"pow_fc{f}.b"])
        if f < n_layers:
            v = ad.relu(v)
            v = ad.batch_norm(v, params.entries[f"pow_fc{f}.bn.scale"],
                              params.entries[f"pow_fc{f}.bn.shift"],
                              params.bn_states[f"pow_fc{f}.bn"], training)
    raw = ad.cast(v, np.float64)
    p = ad.sigmoid(ad.clip(raw, -SIGMOID_CLAMP, SIGMOID_CLAMP))
    return ad.reshape(ad.mul(p, ad.constant(np.float64(p_max))), (b, k))


# ----------------------------------------------------------------- forward


@dataclass
class ForwardOut:
    """Tape outputs of a batched forward pass plus loss-path constants."""

    alpha: Tensor  # (B,K) float64 in (0,1)
    p: Tensor  # (B,K) float64 in (0,p_max)
    gains: Tensor  # (B,K,K) float64


def forward_batch(h: np.ndarray, params: ModelParams, system: SystemConfig,
                  training: bool = False) -> ForwardOut:
    """Batched tape forward: channels (B,K,K,N) -> alpha, p, effective gains."""
    config = params.config.resolved()
    h = np.asarray(h)
    if h.ndim != 4:
        raise ValueError(f"expected batched channels (B,K,K,N), got shape {h.shape}")
    b, k = h.shape[0], h.shape[1]
    feats = enhance_features(h) if config.use_feature_enhancement else duplicate_features(h)
    if feats.shape[-1] != config.cgal[0].in_dim:
        raise ValueError(
            f"feature width {feats.shape[-1]} does not match first direction layer "
            f"input {config.cgal[0].in_dim}"
        )
    dtype = params.dtype
    graph = build_direction_graph(k, config.use_sgr)
    x0 = CTensor(
        ad.constant(feats.real.reshape(b, k * k, -1).astype(dtype)),
        ad.constant(feats.imag.reshape(b, k * k, -1).astype(dtype)),
    )
    xg = cgat_forward(x0, graph, params, config, training)
    alpha = direction_head(xg, graph, params, config, training)

    tables = batched_gain_tables(h)
    gains = gain_tensor(alpha, tables)
    xp = rgat_forward(ad.cast(gains, dtype), params, config, training)
    p = power_head(xp, params, config, system.p_max, training)
    return ForwardOut(alpha=alpha, p=p, gains=gains)


def icgnn_forward(sample: np.ndarray, params: ModelParams, system: SystemConfig):
    """Eval-mode single-sample forward returning numpy (alpha, p, beamformers)."""
    from .beamforming import recover_beamformers

    sample = np.asarray(sample)
    if sample.ndim != 3:
        raise ValueError(f"expected one sample (K,K,N), got shape {sample.shape}")
    out = forward_batch(sample[None], params.detached(), system, training=False)
    alpha = out.alpha.data[0]
    p = out.p.data[0]
    w = recover_beamformers(sample, alpha, p)
    return alpha, p, w
