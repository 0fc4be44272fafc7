"""Prototype-bridged attention: aggregation into a small learnable prototype
bank followed by diffusion back into a slot sequence, with the two
complementarity front-ends (elementwise product / absolute difference,
pooled at three granularities).  A dense softmax-attention baseline with the
same front-end and residual wrapper is provided for scaling comparisons.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Parameter, Rng, Tensor

INF_PROTOTYPES = math.inf

COMP_OPS = ("consistency", "difference", "identity")


@dataclass
class AdaConfig:
    num_prototypes: float = 4  # math.inf = one prototype per source token
    proto_dim: int = 16
    feat_dim: int = 16
    ffn_expansion: int = 2
    comp_op: str = "consistency"

    def __post_init__(self) -> None:
        if self.comp_op not in COMP_OPS:
            raise ValueError(f"comp_op must be one of {COMP_OPS}")
        if self.num_prototypes != INF_PROTOTYPES and int(self.num_prototypes) < 1:
            raise ValueError("num_prototypes must be >= 1 or inf")
        if self.proto_dim < 1 or self.feat_dim < 1:
            raise ValueError("dims must be >= 1")

    def resolve_k(self, num_source_tokens: int) -> int:
        if self.num_prototypes == INF_PROTOTYPES:
            return num_source_tokens
        return int(self.num_prototypes)


@dataclass
class SourcePair:
    """Two aligned token maps [L, C] with their spatial layout, L = h*w."""

    f1: Tensor
    f2: Tensor
    h: int
    w: int

    def __post_init__(self) -> None:
        if self.f1.shape != self.f2.shape:
            raise T.ShapeError(f"source shapes differ: {self.f1.shape} vs {self.f2.shape}")
        if self.f1.shape[0] != self.h * self.w:
            raise T.ShapeError(
                f"token count {self.f1.shape[0]} != {self.h}x{self.w}"
            )

    @property
    def length(self) -> int:
        return self.f1.shape[0]

    def swapped(self) -> "SourcePair":
        return SourcePair(self.f2, self.f1, self.h, self.w)


class ParamRegistry:
    """Ordered name -> Parameter map shared by all weight containers."""

    def __init__(self) -> None:
        self._params: dict[str, Parameter] = {}

    def make(self, rng: Rng, name: str, shape, init: str, dtype) -> Parameter:
        if name in self._params:
            raise ValueError(f"duplicate parameter {name}")
        if init == "trunc_normal":
            data = rng.trunc_normal(shape, std=0.02, dtype=dtype)
        elif init == "zeros":
            data = np.zeros(shape, dtype=dtype)
        elif init == "ones":
            data = np.ones(shape, dtype=dtype)
        else:
            raise ValueError(init)
        p = Parameter(Tensor(data), name)
        self._params[name] = p
        return p

    def all(self) -> list[Parameter]:
        return list(self._params.values())

    def named(self) -> dict[str, Parameter]:
        return dict(self._params)


class Ffn:
    """norm -> linear(dim -> r*dim) -> GELU -> linear(r*dim -> dim)."""

    def __init__(self, reg: ParamRegistry, rng: Rng, dim: int, expansion: int, name: str, dtype) -> None:
        hid = expansion * dim
        self.ln_g = reg.make(rng, f"{name}.ln_g", (dim,), "ones", dtype)
        self.ln_b = reg.make(rng, f"{name}.ln_b", (dim,), "zeros", dtype)
        self.w1 = reg.make(rng, f"{name}.w1", (dim, hid), "trunc_normal", dtype)
        self.b1 = reg.make(rng, f"{name}.b1", (hid,), "zeros", dtype)
        self.w2 = reg.make(rng, f"{name}.w2", (hid, dim), "trunc_normal", dtype)
        self.b2 = reg.make(rng, f"{name}.b2", (dim,), "zeros", dtype)

    def __call__(self, x: Tensor) -> Tensor:
        h = T.layer_norm(x, self.ln_g.value, self.ln_b.value)
        h = T.add_bias(T.matmul(h, self.w1.value), self.b1.value)
        h = T.gelu(h)
        return T.add_bias(T.matmul(h, self.w2.value), self.b2.value)


class CompWeights:
    """Normalization + projection shared by both pooled granularities."""

    def __init__(self, reg: ParamRegistry, rng: Rng, feat_dim: int, proto_dim: int, name: str, dtype) -> None:
        cin = 3 * feat_dim
        self.ln_g = reg.make(rng, f"{name}.ln_g", (cin,), "ones", dtype)
        self.ln_b = reg.make(rng, f"{name}.ln_b", (cin,), "zeros", dtype)
        self.proj = reg.make(rng, f"{name}.proj", (cin, 2 * proto_dim), "trunc_normal", dtype)
        self.bias = reg.make(rng, f"{name}.bias", (2 * proto_dim,), "zeros", dtype)
        self.proto_dim = proto_dim


def _comp_pyramid(w: CompWeights, base: Tensor, h: int, wd: int) -> tuple[Tensor, Tensor]:
    """Pool the base map at windows {1, 3, 5}, project, split into (key, value)."""
    c = base.shape[-1]
    grid = T.reshape(base, (h, wd, c))
    p1 = T.avg_pool_2d(grid, 3)
    p2 = T.avg_pool_2d(grid, 5)
    stack = T.concat_channels([grid, p1, p2])
    flat = T.reshape(stack, (h * wd, 3 * c))
    flat = T.layer_norm(flat, w.ln_g.value, w.ln_b.value)
    flat = T.add_bias(T.matmul(flat, w.proj.value), w.bias.value)
    d = w.proto_dim
    return T.slice_channels(flat, 0, d), T.slice_channels(flat, d, 2 * d)


def comp_consistency(w: CompWeights, s: SourcePair) -> tuple[Tensor, Tensor]:
    return _comp_pyramid(w, T.mul(s.f1, s.f2), s.h, s.w)


def comp_difference(w: CompWeights, s: SourcePair) -> tuple[Tensor, Tensor]:
    return _comp_pyramid(w, T.absdiff(s.f1, s.f2), s.h, s.w)


class ProtoAttention:
    """One aggregation-diffusion unit; all learnable state lives here.

    The gate vector is zero at construction, so the unit is exactly
    slot + FFN(slot) until training moves the gate.
    """

    def __init__(
        self,
        cfg: AdaConfig,
        reg: ParamRegistry,
        rng: Rng,
        num_source_tokens: int | None = None,
        name: str = "ada",
        dtype=np.float32,
    ) -> None:
        k = cfg.resolve_k(num_source_tokens) if num_source_tokens is not None else cfg.resolve_k(0)
        if k < 1:
            raise ValueError("resolved prototype count must be >= 1 (pass num_source_tokens for inf)")
        d, c, r = cfg.proto_dim, cfg.feat_dim, cfg.ffn_expansion
        self.cfg = cfg
        self.k = k
        self.prototypes = reg.make(rng, f"{name}.prototypes", (k, d), "trunc_normal", dtype)
        self.w_q_fw = reg.make(rng, f"{name}.w_q_fw", (d, d), "trunc_normal", dtype)
        self.w_o_fw = reg.make(rng, f"{name}.w_o_fw", (d, d), "trunc_normal", dtype)
        self.ffn_fw = Ffn(reg, rng, d, r, f"{name}.ffn_fw", dtype)
        self.w_q_bw = reg.make(rng, f"{name}.w_q_bw", (c, d), "trunc_normal", dtype)
        self.w_k_bw = reg.make(rng, f"{name}.w_k_bw", (d, d), "trunc_normal", dtype)
        self.w_v_bw = reg.make(rng, f"{name}.w_v_bw", (d, d), "trunc_normal", dtype)
        self.w_o_bw = reg.make(rng, f"{name}.w_o_bw", (d, c), "trunc_normal", dtype)
        self.gate = reg.make(rng, f"{name}.gate", (c,), "zeros", dtype)
        self.ffn_bw = Ffn(reg, rng, c, r, f"{name}.ffn_bw", dtype)
        if cfg.comp_op == "identity":
            if d != c:
                raise ValueError("identity comp_op requires proto_dim == feat_dim")
            self.comp = None
        else:
            self.comp = CompWeights(reg, rng, c, d, f"{name}.comp", dtype)

    # -- stages ------------------------------------------------------------

    def comp_embed(self, s: SourcePair) -> tuple[Tensor, Tensor]:
        if self.cfg.comp_op == "consistency":
            assert self.comp is not None
            return comp_consistency(self.comp, s)
        if self.cfg.comp_op == "difference":
            assert self.comp is not None
            return comp_difference(self.comp, s)
        return s.f1, s.f1  # identity: raw first-stream rows as key and value

    def aggregate(self, k_fw: Tensor, v_fw: Tensor) -> Tensor:
        """Absorb source tokens into the prototype bank (convex token mixtures)."""
        q_fw = T.matmul(self.prototypes.value, self.w_q_fw.value)
        sim = T.cosine_rows(q_fw, k_fw)  # [K, L]
        att = T.softmax_rows(sim)  # normalize over tokens per prototype
        agg = T.matmul(T.matmul(att, v_fw), self.w_o_fw.value)
        return self.ffn_fw(agg)

    def diffuse(self, p_tilde: Tensor, slot: Tensor) -> Tensor:
        """Reconstruct slot tokens as gated mixtures of updated prototypes."""
        q_bw = T.matmul(slot, self.w_q_bw.value)
        k_bw = T.matmul(p_tilde, self.w_k_bw.value)
        sim = T.cosine_rows(q_bw, k_bw)  # [L', K]
        att = T.softmax_rows(sim)  # normalize over prototypes per token
        v_bw = T.matmul(p_tilde, self.w_v_bw.value)
        z = T.matmul(T.matmul(att, v_bw), self.w_o_bw.value)
        gated = T.add(slot, T.scale_channels(z, self.gate.value))
        return T.add(slot, self.ffn_bw(gated))

    def forward(self, s: SourcePair, slot: Tensor) -> Tensor:
        k_fw, v_fw = self.comp_embed(s)
        p_tilde = self.aggregate(k_fw, v_fw)
        return self.diffuse(p_tilde, slot)


class StdAttention:
    """Dense single-head scaled-dot-product baseline with the same
    complementarity front-end and residual + FFN wrapper."""

    def __init__(self, cfg: AdaConfig, reg: ParamRegistry, rng: Rng, name: str = "std", dtype=np.float32) -> None:
        d, c, r = cfg.proto_dim, cfg.feat_dim, cfg.ffn_expansion
        self.cfg = cfg
        self.w_q = reg.make(rng, f"{name}.w_q", (c, d), "trunc_normal", dtype)
        self.w_o = reg.make(rng, f"{name}.w_o", (d, c), "trunc_normal", dtype)
        self.gate = reg.make(rng, f"{name}.gate", (c,), "zeros", dtype)
        self.ffn = Ffn(reg, rng, c, r, f"{name}.ffn", dtype)
        if cfg.comp_op == "identity":
            if d != c:
                raise ValueError("identity comp_op requires proto_dim == feat_dim")
            self.comp = None
        else:
            self.comp = CompWeights(reg, rng, c, d, f"{name}.comp", dtype)

    def comp_embed(self, s: SourcePair) -> tuple[Tensor, Tensor]:
        if self.cfg.comp_op == "consistency":
            assert self.comp is not None
            return comp_consistency(self.comp, s)
        if self.cfg.comp_op == "difference":
            assert self.comp is not None
            return comp_difference(self.comp, s)
        return s.f1, s.f1

    def forward(self, s: SourcePair, slot: Tensor) -> Tensor:
        keys, values = self.comp_embed(s)
        q = T.matmul(slot, self.w_q.value)
        scores = T.mul_scalar(T.matmul(q, T.transpose(keys)), 1.0 / math.sqrt(self.cfg.proto_dim))
        del q
        att = T.softmax_rows(scores)  # [L', L]
        del scores
        z = T.matmul(att, values)
        del att, values
        z = T.matmul(z, self.w_o.value)
        gated = T.add(slot, T.scale_channels(z, self.gate.value))
        return T.add(slot, self.ffn(gated))


def build_unit(cfg: AdaConfig, rng: Rng, num_source_tokens: int | None = None, dtype=np.float32) -> ProtoAttention:
    """Standalone unit with its own registry (tests and benchmarks)."""
    reg = ParamRegistry()
    unit = ProtoAttention(cfg, reg, rng, num_source_tokens=num_source_tokens, dtype=dtype)
    unit.registry = reg  # type: ignore[attr-defined]
    return unit


def build_std(cfg: AdaConfig, rng: Rng, dtype=np.float32) -> StdAttention:
    reg = ParamRegistry()
    unit = StdAttention(cfg, reg, rng, dtype=dtype)
    unit.registry = reg  # type: ignore[attr-defined]
    return unit


# ---------------------------------------------------------------------------
# analytic cost model (multiply-add counts, documented term by term)
# ---------------------------------------------------------------------------


def _ffn_flops(n: int, dim: int, r: int) -> int:
    # norm ~5 ops/elem, two projections, ~8 ops/elem for the activation
    hid = r * dim
    return n * (5 * dim + dim * hid + 8 * hid + hid * dim)


def _comp_flops(L: int, C: int, D: int) -> int:
    # product/diff, two pooled maps (integral-image adds ~4/elem each),
    # norm over 3C, projection 3C -> 2D
    return L * C + 2 * (4 * L * C) + 5 * L * 3 * C + L * 3 * C * 2 * D + L * 2 * D


def flops_of(
    variant: str,
    L: int,
    L_slot: int,
    D: int,
    C: int,
    K: int | None = None,
    expansion: int = 2,
    comp: bool = True,
) -> dict[str, float]:
    """Closed-form multiply-add counts per stage.

    Returns a breakdown with ``token_part`` (proportional to L / L_slot at
    fixed K, D, C) and ``proto_part`` (independent of token count).  For the
    "ada" variant token_part + proto_part == total; for "std" the remainder
    of ``total`` is the quadratic score/mixing term.
    """
    if min(L, L_slot, D, C) < 1:
        raise ValueError("extents must be positive")
    comp_ops = _comp_flops(L, C, D) if comp else 0
    if variant == "ada":
        if K is None or K < 1:
            raise ValueError("ada variant needs K >= 1")
        agg_tokens = L * D + 2 * K * L * D + 3 * K * L  # norms, cosine, softmax, mix
        agg_proto = 2 * K * D * D + K * D + _ffn_flops(K, D, expansion)
        diff_tokens = (
            L_slot * C * D  # slot query projection
            + L_slot * D  # query norms
            + L_slot * K * D  # cosine
            + 3 * L_slot * K  # softmax
            + L_slot * K * D  # prototype mixing
            + L_slot * D * C  # output projection
            + 4 * L_slot * C  # gate + residuals
            + _ffn_flops(L_slot, C, expansion)
        )
        diff_proto = 2 * K * D * D + K * D
        token_part = comp_ops + agg_tokens + diff_tokens
        proto_part = agg_proto + diff_proto
        return {
            "comp_ops": float(comp_ops),
            "aggregation": float(agg_tokens + agg_proto),
            "diffusion": float(diff_tokens + diff_proto),
            "token_part": float(token_part),
            "proto_part": float(proto_part),
            "total": float(token_part + proto_part),
        }
    if variant == "std":
        attention = (
            L_slot * C * D  # query projection
            + L_slot * L * D  # scores
            + 3 * L_slot * L  # softmax
            + L_slot * L * D  # value mixing
            + L_slot * D * C  # output projection
        )
        wrapper = 4 * L_slot * C + _ffn_flops(L_slot, C, expansion)
        total = comp_ops + attention + wrapper
        return {
            "comp_ops": float(comp_ops),
            "attention": float(attention),
            "wrapper": float(wrapper),
            "token_part": float(comp_ops + wrapper + 2 * L_slot * C * D),
            "proto_part": 0.0,
            "total": float(total),
        }
    raise ValueError(f"unknown variant {variant!r}")


def params_of(unit) -> int:
    reg: ParamRegistry = unit.registry  # type: ignore[attr-defined]
    return sum(p.value.data.size for p in reg.all())
