"""1D UNet denoiser: residual conv blocks, bottleneck attention, sinusoidal
step embedding, and a wide & deep encoder for trip conditions.

Parameters live in a flat name -> Tensor dict; the names and shapes are the
checkpoint contract. All forward math runs through the autodiff layer kit in
``trajdiff.tensor``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tz
from .tensor import Tensor

NUM_DEPARTURE_SLOTS = 288
NUM_GRID_CELLS = 256
NUM_NUMERIC_ATTRS = 4  # travel km, avg move km, travel time s, raw point count


# ---------------------------------------------------------------------------
# conditions
# ---------------------------------------------------------------------------

@dataclass
class ConditionVector:
    """Motion attributes of one trip: z-scored numerics plus categoricals.

    The null variant is the zero-information condition used for the
    unconditional branch; its embedding is exactly the zero vector.
    """

    numeric: np.ndarray = field(default_factory=lambda: np.zeros(NUM_NUMERIC_ATTRS, dtype=np.float32))
    departure_slot: int = 0
    origin_cell: int = 0
    dest_cell: int = 0
    is_null: bool = False

    def __post_init__(self):
        self.numeric = np.asarray(self.numeric, dtype=np.float32)
        if self.numeric.shape != (NUM_NUMERIC_ATTRS,):
            raise ValueError(f"numeric attributes must have shape ({NUM_NUMERIC_ATTRS},)")
        if not 0 <= self.departure_slot < NUM_DEPARTURE_SLOTS:
            raise ValueError(f"departure slot {self.departure_slot} outside [0, {NUM_DEPARTURE_SLOTS})")
        if not 0 <= self.origin_cell < NUM_GRID_CELLS:
            raise ValueError(f"origin cell {self.origin_cell} outside [0, {NUM_GRID_CELLS})")
        if not 0 <= self.dest_cell < NUM_GRID_CELLS:
            raise ValueError(f"destination cell {self.dest_cell} outside [0, {NUM_GRID_CELLS})")

    @classmethod
    def null(cls) -> "ConditionVector":
        return cls(is_null=True)


class ConditionBatch:
    """Column-wise batch of ConditionVectors."""

    def __init__(self, numeric: np.ndarray, slot: np.ndarray, origin: np.ndarray,
                 dest: np.ndarray, is_null: np.ndarray):
        self.numeric = np.asarray(numeric, dtype=np.float32)
        self.slot = np.asarray(slot, dtype=np.int64)
        self.origin = np.asarray(origin, dtype=np.int64)
        self.dest = np.asarray(dest, dtype=np.int64)
        self.is_null = np.asarray(is_null, dtype=bool)
        n = len(self.is_null)
        if not (self.numeric.shape == (n, NUM_NUMERIC_ATTRS) and self.slot.shape == (n,)
                and self.origin.shape == (n,) and self.dest.shape == (n,)):
            raise ValueError("inconsistent condition batch columns")

    def __len__(self) -> int:
        return len(self.is_null)

    @classmethod
    def from_vectors(cls, conds) -> "ConditionBatch":
        conds = list(conds)
        return cls(
            numeric=np.stack([c.numeric for c in conds]) if conds else np.zeros((0, NUM_NUMERIC_ATTRS), np.float32),
            slot=np.array([c.departure_slot for c in conds], dtype=np.int64),
            origin=np.array([c.origin_cell for c in conds], dtype=np.int64),
            dest=np.array([c.dest_cell for c in conds], dtype=np.int64),
            is_null=np.array([c.is_null for c in conds], dtype=bool),
        )

    @classmethod
    def null(cls, n: int) -> "ConditionBatch":
        return cls(
            numeric=np.zeros((n, NUM_NUMERIC_ATTRS), np.float32),
            slot=np.zeros(n, np.int64), origin=np.zeros(n, np.int64),
            dest=np.zeros(n, np.int64), is_null=np.ones(n, bool),
        )

    def take(self, idx: np.ndarray) -> "ConditionBatch":
        return ConditionBatch(self.numeric[idx], self.slot[idx], self.origin[idx],
                              self.dest[idx], self.is_null[idx])

    def with_dropout(self, rng: np.random.Generator, p: float) -> "ConditionBatch":
        """Replace each condition by the null condition with probability p."""
        drop = rng.random(len(self)) < p
        out = ConditionBatch(self.numeric.copy(), self.slot.copy(), self.origin.copy(),
                             self.dest.copy(), self.is_null | drop)
        out.numeric[drop] = 0.0
        out.slot[drop] = 0
        out.origin[drop] = 0
        out.dest[drop] = 0
        return out


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrajUNetConfig:
    length: int = 64
    in_channels: int = 2
    base_channels: int = 16
    channel_multipliers: tuple[int, ...] = (1, 2, 2, 4)
    resnet_blocks_per_level: int = 2
    time_embed_dim: int = 128
    cond_embed_dim: int = 128
    groups: int = 8

    def __post_init__(self):
        levels = len(self.channel_multipliers)
        if levels < 1:
            raise ValueError("need at least one sampling level")
        down = 2 ** (levels - 1)
        if self.length % down != 0 or self.length < 2 * down:
            raise ValueError(f"length {self.length} incompatible with {levels} levels "
                             f"(must be a multiple of {down})")
        if self.time_embed_dim % 2 != 0:
            raise ValueError("time embedding dimension must be even")
        if self.cond_embed_dim != self.time_embed_dim:
            raise ValueError("condition and time embeddings must share one dimension")

    @property
    def levels(self) -> int:
        return len(self.channel_multipliers)

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(self.base_channels * m for m in self.channel_multipliers)

    def to_dict(self) -> dict:
        return {
            "length": self.length, "in_channels": self.in_channels,
            "base_channels": self.base_channels,
            "channel_multipliers": list(self.channel_multipliers),
            "resnet_blocks_per_level": self.resnet_blocks_per_level,
            "time_embed_dim": self.time_embed_dim, "cond_embed_dim": self.cond_embed_dim,
            "groups": self.groups,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrajUNetConfig":
        d = dict(d)
        d["channel_multipliers"] = tuple(d["channel_multipliers"])
        return cls(**d)


def _gn_groups(groups: int, channels: int) -> int:
    return math.gcd(groups, channels)


# ---------------------------------------------------------------------------
# embeddings
# ---------------------------------------------------------------------------

def sinusoidal_time_embedding(t, dim: int) -> np.ndarray:
    """Deterministic step encoding: sin(t / 10000^(2i/dim)) then cos of the same.

    Accepts a scalar step or an array of steps; returns [dim] or [B, dim].
    """
    if dim % 2 != 0:
        raise ValueError("embedding dimension must be even")
    t = np.asarray(t, dtype=np.float64)
    scalar = t.ndim == 0
    t = np.atleast_1d(t)
    i = np.arange(dim // 2, dtype=np.float64)
    freq = np.power(10000.0, -2.0 * i / dim)
    ang = t[:, None] * freq[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(np.float32)
    return emb[0] if scalar else emb


def time_mlp(emb: Tensor, params: dict, prefix: str = "time_mlp") -> Tensor:
    h = tz.linear(emb, params[f"{prefix}.fc1.W"], params[f"{prefix}.fc1.b"])
    h = tz.silu(h)
    return tz.linear(h, params[f"{prefix}.fc2.W"], params[f"{prefix}.fc2.b"])


def wide_deep_embed(cond: ConditionBatch, params: dict, prefix: str = "cond") -> Tensor:
    """Wide linear path over numerics plus deep embedding-table path over
    categoricals, summed into one vector; null conditions map to exact zero."""
    wide = tz.linear(Tensor(cond.numeric), params[f"{prefix}.wide.W"], params[f"{prefix}.wide.b"])
    e_slot = tz.embedding(params[f"{prefix}.deep.slot"], cond.slot)
    e_org = tz.embedding(params[f"{prefix}.deep.origin"], cond.origin)
    e_dst = tz.embedding(params[f"{prefix}.deep.dest"], cond.dest)
    deep = tz.concat_channels([e_slot, e_org, e_dst])
    deep = tz.linear(deep, params[f"{prefix}.deep.fc1.W"], params[f"{prefix}.deep.fc1.b"])
    deep = tz.silu(deep)
    deep = tz.linear(deep, params[f"{prefix}.deep.fc2.W"], params[f"{prefix}.deep.fc2.b"])
    out = tz.add(wide, deep)
    keep = (~cond.is_null).astype(np.float32)[:, None]
    return tz.mul(out, Tensor(keep))


# ---------------------------------------------------------------------------
# blocks
# ---------------------------------------------------------------------------

def resnet_block(x: Tensor, emb: Tensor, params: dict, prefix: str, groups: int) -> Tensor:
    """GN -> SiLU -> conv, add projected embedding, GN -> SiLU -> conv, skip.

    Channel change happens in the first conv; the skip is identity when the
    channel count is preserved, else a kernel-1 conv.
    """
    c_in = x.shape[1]
    c_out = params[f"{prefix}.conv1.w"].shape[0]
    h = tz.group_norm(x, _gn_groups(groups, c_in), params[f"{prefix}.gn1.gamma"], params[f"{prefix}.gn1.beta"])
    h = tz.silu(h)
    h = tz.conv1d(h, params[f"{prefix}.conv1.w"], params[f"{prefix}.conv1.b"])
    inj = tz.linear(emb, params[f"{prefix}.emb.W"], params[f"{prefix}.emb.b"])
    h = tz.add(h, tz.reshape(inj, (inj.shape[0], c_out, 1)))
    h = tz.group_norm(h, _gn_groups(groups, c_out), params[f"{prefix}.gn2.gamma"], params[f"{prefix}.gn2.beta"])
    h = tz.silu(h)
    h = tz.conv1d(h, params[f"{prefix}.conv2.w"], params[f"{prefix}.conv2.b"])
    if c_in != c_out:
        x = tz.conv1d(x, params[f"{prefix}.skip.w"], params[f"{prefix}.skip.b"])
    return tz.add(h, x)


def attention_weights(x: Tensor, wq: Tensor, wk: Tensor) -> Tensor:
    """Row-stochastic attention matrix [B, L, L] over the length axis."""
    d = x.shape[1]
    q = tz.conv1d(x, wq)
    k = tz.conv1d(x, wk)
    scores = tz.bmm(tz.transpose_last2(q), k)
    scores = tz.mul(scores, 1.0 / math.sqrt(d))
    return tz.softmax_lastdim(scores)


def attention(x: Tensor, wq: Tensor, wk: Tensor, wv: Tensor) -> Tensor:
    """Single-head residual attention over positions: x + softmax(QK'/sqrt(d)) V."""
    a = attention_weights(x, wq, wk)
    v = tz.conv1d(x, wv)
    out = tz.bmm(v, tz.transpose_last2(a))
    return tz.add(x, out)


def middle_attention(x: Tensor, emb: Tensor, params: dict, prefix: str, groups: int) -> Tensor:
    """Bottleneck: Resnet block, residual attention, Resnet block."""
    h = resnet_block(x, emb, params, f"{prefix}.res1", groups)
    h = attention(h, params[f"{prefix}.attn.wq"], params[f"{prefix}.attn.wk"], params[f"{prefix}.attn.wv"])
    return resnet_block(h, emb, params, f"{prefix}.res2", groups)


# ---------------------------------------------------------------------------
# parameter construction
# ---------------------------------------------------------------------------

def _conv_init(rng, c_out: int, c_in: int, k: int) -> Tensor:
    std = math.sqrt(2.0 / (c_in * k))
    return Tensor(rng.normal(0.0, std, size=(c_out, c_in, k)).astype(np.float32), requires_grad=True)


def _linear_init(rng, n_in: int, n_out: int) -> Tensor:
    std = math.sqrt(2.0 / n_in)
    return Tensor(rng.normal(0.0, std, size=(n_in, n_out)).astype(np.float32), requires_grad=True)


def _zeros(*shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)


def _ones(*shape) -> Tensor:
    return Tensor(np.ones(shape, dtype=np.float32), requires_grad=True)


def init_params(config: TrajUNetConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Build the named parameter set for a config. Names are the checkpoint contract."""
    p: dict[str, Tensor] = {}
    emb_dim = config.time_embed_dim

    def add_resnet(prefix: str, c_in: int, c_out: int) -> None:
        p[f"{prefix}.gn1.gamma"] = _ones(c_in)
        p[f"{prefix}.gn1.beta"] = _zeros(c_in)
        p[f"{prefix}.conv1.w"] = _conv_init(rng, c_out, c_in, 3)
        p[f"{prefix}.conv1.b"] = _zeros(c_out)
        p[f"{prefix}.emb.W"] = _linear_init(rng, emb_dim, c_out)
        p[f"{prefix}.emb.b"] = _zeros(c_out)
        p[f"{prefix}.gn2.gamma"] = _ones(c_out)
        p[f"{prefix}.gn2.beta"] = _zeros(c_out)
        # zero-init: the block starts as skip + embedding injection only
        p[f"{prefix}.conv2.w"] = _zeros(c_out, c_out, 3)
        p[f"{prefix}.conv2.b"] = _zeros(c_out)
        if c_in != c_out:
            p[f"{prefix}.skip.w"] = _conv_init(rng, c_out, c_in, 1)
            p[f"{prefix}.skip.b"] = _zeros(c_out)

    p["time_mlp.fc1.W"] = _linear_init(rng, emb_dim, emb_dim)
    p["time_mlp.fc1.b"] = _zeros(emb_dim)
    p["time_mlp.fc2.W"] = _linear_init(rng, emb_dim, emb_dim)
    p["time_mlp.fc2.b"] = _zeros(emb_dim)

    p["cond.wide.W"] = _linear_init(rng, NUM_NUMERIC_ATTRS, emb_dim)
    p["cond.wide.b"] = _zeros(emb_dim)
    # table rows start at unit-ish scale so the categorical (spatial) signal
    # is not drowned out by the wide numeric path early in training
    for name, vocab in (("slot", NUM_DEPARTURE_SLOTS), ("origin", NUM_GRID_CELLS), ("dest", NUM_GRID_CELLS)):
        p[f"cond.deep.{name}"] = Tensor(rng.normal(0.0, 0.3, size=(vocab, emb_dim)).astype(np.float32),
                                        requires_grad=True)
    p["cond.deep.fc1.W"] = _linear_init(rng, 3 * emb_dim, emb_dim)
    p["cond.deep.fc1.b"] = _zeros(emb_dim)
    p["cond.deep.fc2.W"] = _linear_init(rng, emb_dim, emb_dim)
    p["cond.deep.fc2.b"] = _zeros(emb_dim)

    chans = config.channels
    p["stem.w"] = _conv_init(rng, chans[0], config.in_channels, 3)
    p["stem.b"] = _zeros(chans[0])

    c = chans[0]
    for i, ci in enumerate(chans):
        for j in range(config.resnet_blocks_per_level):
            add_resnet(f"down{i}.block{j}", c, ci)
            c = ci

    p["mid.attn.wq"] = _conv_init(rng, c, c, 1)
    p["mid.attn.wk"] = _conv_init(rng, c, c, 1)
    p["mid.attn.wv"] = _conv_init(rng, c, c, 1)
    add_resnet("mid.res1", c, c)
    add_resnet("mid.res2", c, c)

    for i in reversed(range(config.levels)):
        ci = chans[i]
        for j in range(config.resnet_blocks_per_level):
            c_in = c + ci if j == 0 else ci
            add_resnet(f"up{i}.block{j}", c_in, ci)
        c = ci

    p["out.gn.gamma"] = _ones(c)
    p["out.gn.beta"] = _zeros(c)
    # zero-init the output conv so the untrained model predicts zero noise
    p["out.conv.w"] = _zeros(config.in_channels, c, 3)
    p["out.conv.b"] = _zeros(config.in_channels)
    return p


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

class TrajUNet:
    """Noise predictor over [B, 2, L] trajectory tensors."""

    def __init__(self, config: TrajUNetConfig, params: dict[str, Tensor] | None = None,
                 rng: np.random.Generator | None = None):
        self.config = config
        if params is None:
            if rng is None:
                raise ValueError("need either params or an rng to initialize them")
            params = init_params(config, rng)
        self.params = params

    def parameters(self):
        return self.params.values()

    def forward(self, x_t: np.ndarray, t: np.ndarray, cond: ConditionBatch | None) -> Tensor:
        cfg = self.config
        x_t = np.asarray(x_t, dtype=np.float32)
        if x_t.ndim != 3 or x_t.shape[1] != cfg.in_channels or x_t.shape[2] != cfg.length:
            raise ValueError(f"expected input [B, {cfg.in_channels}, {cfg.length}], got {x_t.shape}")
        B = x_t.shape[0]
        t = np.atleast_1d(np.asarray(t))
        if t.shape != (B,):
            raise ValueError(f"need one step index per batch element, got {t.shape}")
        if cond is None:
            cond = ConditionBatch.null(B)
        if len(cond) != B:
            raise ValueError(f"batch/condition count mismatch: {B} vs {len(cond)}")

        p = self.params
        temb = time_mlp(Tensor(sinusoidal_time_embedding(t, cfg.time_embed_dim)), p)
        cemb = wide_deep_embed(cond, p)
        emb = tz.add(temb, cemb)

        h = tz.conv1d(Tensor(x_t), p["stem.w"], p["stem.b"])
        skips = []
        for i in range(cfg.levels):
            for j in range(cfg.resnet_blocks_per_level):
                h = resnet_block(h, emb, p, f"down{i}.block{j}", cfg.groups)
            skips.append(h)
            if i < cfg.levels - 1:
                h = tz.maxpool1d_k2(h)

        h = middle_attention(h, emb, p, "mid", cfg.groups)

        for i in reversed(range(cfg.levels)):
            h = tz.concat_channels([h, skips[i]])
            for j in range(cfg.resnet_blocks_per_level):
                h = resnet_block(h, emb, p, f"up{i}.block{j}", cfg.groups)
            if i > 0:
                h = tz.upsample_nearest_2x(h)

        h = tz.group_norm(h, _gn_groups(cfg.groups, h.shape[1]), p["out.gn.gamma"], p["out.gn.beta"])
        h = tz.silu(h)
        return tz.conv1d(h, p["out.conv.w"], p["out.conv.b"])

    __call__ = forward
