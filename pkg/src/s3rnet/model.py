"""The fusion network.

Four parallel branches extract features from the two inputs at both grids:

    Q: grouped residual groups over X_h                  (LR grid)
    K: residual groups over X_m                          (HR grid)
    V: residual groups over cat(downsample(X_m), X_h)    (LR grid)
    Z: residual groups over cat(upsample(X_h), X_m)      (HR grid)

Each residual group stacks dense 1x1-conv aggregation blocks (DFAB) and adds
a group-wide skip through a 3x3 tail conv.  The fusion block (SSAWB) projects
all four branch outputs to a reduced channel width on the HR grid, runs
scaled-dot-product cross-attention between Q and K applied to V, adds the
result to Z, and gates the four streams with per-position sigmoid weights
before a 1x1 conv restores the working width.  A final 3x3 head maps back to
the output bands.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError

LEAKY_SLOPE = 0.2
DFAB_DENSE_LAYERS = 4
DFAB_RESIDUAL_SCALE = 0.2


@dataclass
class ModelConfig:
    bands: int                      # output / X_h spectral bands
    msi_bands: int                  # X_m spectral bands
    scale: int                      # HR/LR spatial ratio
    base_channels: int = 32         # working feature width
    depths: tuple[int, int, int, int] = (4, 4, 6, 6)  # groups per Q/K/V/Z branch
    growth: int = 16                # channels added by each dense layer
    groups: int = 4                 # grouped-conv group count in the Q branch
    reduction: int = 2              # attention width = base_channels // reduction
    group_size: int = 2             # DFABs per residual group
    attention_tile: int = 64        # max tokens per spatial side in attention

    def __post_init__(self):
        self.depths = tuple(int(d) for d in self.depths)
        if min(self.bands, self.msi_bands) < 1:
            raise ConfigError("bands and msi_bands must be >= 1")
        if self.scale < 1:
            raise ConfigError("scale must be >= 1")
        if len(self.depths) != 4 or min(self.depths) < 1:
            raise ConfigError(f"depths must be four integers >= 1, got {self.depths}")
        if self.base_channels % self.groups:
            raise ConfigError(
                f"base_channels {self.base_channels} not divisible by groups {self.groups}"
            )
        if self.growth % self.groups:
            raise ConfigError(f"growth {self.growth} not divisible by groups {self.groups}")
        if self.reduction < 1 or self.base_channels // self.reduction < 1:
            raise ConfigError(f"reduction {self.reduction} leaves no attention channels")
        if self.group_size < 1 or self.attention_tile < 1:
            raise ConfigError("group_size and attention_tile must be >= 1")

    @property
    def attn_channels(self) -> int:
        return self.base_channels // self.reduction

    def to_dict(self) -> dict:
        d = asdict(self)
        d["depths"] = list(self.depths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        kwargs = dict(d)
        if "depths" in kwargs:
            kwargs["depths"] = tuple(kwargs["depths"])
        return cls(**kwargs)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def _kaiming_uniform(rng, cout, cin_per_group, k, dtype):
    fan_in = cin_per_group * k * k
    gain = math.sqrt(2.0 / (1.0 + LEAKY_SLOPE ** 2))
    bound = gain * math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=(cout, cin_per_group, k, k)).astype(dtype)


class Conv2d:
    def __init__(self, cin, cout, ksize, rng, groups=1, dtype=np.float32):
        if cin % groups or cout % groups:
            raise ConfigError(f"conv {cin}->{cout} not divisible into {groups} groups")
        self.ksize = ksize
        self.groups = groups
        self.weight = Tensor(_kaiming_uniform(rng, cout, cin // groups, ksize, dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias, stride=1,
                         padding=self.ksize // 2, groups=self.groups)

    def named_params(self, prefix):
        return [(f"{prefix}.weight", self.weight), (f"{prefix}.bias", self.bias)]

    def zero_(self):
        self.weight.data[...] = 0.0
        self.bias.data[...] = 0.0


class Dfab:
    """Dense feature aggregation: four 1x1 conv + LeakyReLU layers, each fed
    the concatenation of the block input and every earlier layer output, then
    a 1x1 fuse conv back to the working width, residual-scaled by 0.2."""

    def __init__(self, channels, growth, rng, groups=1, dtype=np.float32):
        self.dense = [
            Conv2d(channels + j * growth, growth, 1, rng, groups=groups, dtype=dtype)
            for j in range(DFAB_DENSE_LAYERS)
        ]
        self.fuse = Conv2d(channels + DFAB_DENSE_LAYERS * growth, channels, 1, rng,
                           groups=groups, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        feats = x
        for conv in self.dense:
            feats = ad.concat([feats, ad.leaky_relu(conv(feats), LEAKY_SLOPE)], axis=1)
        return ad.add(ad.scale(self.fuse(feats), DFAB_RESIDUAL_SCALE), x)

    def named_params(self, prefix):
        out = []
        for j, conv in enumerate(self.dense):
            out += conv.named_params(f"{prefix}.l{j + 1}")
        return out + self.fuse.named_params(f"{prefix}.fuse")

    def zero_(self):
        for conv in self.dense:
            conv.zero_()
        self.fuse.zero_()


class ResidualGroup:
    """Consecutive DFABs plus a group-wide residual through a 3x3 tail conv.
    groups > 1 makes every conv in the group a grouped conv."""

    def __init__(self, channels, growth, n_blocks, rng, groups=1, dtype=np.float32):
        self.blocks = [Dfab(channels, growth, rng, groups=groups, dtype=dtype)
                       for _ in range(n_blocks)]
        self.tail = Conv2d(channels, channels, 3, rng, groups=groups, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        h = x
        for block in self.blocks:
            h = block(h)
        return ad.add(self.tail(h), x)

    def named_params(self, prefix):
        out = []
        for j, block in enumerate(self.blocks):
            out += block.named_params(f"{prefix}.d{j}")
        return out + self.tail.named_params(f"{prefix}.tail")

    def zero_(self):
        for block in self.blocks:
            block.zero_()
        self.tail.zero_()


class Branch:
    """Transition conv into the working width, then a stack of residual groups."""

    def __init__(self, name, in_channels, cfg: ModelConfig, depth, rng,
                 groups=1, dtype=np.float32):
        self.name = name
        self.transition = Conv2d(in_channels, cfg.base_channels, 3, rng, dtype=dtype)
        self.groups = [
            ResidualGroup(cfg.base_channels, cfg.growth, cfg.group_size, rng,
                          groups=groups, dtype=dtype)
            for _ in range(depth)
        ]

    def __call__(self, x: Tensor, capture: dict | None = None) -> Tensor:
        h = ad.leaky_relu(self.transition(x), LEAKY_SLOPE)
        for i, group in enumerate(self.groups):
            h = group(h)
            if capture is not None:
                capture[f"{self.name}.g{i}"] = h.data.copy()
        return h

    def named_params(self, prefix):
        out = self.transition.named_params(f"{prefix}.transition")
        for i, group in enumerate(self.groups):
            out += group.named_params(f"{prefix}.g{i}")
        return out

    def zero_residual_(self):
        for group in self.groups:
            group.zero_()


class Ssawb:
    """Cross-attention between the projected branch features plus sigmoid
    gating.  All streams are aligned on the HR token grid first; attention
    runs independently on spatial tiles of at most ``attention_tile`` pixels
    per side to bound the (tokens x tokens) score matrix."""

    def __init__(self, cfg: ModelConfig, rng, dtype=np.float32):
        d = cfg.attn_channels
        cf = cfg.base_channels
        self.d = d
        self.tile = cfg.attention_tile
        self.proj_q = Conv2d(cf, d, 1, rng, dtype=dtype)
        self.proj_k = Conv2d(cf, d, 1, rng, dtype=dtype)
        self.proj_v = Conv2d(cf, d, 1, rng, dtype=dtype)
        self.proj_z = Conv2d(cf, d, 1, rng, dtype=dtype)
        self.attn_out = Conv2d(d, d, 1, rng, dtype=dtype)
        self.adapt = Conv2d(4 * d, 4 * d, 1, rng, dtype=dtype)
        self.restore = Conv2d(d, cf, 1, rng, dtype=dtype)

    def _tile_attention(self, q, k, v, capture, tag):
        n, d, h, w = q.shape
        tokens = h * w
        as_tokens = lambda t: ad.transpose(ad.reshape(t, (n, d, tokens)), (0, 2, 1))
        qt, kt, vt = as_tokens(q), as_tokens(k), as_tokens(v)
        scores = ad.scale(ad.matmul(qt, ad.transpose(kt, (0, 2, 1))), 1.0 / math.sqrt(d))
        attn = ad.softmax(scores, axis=-1)
        if capture is not None:
            capture[f"ssawb.attn{tag}"] = attn.data.copy()
        out = ad.matmul(attn, vt)
        return ad.reshape(ad.transpose(out, (0, 2, 1)), (n, d, h, w))

    def _attention(self, q, k, v, capture):
        n, d, h, w = q.shape
        if h <= self.tile and w <= self.tile:
            return self._tile_attention(q, k, v, capture, "")
        hs = list(range(0, h, self.tile)) + [h]
        ws = list(range(0, w, self.tile)) + [w]
        rows = []
        for h0, h1 in zip(hs[:-1], hs[1:]):
            cols = []
            for w0, w1 in zip(ws[:-1], ws[1:]):
                cols.append(self._tile_attention(
                    ad.crop(q, h0, h1, w0, w1),
                    ad.crop(k, h0, h1, w0, w1),
                    ad.crop(v, h0, h1, w0, w1),
                    capture, f"[{h0}:{h1},{w0}:{w1}]"))
            rows.append(cols[0] if len(cols) == 1 else ad.concat(cols, axis=3))
        return rows[0] if len(rows) == 1 else ad.concat(rows, axis=2)

    def __call__(self, fq, fk, fv, fz, scale_factor, capture: dict | None = None) -> Tensor:
        if scale_factor > 1:
            fq = ad.upsample(fq, scale_factor)
            fv = ad.upsample(fv, scale_factor)
        q = self.proj_q(fq)
        k = self.proj_k(fk)
        v = self.proj_v(fv)
        z = self.proj_z(fz)
        assert q.shape == k.shape == v.shape == z.shape, (
            f"token grids differ after alignment: {q.shape} / {k.shape} / {v.shape} / {z.shape}"
        )
        zp = ad.add(self.attn_out(self._attention(q, k, v, capture)), z)
        gates = ad.sigmoid(self.adapt(ad.concat([q, k, v, zp], axis=1)))
        d = self.d
        streams = (q, k, v, zp)
        gated = None
        for i, stream in enumerate(streams):
            term = ad.mul(ad.channel_slice(gates, i * d, (i + 1) * d), stream)
            gated = term if gated is None else ad.add(gated, term)
        if capture is not None:
            capture["ssawb.weights"] = gates.data.copy()
            capture["ssawb.gated"] = gated.data.copy()
        fused = self.restore(gated)
        if capture is not None:
            capture["ssawb.fused"] = fused.data.copy()
        return fused

    def named_params(self, prefix):
        out = []
        for tag in ("proj_q", "proj_k", "proj_v", "proj_z", "attn_out", "adapt", "restore"):
            out += getattr(self, tag).named_params(f"{prefix}.{tag}")
        return out


class S3RNet:
    """End-to-end fusion model: branches -> gated attention fusion -> head."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.init_seed = int(seed)
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        nq, nk, nv, nz = config.depths
        m, mm = config.bands, config.msi_bands
        self.branch_q = Branch("q", m, config, nq, rng, groups=config.groups, dtype=dtype)
        self.branch_k = Branch("k", mm, config, nk, rng, dtype=dtype)
        self.branch_v = Branch("v", mm + m, config, nv, rng, dtype=dtype)
        self.branch_z = Branch("z", m + mm, config, nz, rng, dtype=dtype)
        self.ssawb = Ssawb(config, rng, dtype=dtype)
        self.head = Conv2d(config.base_channels, m, 3, rng, dtype=dtype)
        self._params = self._collect_params()

    def _collect_params(self):
        out = []
        for name, branch in (("q", self.branch_q), ("k", self.branch_k),
                             ("v", self.branch_v), ("z", self.branch_z)):
            out += branch.named_params(name)
        out += self.ssawb.named_params("ssawb")
        out += self.head.named_params("head")
        return out

    def named_params(self) -> list[tuple[str, Tensor]]:
        return list(self._params)

    def param_count(self) -> int:
        return sum(t.size for _, t in self._params)

    def zero_grads(self) -> None:
        for _, t in self._params:
            t.grad = None

    def _check_inputs(self, xh: Tensor, xm: Tensor):
        cfg = self.config
        if xh.ndim != 4 or xm.ndim != 4:
            raise DimensionError(f"inputs must be NCHW, got {xh.shape} and {xm.shape}")
        n, c, h, w = xh.shape
        nm, cm, hm, wm = xm.shape
        if n != nm:
            raise DimensionError(f"batch sizes differ: {n} vs {nm}")
        if c != cfg.bands or cm != cfg.msi_bands:
            raise DimensionError(
                f"band counts ({c}, {cm}) do not match config ({cfg.bands}, {cfg.msi_bands})"
            )
        if hm != h * cfg.scale or wm != w * cfg.scale:
            raise DimensionError(
                f"X_m grid {hm}x{wm} is not {cfg.scale}x the X_h grid {h}x{w}"
            )

    def mbfn(self, xh: Tensor, xm: Tensor, capture: dict | None = None):
        """The four branch features (F_Q, F_K, F_V, F_Z)."""
        self._check_inputs(xh, xm)
        s = self.config.scale
        xmd = ad.downsample(xm, s)
        xhu = ad.upsample(xh, s)
        fq = self.branch_q(xh, capture)
        fk = self.branch_k(xm, capture)
        fv = self.branch_v(ad.concat([xmd, xh], axis=1), capture)
        fz = self.branch_z(ad.concat([xhu, xm], axis=1), capture)
        return fq, fk, fv, fz

    def forward(self, xh, xm, capture: dict | None = None) -> Tensor:
        xh = xh if isinstance(xh, Tensor) else Tensor(xh, dtype=self.dtype)
        xm = xm if isinstance(xm, Tensor) else Tensor(xm, dtype=self.dtype)
        fq, fk, fv, fz = self.mbfn(xh, xm, capture)
        fused = self.ssawb(fq, fk, fv, fz, self.config.scale, capture)
        y = self.head(fused)
        if capture is not None:
            capture["output"] = y.data.copy()
        return y

    __call__ = forward

    def zero_residual_bodies(self) -> None:
        """Zero every DFAB and tail conv so all residual groups become
        identity maps (the transitions, fusion block and head keep their
        initialization)."""
        for branch in (self.branch_q, self.branch_k, self.branch_v, self.branch_z):
            branch.zero_residual_()


def param_count(model: S3RNet) -> int:
    return model.param_count()


# ---------------------------------------------------------------------------
# symbolic cost accounting (no tensor allocation)
# ---------------------------------------------------------------------------

@dataclass
class CostEstimate:
    flops: int                      # 2 * MACs over all convs and matmuls
    output_shape: tuple[int, int, int, int]
    by_component: dict


def _conv_flops(n, cin, cout, k, h, w, groups=1) -> int:
    return 2 * n * cout * h * w * (cin // groups) * k * k


def _dfab_flops(n, cf, growth, h, w, groups) -> int:
    total = 0
    for j in range(DFAB_DENSE_LAYERS):
        total += _conv_flops(n, cf + j * growth, growth, 1, h, w, groups)
    total += _conv_flops(n, cf + DFAB_DENSE_LAYERS * growth, cf, 1, h, w, groups)
    return total


def _branch_flops(n, in_ch, cfg: ModelConfig, depth, h, w, groups) -> int:
    total = _conv_flops(n, in_ch, cfg.base_channels, 3, h, w)
    per_group = (cfg.group_size * _dfab_flops(n, cfg.base_channels, cfg.growth, h, w, groups)
                 + _conv_flops(n, cfg.base_channels, cfg.base_channels, 3, h, w, groups))
    return total + depth * per_group


def _tile_sizes(extent: int, tile: int) -> list[int]:
    edges = list(range(0, extent, tile)) + [extent]
    return [b - a for a, b in zip(edges[:-1], edges[1:])]


def estimate_cost(cfg: ModelConfig, xh_shape, xm_shape) -> CostEstimate:
    """Propagate shapes symbolically and count 2*MACs for convs/matmuls.

    Raises DimensionError on inadmissible input shapes, exactly like the
    real forward pass, but never allocates feature tensors.
    """
    n, c, h, w = (int(v) for v in xh_shape)
    nm, cm, hm, wm = (int(v) for v in xm_shape)
    if n != nm:
        raise DimensionError(f"batch sizes differ: {n} vs {nm}")
    if c != cfg.bands or cm != cfg.msi_bands:
        raise DimensionError(
            f"band counts ({c}, {cm}) do not match config ({cfg.bands}, {cfg.msi_bands})"
        )
    if hm != h * cfg.scale or wm != w * cfg.scale:
        raise DimensionError(f"X_m grid {hm}x{wm} is not {cfg.scale}x the X_h grid {h}x{w}")

    cf, d = cfg.base_channels, cfg.attn_channels
    nq, nk, nv, nz = cfg.depths
    by = {
        "branch_q": _branch_flops(n, c, cfg, nq, h, w, cfg.groups),
        "branch_k": _branch_flops(n, cm, cfg, nk, hm, wm, 1),
        "branch_v": _branch_flops(n, cm + c, cfg, nv, h, w, 1),
        "branch_z": _branch_flops(n, c + cm, cfg, nz, hm, wm, 1),
    }
    proj = 4 * _conv_flops(n, cf, d, 1, hm, wm)
    attn = 0
    for th in _tile_sizes(hm, cfg.attention_tile):
        for tw in _tile_sizes(wm, cfg.attention_tile):
            tokens = th * tw
            attn += 2 * (2 * n * tokens * tokens * d)  # QK^T and attn.V
    mix = (_conv_flops(n, d, d, 1, hm, wm)            # conv after attention
           + _conv_flops(n, 4 * d, 4 * d, 1, hm, wm)  # adaptive gate conv
           + _conv_flops(n, d, cf, 1, hm, wm))        # restore conv
    by["ssawb"] = proj + attn + mix
    by["head"] = _conv_flops(n, cf, c, 3, hm, wm)
    return CostEstimate(
        flops=sum(by.values()),
        output_shape=(n, c, hm, wm),
        by_component=by,
    )


def flops_estimate(cfg: ModelConfig, xh_shape, xm_shape) -> int:
    return estimate_cost(cfg, xh_shape, xm_shape).flops
