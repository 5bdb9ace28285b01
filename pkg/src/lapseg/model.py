"""The full segmentation network: 4-stage encoder, efficient multi-scale
bridge, 3-stage decoder, segmentation head.

Stage widths follow multipliers m = [1, 2, 5, 8] on a base width C; the
encoder emits features at 1/4, 1/8, 1/16 and 1/32 resolution. The bridge
projects every level's keys and values down to width C, sums the four
C x C global contexts, and redistributes the aggregate through each
level's own query (reshaped to (m_i * n_i) x C rows), followed by
LayerNorm + MiX-FFN with a skip. The decoder walks back up with
pixel-shuffle expands, channel-concat skips projected to the stage width,
and transformer blocks, ending in a 4x expand plus 1x1 head.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import ops
from .blocks import (
    ATTENTION_KINDS,
    MixFFN,
    PatchEmbed,
    PatchExpand,
    PatchMerge,
    TransformerLayer,
)
from .module import Linear, LayerNorm, Module
from .pyramid import GaussianSpec
from .tensor import ShapeError, Tensor


@dataclass
class ModelConfig:
    height: int = 64
    width: int = 64
    in_channels: int = 1
    base_width: int = 16
    num_classes: int = 2
    multipliers: tuple = (1, 2, 5, 8)
    encoder_depths: tuple = (2, 2, 2, 2)
    decoder_depths: tuple = (2, 2, 2)
    heads: tuple = (1, 2, 4, 8)
    sigmas: tuple = (1.0, 2.0, 4.0)
    frequency_attention: bool = True
    use_bridge: bool = True
    use_des: bool = True
    baseline_self_attention: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        self.multipliers = tuple(int(m) for m in self.multipliers)
        self.encoder_depths = tuple(int(d) for d in self.encoder_depths)
        self.decoder_depths = tuple(int(d) for d in self.decoder_depths)
        self.heads = tuple(int(h) for h in self.heads)
        self.sigmas = tuple(float(s) for s in self.sigmas)

    def validate(self):
        if self.height % 32 or self.width % 32:
            raise ValueError(
                f"input {self.height}x{self.width} must be divisible by 32"
            )
        if len(self.multipliers) != 4 or len(self.encoder_depths) != 4:
            raise ValueError("need 4 stage multipliers and 4 encoder depths")
        if len(self.decoder_depths) != 3:
            raise ValueError("need 3 decoder depths")
        if len(self.heads) != 4:
            raise ValueError("need 4 per-stage head counts")
        for s, (m, h) in enumerate(zip(self.multipliers, self.heads)):
            if (m * self.base_width) % h:
                raise ValueError(
                    f"stage {s} width {m * self.base_width} not divisible by {h} heads"
                )
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.baseline_self_attention and self.frequency_attention:
            # The baseline replaces the fused pair entirely.
            raise ValueError(
                "baseline_self_attention requires frequency_attention=False"
            )
        GaussianSpec(self.sigmas)
        return self

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    @property
    def stage_widths(self) -> tuple:
        return tuple(m * self.base_width for m in self.multipliers)

    @property
    def stage_grids(self) -> tuple:
        h, w = self.height, self.width
        return tuple((h // f, w // f) for f in (4, 8, 16, 32))

    @property
    def attention_kind(self) -> str:
        if self.baseline_self_attention:
            return "softmax"
        return "ef_att" if self.frequency_attention else "efficient_only"

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("multipliers", "encoder_depths", "decoder_depths", "heads",
                    "sigmas"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d).validate()


class Bridge(Module):
    """Efficient multi-scale bridge over the four encoder features."""

    def __init__(self, rng, cfg: ModelConfig):
        c = cfg.base_width
        dt = cfg.np_dtype
        widths = cfg.stage_widths
        self.k_proj = [Linear(rng, wd, c, bias=False, dtype=dt) for wd in widths]
        self.v_proj = [Linear(rng, wd, c, bias=False, dtype=dt) for wd in widths]
        self.q_proj = [Linear(rng, wd, wd, bias=False, dtype=dt) for wd in widths]
        self.norms = [LayerNorm(wd, dtype=dt) for wd in widths]
        self.ffns = [MixFFN(rng, wd, dtype=dt) for wd in widths]
        self.base_width = c
        self.multipliers = cfg.multipliers

    def attention_outputs(self, feats):
        """Per level: the shared-context attention product Q_i * sum_j G_j,
        reshaped back to the level's token layout (no residuals yet)."""
        c = self.base_width
        context = None
        for f, kp, vp in zip(feats, self.k_proj, self.v_proj):
            g = ops.attention_context(kp(f), vp(f), heads=1)   # (1, C, C)
            context = g if context is None else ops.add(context, g)
        outs = []
        for f, m, qp in zip(feats, self.multipliers, self.q_proj):
            n = f.shape[0]
            q = ops.reshape(qp(f), (m * n, c))
            outs.append(ops.reshape(ops.attention_apply(q, context), (n, m * c)))
        return outs

    def __call__(self, feats, grids):
        # The attention product joins the residual stream like every other
        # attention output in this architecture; without the F_i residual
        # the decoder starts blind to the encoder and training stalls.
        outs = []
        for f, z, (h, w), ln, ffn in zip(feats, self.attention_outputs(feats),
                                         grids, self.norms, self.ffns):
            y = ops.add(f, z)
            outs.append(ops.add(y, ffn(ln(y), h, w)))
        return outs


class Segmenter(Module):
    """Encoder / bridge / decoder segmentation transformer."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        cfg.validate()
        dt = cfg.np_dtype
        spec = GaussianSpec(cfg.sigmas)
        widths = cfg.stage_widths
        kind = cfg.attention_kind

        self.embed = PatchEmbed(rng, cfg.in_channels, widths[0], dtype=dt)
        self.enc_stages = [
            [TransformerLayer(rng, widths[s], cfg.heads[s], spec, kind=kind,
                              use_des=cfg.use_des, dtype=dt)
             for _ in range(cfg.encoder_depths[s])]
            for s in range(4)
        ]
        self.merges = [PatchMerge(rng, widths[s], widths[s + 1], dtype=dt)
                       for s in range(3)]
        self.bridge = Bridge(rng, cfg) if cfg.use_bridge else None
        self.dec_expands = [PatchExpand(rng, widths[s + 1], widths[s], 2, dtype=dt)
                            for s in (2, 1, 0)]
        self.skip_projs = [Linear(rng, 2 * widths[s], widths[s], bias=True, dtype=dt)
                           for s in (2, 1, 0)]
        self.dec_stages = [
            [TransformerLayer(rng, widths[s], cfg.heads[s], spec, kind=kind,
                              use_des=cfg.use_des, dtype=dt)
             for _ in range(cfg.decoder_depths[2 - s])]
            for s in (2, 1, 0)
        ]
        self.final_expand = PatchExpand(rng, widths[0], widths[0], 4, dtype=dt)
        self.head = Linear(rng, widths[0], cfg.num_classes, bias=True, dtype=dt)
        self.cfg = cfg

    # -- stage passes -------------------------------------------------------

    def encoder_forward(self, img: Tensor, capture=None):
        """Run the encoder; returns the four per-stage token features."""
        cfg = self.cfg
        if img.shape != (cfg.height, cfg.width, cfg.in_channels):
            raise ShapeError(
                f"expected input {(cfg.height, cfg.width, cfg.in_channels)}, "
                f"got {img.shape}"
            )
        grids = cfg.stage_grids
        x = self.embed(img)
        feats = []
        for s in range(4):
            h, w = grids[s]
            for j, layer in enumerate(self.enc_stages[s]):
                x = layer(x, h, w)
                if capture is not None:
                    capture.append((f"enc{s + 1}.{j}", x, h, w))
            feats.append(x)
            if s < 3:
                x = self.merges[s](x, h, w)
        return feats

    def bridge_forward(self, feats):
        if self.bridge is None:
            return list(feats)
        return self.bridge(feats, self.cfg.stage_grids)

    def decoder_forward(self, skips, capture=None):
        grids = self.cfg.stage_grids
        x = skips[3]
        for i, s in enumerate((2, 1, 0)):
            h, w = grids[s]
            x = self.dec_expands[i](x, *grids[s + 1])
            x = self.skip_projs[i](ops.concat([x, skips[s]], axis=1))
            for j, layer in enumerate(self.dec_stages[i]):
                x = layer(x, h, w)
                if capture is not None:
                    capture.append((f"dec{s + 1}.{j}", x, h, w))
        h, w = grids[0]
        x = self.final_expand(x, h, w)
        logits = self.head(x)
        return ops.reshape(
            logits, (self.cfg.height, self.cfg.width, self.cfg.num_classes)
        )

    def forward(self, img: Tensor, capture=None) -> Tensor:
        """img (H, W, Cin) -> logits (H, W, num_classes).

        ``capture``: optional list; every transformer layer appends
        (name, tokens, grid_h, grid_w) for spectral probing.
        """
        feats = self.encoder_forward(img, capture=capture)
        skips = self.bridge_forward(feats)
        return self.decoder_forward(skips, capture=capture)

    __call__ = forward
