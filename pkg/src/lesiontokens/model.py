"""Multi-task token network: conv stem, shared Transformer tokens, mask/level-set decoder
and a classification head driven by an appended class token.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Conv2d, LayerNorm, Linear, Module, Parameter, Tensor

STEM_STRIDE = 16


@dataclass
class ModelConfig:
    input_size: int = 64
    in_channels: int = 3
    stem_channels: list[int] = field(default_factory=lambda: [16, 32, 64, 128])
    embed_dim: int = 64
    heads: int = 4
    layers: int = 4
    num_classes: int = 2
    decode_channels: list[int] = field(default_factory=lambda: [64, 32, 16, 16])
    ffn_ratio: int = 4

    def __post_init__(self):
        if self.input_size % STEM_STRIDE:
            raise ValueError(f"input_size must be divisible by {STEM_STRIDE}")
        if self.embed_dim % self.heads:
            raise ValueError("embed_dim must be divisible by heads")
        if self.layers < 0:
            raise ValueError("layers must be >= 0")
        if len(self.stem_channels) != 4 or len(self.decode_channels) != 4:
            raise ValueError("stem_channels and decode_channels need exactly 4 widths")

    @property
    def token_grid(self) -> int:
        return self.input_size // STEM_STRIDE

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ModelOutput:
    mask_logits: Tensor      # [B, 2, H, W]
    level_set: Tensor        # [B, H, W]
    class_logits: Tensor     # [B, num_classes]
    cls_attention: Tensor    # [B, G*G], sums to 1 per image
    attentions: list[np.ndarray] = field(default_factory=list)  # per layer [B, heads, N+1, N+1]


class Stem(Module):
    """Four stride-2 stages; returns the /16 map and the /2, /4, /8 maps for skips."""

    def __init__(self, rng, in_channels: int, widths: list[int]):
        super().__init__()
        self.stages = []
        c = in_channels
        for i, width in enumerate(widths):
            down = Conv2d(rng, c, width, 3, stride=2)
            refine = Conv2d(rng, width, width, 3)
            setattr(self, f"down{i}", down)
            setattr(self, f"conv{i}", refine)
            self.stages.append((down, refine))
            c = width

    def forward(self, image: Tensor):
        feats = []
        x = image
        for down, refine in self.stages:
            x = dc.relu(refine(dc.relu(down(x))))
            feats.append(x)
        return feats[-1], feats[:3]


class TransformerLayer(Module):
    def __init__(self, rng, dim: int, heads: int, ffn_ratio: int = 4):
        super().__init__()
        self.heads = heads
        self.ln1 = LayerNorm(dim)
        self.qkv = Linear(rng, dim, 3 * dim)
        self.proj = Linear(rng, dim, dim)
        self.ln2 = LayerNorm(dim)
        self.fc1 = Linear(rng, dim, ffn_ratio * dim)
        self.fc2 = Linear(rng, ffn_ratio * dim, dim)

    def attention(self, z: Tensor):
        b, n, d = z.shape
        h, dh = self.heads, d // self.heads
        qkv = self.qkv(z).reshape(b, n, 3, h, dh).transpose(2, 0, 3, 1, 4)  # [3, B, h, N, dh]
        q, k, v = qkv[0], qkv[1], qkv[2]
        weights = dc.softmax(dc.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh)), axis=-1)
        mixed = dc.matmul(weights, v).transpose(0, 2, 1, 3).reshape(b, n, d)
        return self.proj(mixed), weights

    def forward(self, z: Tensor):
        attended, weights = self.attention(self.ln1(z))
        z = z + attended
        z = z + self.fc2(dc.relu(self.fc1(self.ln2(z))))
        return z, weights


class DecoderBlock(Module):
    def __init__(self, rng, c_in: int, c_out: int):
        super().__init__()
        self.conv1 = Conv2d(rng, c_in, c_out, 3)
        self.conv2 = Conv2d(rng, c_out, c_out, 3)

    def forward(self, x: Tensor, skip: Tensor | None) -> Tensor:
        x = dc.bilinear_resize(x, 2 * x.shape[-2], 2 * x.shape[-1])
        if skip is not None:
            x = dc.concat([x, skip], axis=1)
        return dc.relu(self.conv2(dc.relu(self.conv1(x))))


class Decoder(Module):
    """Cascade of four x2 upsampling blocks; the first three concatenate encoder skips."""

    def __init__(self, rng, embed_dim: int, skip_channels: list[int], widths: list[int]):
        super().__init__()
        self.blocks = []
        c = embed_dim
        skips = list(reversed(skip_channels)) + [0]  # /8, /4, /2, none
        for i, (width, skip_c) in enumerate(zip(widths, skips)):
            block = DecoderBlock(rng, c + skip_c, width)
            setattr(self, f"up{i}", block)
            self.blocks.append(block)
            c = width
        self.mask_head = Conv2d(rng, c, 2, 1)
        self.lsf_head = Conv2d(rng, c, 1, 1)

    def forward(self, seg_tokens: Tensor, skips: list[Tensor]):
        b, n, d = seg_tokens.shape
        g = int(round(np.sqrt(n)))
        if g * g != n:
            raise dc.DimensionError(f"decoder needs a square token grid, got {n} tokens")
        x = seg_tokens.transpose(0, 2, 1).reshape(b, d, g, g)
        ordered = list(reversed(skips)) + [None]
        for block, skip in zip(self.blocks, ordered):
            x = block(x, skip)
        mask_logits = self.mask_head(x)
        level_set = dc.tanh(self.lsf_head(x)).reshape(b, x.shape[-2], x.shape[-1])
        return mask_logits, level_set


class MultiTaskTokenNet(Module):
    def __init__(self, config: ModelConfig | None = None, seed: int = 0):
        super().__init__()
        self.config = config or ModelConfig()
        cfg = self.config
        rng = np.random.default_rng(seed)
        self.stem = Stem(rng, cfg.in_channels, cfg.stem_channels)
        c_feat = cfg.stem_channels[-1]
        # token projection E, no bias: the class token embedding is exactly zero at init
        self.embed = Parameter(rng.uniform(-1, 1, (c_feat, cfg.embed_dim)) * np.sqrt(3.0 / c_feat))
        self.cls_token = Parameter(np.zeros(c_feat))
        self.blocks = []
        for i in range(cfg.layers):
            layer = TransformerLayer(rng, cfg.embed_dim, cfg.heads, cfg.ffn_ratio)
            setattr(self, f"layer{i}", layer)
            self.blocks.append(layer)
        self.decoder = Decoder(rng, cfg.embed_dim, cfg.stem_channels[:3], cfg.decode_channels)
        self.classifier = Linear(rng, cfg.embed_dim, cfg.num_classes)

    # pieces exposed for testing ------------------------------------------------
    def stem_encode(self, image: Tensor):
        return self.stem(image)

    def tokenize(self, features: Tensor) -> Tensor:
        """[B, C', G, G] -> [B, G*G + 1, D]; row-major cell tokens, class token last."""
        b, c, gh, gw = features.shape
        cells = features.reshape(b, c, gh * gw).transpose(0, 2, 1)
        cls = dc.reshape(self.cls_token, (1, 1, c)) * np.ones((b, 1, 1))
        return dc.matmul(dc.concat([cells, cls], axis=1), self.embed)

    def encode_tokens(self, tokens: Tensor):
        attentions = []
        for layer in self.blocks:
            tokens, weights = layer(tokens)
            attentions.append(weights)
        return tokens, attentions

    def forward(self, image) -> ModelOutput:
        image = dc.as_tensor(image)
        if image.ndim == 3:
            image = image.reshape(1, *image.shape)
        b, _, h, w = image.shape
        if h % STEM_STRIDE or w % STEM_STRIDE:
            raise dc.DimensionError(f"input {h}x{w} not divisible by {STEM_STRIDE}")
        features, skips = self.stem_encode(image)
        tokens, attentions = self.encode_tokens(self.tokenize(features))
        n = tokens.shape[1] - 1
        seg, cls = tokens[:, :n, :], tokens[:, n, :]
        mask_logits, level_set = self.decoder(seg, skips)
        class_logits = self.classifier(cls)
        if attentions:
            # class-token query row over segmentation keys, head-averaged, class key dropped
            row = attentions[-1][:, :, n, :n].mean(axis=1)
            cls_attention = row / row.sum(axis=-1, keepdims=True)
        else:
            cls_attention = Tensor(np.full((b, n), 1.0 / n))
        return ModelOutput(mask_logits, level_set, class_logits, cls_attention,
                           [a.data for a in attentions])
