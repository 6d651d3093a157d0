"""Global/local/fusion classifier with saliency-driven patch mining.

The global module is a small residual conv stack that emits per-class
saliency maps; its top activations become the global prediction. The K
hottest saliency locations are cut from the input image as patches, encoded
by the local module, and combined by softmax attention. The fusion head
classifies the concatenation of the pooled global features and the
attention-weighted local feature. An optional domain head hangs off the
same fused feature vector behind a gradient reversal layer.

Patches are cut as detached inputs: gradients reach the saliency maps
through the global head and its L1 penalty, not through patch pixels.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import layers as L
from .adversarial import DomainHead
from .batchnorm import BNLayer, StatsMode
from .tensor import Tensor, concat, read_tensor, write_tensor

__all__ = [
    "ModelConfig",
    "PatchConfig",
    "GlobalLocalFusionNet",
    "extract_patches",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_MAGIC",
]

CHECKPOINT_MAGIC = b"BNCK"


@dataclass
class PatchConfig:
    count: int = 2
    size: int = 16

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("patch count must be >= 1")


@dataclass
class ModelConfig:
    image_size: int = 64
    in_channels: int = 1
    channels: int = 16
    num_blocks: int = 3
    top_t: float = 0.02
    patch: PatchConfig = field(default_factory=PatchConfig)
    local_channels: tuple = (8, 16)
    domain_widths: tuple = (64, 32, 16)
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    @staticmethod
    def from_dict(d):
        d = dict(d)
        if "patch" in d:
            d["patch"] = PatchConfig(**d["patch"])
        for key in ("local_channels", "domain_widths"):
            if key in d:
                d[key] = tuple(d[key])
        return ModelConfig(**d)


class _ResidualBlock:
    """conv-BN-ReLU-conv-BN with identity skip, ReLU after the add."""

    def __init__(self, channels, cfg, rng, name):
        self.conv1 = L.Conv2D(channels, channels, 3, padding=1, bias=False, rng=rng)
        self.bn1 = BNLayer(channels, cfg.bn_momentum, cfg.bn_eps, name=f"{name}.bn1")
        self.conv2 = L.Conv2D(channels, channels, 3, padding=1, bias=False, rng=rng)
        self.bn2 = BNLayer(channels, cfg.bn_momentum, cfg.bn_eps, name=f"{name}.bn2")

    def __call__(self, x):
        h = L.relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        return L.relu(h + x)


class _GlobalModule:
    """Residual conv stack ending in sigmoid saliency maps and pooled features."""

    def __init__(self, cfg, rng):
        c = cfg.channels
        self.stem_conv = L.Conv2D(cfg.in_channels, c, 3, stride=2, padding=1, bias=False, rng=rng)
        self.stem_bn = BNLayer(c, cfg.bn_momentum, cfg.bn_eps, name="global.stem.bn")
        self.blocks = [
            _ResidualBlock(c, cfg, rng, f"global.block{i + 1}") for i in range(cfg.num_blocks)
        ]
        self.saliency_conv = L.Conv2D(c, 2, 1, bias=True, rng=rng)

    def __call__(self, x):
        h = L.relu(self.stem_bn(self.stem_conv(x)))
        for i, block in enumerate(self.blocks):
            h = block(h)
            if i < len(self.blocks) - 1:
                h = L.avg_pool2d(h)
        saliency = L.sigmoid(self.saliency_conv(h))
        return saliency, L.global_avg_pool(h)


class _LocalModule:
    """Two conv-BN-ReLU stages and a global pool into one vector per patch."""

    def __init__(self, cfg, rng):
        c1, c2 = cfg.local_channels
        self.conv1 = L.Conv2D(cfg.in_channels, c1, 3, stride=2, padding=1, bias=False, rng=rng)
        self.bn1 = BNLayer(c1, cfg.bn_momentum, cfg.bn_eps, name="local.bn1")
        self.conv2 = L.Conv2D(c1, c2, 3, stride=2, padding=1, bias=False, rng=rng)
        self.bn2 = BNLayer(c2, cfg.bn_momentum, cfg.bn_eps, name="local.bn2")

    def __call__(self, x):
        h = L.relu(self.bn1(self.conv1(x)))
        h = L.relu(self.bn2(self.conv2(h)))
        return L.global_avg_pool(h)


def extract_patches(saliency, image, cfg):
    """Greedy saliency-peak patch mining.

    Repeats ``cfg.count`` times: find the maximum of the class-summed
    saliency map, cut a ``size`` x ``size`` window centered there (clamped
    fully inside the image), then suppress the neighborhood closer than the
    patch size in both axes before the next pick. Ties resolve to the first
    cell in row-major order. Saliency coordinates map to image coordinates
    by nearest-neighbor scaling.

    Returns (patches [N, K, C, size, size], corners [N, K, 2]).
    """
    sal = saliency.data if isinstance(saliency, Tensor) else np.asarray(saliency)
    img = image.data if isinstance(image, Tensor) else np.asarray(image)
    n, _, hs, ws = sal.shape
    _, c, hi, wi = img.shape
    size = cfg.size
    if size > hi or size > wi:
        raise ValueError(f"patch size {size} exceeds image {hi}x{wi}")
    scale_r, scale_c = hi / hs, wi / ws
    # suppression radius in map cells equivalent to the patch size in pixels
    sup_r = max(1, math.ceil(size / scale_r))
    sup_c = max(1, math.ceil(size / scale_c))
    patches = np.empty((n, cfg.count, c, size, size))
    corners = np.empty((n, cfg.count, 2), dtype=np.int64)
    for b in range(n):
        heat = sal[b].sum(axis=0).copy()
        for k in range(cfg.count):
            idx = int(np.argmax(heat))
            r, cc = divmod(idx, ws)
            center_r = int((r + 0.5) * scale_r)
            center_c = int((cc + 0.5) * scale_c)
            r0 = min(max(center_r - size // 2, 0), hi - size)
            c0 = min(max(center_c - size // 2, 0), wi - size)
            patches[b, k] = img[b, :, r0 : r0 + size, c0 : c0 + size]
            corners[b, k] = (r0, c0)
            heat[max(r - sup_r + 1, 0) : r + sup_r, max(cc - sup_c + 1, 0) : cc + sup_c] = -np.inf
    return patches, corners


@dataclass
class ModelOutput:
    y_global: Tensor
    y_local: Tensor
    y_fusion: Tensor
    saliency: Tensor
    attention: Tensor
    features: Tensor
    y_domain: Tensor | None = None
    patch_corners: np.ndarray | None = None


class GlobalLocalFusionNet:
    """Composed classifier; see module docstring for the data flow."""

    def __init__(self, cfg=None, rng=None):
        cfg = cfg or ModelConfig()
        rng = rng if rng is not None else np.random.default_rng()
        self.cfg = cfg
        self.global_module = _GlobalModule(cfg, rng)
        self.local_module = _LocalModule(cfg, rng)
        feat = cfg.local_channels[-1]
        self.attn_scorer = L.Linear(feat, 1, rng=rng)
        self.local_head = L.Linear(feat, 2, rng=rng)
        fused = cfg.channels + feat
        self.fusion_head = L.Linear(fused, 2, rng=rng)
        self.domain_head = DomainHead(fused, cfg.domain_widths, rng=rng)
        self.tt_batch_size = None

    # -- forward ----------------------------------------------------------

    def forward(self, x, lambda_domain=None):
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels or x.shape[2] != self.cfg.image_size:
            raise ValueError(
                f"expected [N,{self.cfg.in_channels},{self.cfg.image_size},"
                f"{self.cfg.image_size}] input, got {x.shape}"
            )
        n = x.shape[0]
        k = self.cfg.patch.count
        saliency, global_feat = self.global_module(x)
        y_global = L.top_t_pool(saliency, self.cfg.top_t)
        raw_patches, corners = extract_patches(saliency, x, self.cfg.patch)
        patch_batch = Tensor(raw_patches.reshape(n * k, *raw_patches.shape[2:]))
        local_feat = self.local_module(patch_batch)
        scores = self.attn_scorer(local_feat).reshape((n, k))
        attention = L.softmax(scores)
        pooled = L.attention_pool(local_feat.reshape((n, k, -1)), attention)
        y_local = L.sigmoid(self.local_head(pooled))
        features = concat([global_feat, pooled], axis=1)
        y_fusion = L.sigmoid(self.fusion_head(features))
        y_domain = None
        if lambda_domain is not None:
            y_domain = self.domain_head(features, lambda_domain)
        return ModelOutput(
            y_global, y_local, y_fusion, saliency, attention, features, y_domain, corners
        )

    def __call__(self, x, lambda_domain=None):
        return self.forward(x, lambda_domain)

    # -- parameter access ---------------------------------------------------

    def named_parameters(self):
        """All learnable tensors as (name, tensor), stable depth order."""
        named = []
        gm = self.global_module
        named += [(f"global.stem.conv.{n}", p) for n, p in gm.stem_conv.parameters()]
        named += [(f"global.stem.bn.{n}", p) for n, p in gm.stem_bn.parameters()]
        for i, blk in enumerate(gm.blocks, start=1):
            for piece in ("conv1", "bn1", "conv2", "bn2"):
                obj = getattr(blk, piece)
                named += [(f"global.block{i}.{piece}.{n}", p) for n, p in obj.parameters()]
        named += [(f"global.saliency.{n}", p) for n, p in gm.saliency_conv.parameters()]
        lm = self.local_module
        for piece in ("conv1", "bn1", "conv2", "bn2"):
            obj = getattr(lm, piece)
            named += [(f"local.{piece}.{n}", p) for n, p in obj.parameters()]
        named += [(f"local.attn.{n}", p) for n, p in self.attn_scorer.parameters()]
        named += [(f"local.head.{n}", p) for n, p in self.local_head.parameters()]
        named += [(f"fusion.head.{n}", p) for n, p in self.fusion_head.parameters()]
        named += [(f"domain.{n}", p) for n, p in self.domain_head.parameters()]
        return named

    def bn_layers(self):
        """(name, layer) pairs in network depth order."""
        gm = self.global_module
        out = [(gm.stem_bn.name, gm.stem_bn)]
        for blk in gm.blocks:
            out += [(blk.bn1.name, blk.bn1), (blk.bn2.name, blk.bn2)]
        lm = self.local_module
        out += [(lm.bn1.name, lm.bn1), (lm.bn2.name, lm.bn2)]
        return out

    def conv_layers(self):
        gm = self.global_module
        out = [("global.stem.conv", gm.stem_conv)]
        for i, blk in enumerate(gm.blocks, start=1):
            out += [(f"global.block{i}.conv1", blk.conv1), (f"global.block{i}.conv2", blk.conv2)]
        out.append(("global.saliency", gm.saliency_conv))
        out += [("local.conv1", self.local_module.conv1), ("local.conv2", self.local_module.conv2)]
        return out

    def linear_layers(self):
        out = [("local.attn", self.attn_scorer), ("local.head", self.local_head),
               ("fusion.head", self.fusion_head)]
        for i, fc in enumerate(self.domain_head.hidden, start=1):
            out.append((f"domain.fc{i}", fc))
        out.append(("domain.out", self.domain_head.out))
        return out

    # -- state snapshots (model selection) -----------------------------------

    def state_arrays(self):
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        for name, bn in self.bn_layers():
            state[f"{name}.running_mean"] = bn.running_mean.copy()
            state[f"{name}.running_var"] = bn.running_var.copy()
        return state

    def load_state_arrays(self, state):
        for name, p in self.named_parameters():
            p.data = state[name].copy()
        for name, bn in self.bn_layers():
            bn.running_mean = state[f"{name}.running_mean"].copy()
            bn.running_var = state[f"{name}.running_var"].copy()


# -- checkpoint format --------------------------------------------------------
#
# magic "BNCK", u32 manifest length, manifest JSON (utf-8), then the named
# tensors back to back in the "BNST" format at the offsets recorded in the
# manifest (relative to the payload start).


def save_checkpoint(path, model, meta=None):
    state = model.state_arrays()
    import io

    payload = io.BytesIO()
    entries = []
    for name, arr in state.items():
        entries.append({"name": name, "offset": payload.tell()})
        write_tensor(payload, arr)
    manifest = {
        "format": 1,
        "model_config": asdict(model.cfg),
        "tensors": entries,
        "bn_scalars": {
            name: {"momentum": bn.momentum, "eps": bn.eps} for name, bn in model.bn_layers()
        },
        "meta": meta or {},
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(payload.getvalue())


def load_checkpoint(path):
    """Rebuild a model from a checkpoint; returns (model, meta)."""
    with open(path, "rb") as f:
        if f.read(4) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (mlen,) = struct.unpack("<I", f.read(4))
        manifest = json.loads(f.read(mlen).decode("utf-8"))
        base = f.tell()
        state = {}
        for entry in manifest["tensors"]:
            f.seek(base + entry["offset"])
            state[entry["name"]] = read_tensor(f)
    cfg = ModelConfig.from_dict(manifest["model_config"])
    model = GlobalLocalFusionNet(cfg, rng=np.random.default_rng(0))
    model.load_state_arrays(state)
    for name, bn in model.bn_layers():
        scalars = manifest["bn_scalars"][name]
        bn.momentum = scalars["momentum"]
        bn.eps = scalars["eps"]
        bn.mode = StatsMode.TR
    return model, manifest.get("meta", {})
