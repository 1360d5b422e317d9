"""Two-stage convolutional embedder with a parallel spatial-attention branch.

Structure mirrors the full-scale reference (stage1 -> stage2 with total
stride 16, attention branch tapping the stage1 output) at desk-scale
channel counts:

    stem/stage1 (stride 8) --+--> stage2 (stride 2) --> * mask --> remainder
                             |                             ^        + GAP
                             +--> 3 bottlenecks + SE ------+        + 2 FC
                                  channel mean + sigmoid            + L2 norm

The attention branch emits one sigmoid mask per image on the stage2 grid
(16 x 16 for a 256 input) that is broadcast over all stage2 channels.
BatchNorm re-centers activations across the batch during training; radio-
graphs share so much layout that without it all embeddings start near-
parallel and cosine gradients vanish.  There are no stochastic layers, so
evaluation outputs are pure functions of the input.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import HashMismatch, InvalidConfig, SchemaError, ShapeMismatch
from .preprocess import ImageBuffer

TOTAL_STRIDE = 16  # stem conv 2 * pool 2 * stage1 block 2 * stage2 block 2


@dataclass
class EmbedderConfig:
    input_side: int = 256
    stage1_channels: int = 16
    stage2_channels: int = 32
    stage2_grid: int = 16
    attention_blocks: int = 3
    se_reduction: int = 4
    embed_dim: int = 64
    feature_dim: int = 256
    proj_hidden: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.stage2_grid * TOTAL_STRIDE != self.input_side:
            raise InvalidConfig(
                f"stage2_grid {self.stage2_grid} x stride {TOTAL_STRIDE} "
                f"!= input_side {self.input_side}"
            )
        if not (32 <= self.embed_dim <= 512):
            raise InvalidConfig(f"embed_dim {self.embed_dim} outside [32, 512]")
        if self.attention_blocks < 1:
            raise InvalidConfig("attention_blocks must be >= 1")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "EmbedderConfig":
        return cls(**obj)


def _bn(channels: int) -> nn.BatchNorm2d:
    return nn.BatchNorm2d(channels)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.norm1 = _bn(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.norm2 = _bn(cout)
        self.skip = (
            nn.Conv2d(cin, cout, 1, stride, bias=False)
            if stride != 1 or cin != cout
            else nn.Identity()
        )

    def forward(self, x):
        h = torch.relu(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return torch.relu(h + self.skip(x))


class Bottleneck(nn.Module):
    """1x1 reduce -> 3x3 -> 1x1 expand residual block.

    With final_relu off the block emits a signed map; the attention branch
    needs that on its last block or sigmoid(channel mean) would be floored
    at 0.5 and masks could never switch regions off.
    """

    def __init__(self, channels: int, stride: int = 1, reduction: int = 4,
                 final_relu: bool = True):
        super().__init__()
        mid = max(channels // reduction, 4)
        self.final_relu = final_relu
        self.conv1 = nn.Conv2d(channels, mid, 1, bias=False)
        self.norm1 = _bn(mid)
        self.conv2 = nn.Conv2d(mid, mid, 3, stride, 1, bias=False)
        self.norm2 = _bn(mid)
        self.conv3 = nn.Conv2d(mid, channels, 1, bias=False)
        self.norm3 = _bn(channels)
        self.skip = (
            nn.Conv2d(channels, channels, 1, stride, bias=False)
            if stride != 1
            else nn.Identity()
        )

    def forward(self, x):
        h = torch.relu(self.norm1(self.conv1(x)))
        h = torch.relu(self.norm2(self.conv2(h)))
        h = self.norm3(self.conv3(h))
        h = h + self.skip(x)
        return torch.relu(h) if self.final_relu else h


class SqueezeExcite(nn.Module):
    def __init__(self, channels: int, reduction: int):
        super().__init__()
        mid = max(channels // reduction, 2)
        self.fc1 = nn.Linear(channels, mid)
        self.fc2 = nn.Linear(mid, channels)

    def forward(self, x):
        w = x.mean(dim=(2, 3))
        w = torch.sigmoid(self.fc2(torch.relu(self.fc1(w))))
        return x * w[:, :, None, None]


class AttentionBranch(nn.Module):
    """Bottleneck stack + SE + channel-wise averaging + sigmoid.

    First bottleneck strides by 2 to land on the stage2 grid.  The
    channel-averaged attention logits pass through a norm layer before the
    sigmoid: the residual stack biases them positive, and without that
    centering every mask cell saturates toward 1 and the map carries no
    spatial selectivity.  A fixed gain then widens the sigmoid's working
    range over the normalized logits.
    """

    SIGMOID_GAIN = 4.0

    def __init__(self, channels: int, blocks: int, se_reduction: int):
        super().__init__()
        stack = [
            Bottleneck(channels, stride=2 if i == 0 else 1, final_relu=i < blocks - 1)
            for i in range(blocks)
        ]
        self.blocks = nn.Sequential(*stack)
        self.se = SqueezeExcite(channels, se_reduction)
        self.logit_norm = _bn(1)

    def forward(self, x):
        h = self.se(self.blocks(x)).mean(dim=1, keepdim=True)
        return torch.sigmoid(self.SIGMOID_GAIN * self.logit_norm(h))


class EmbedderNet(nn.Module):
    def __init__(self, cfg: EmbedderConfig):
        super().__init__()
        self.cfg = cfg
        c1, c2 = cfg.stage1_channels, cfg.stage2_channels
        stem = max(c1 // 2, 4)
        self.stage1 = nn.Sequential(
            # avg pool, not max: zero-padded bands make max ties exact, which
            # breaks finite-difference gradient checks at the base point
            nn.Conv2d(1, stem, 3, 2, 1, bias=False), _bn(stem), nn.ReLU(),
            nn.AvgPool2d(2),
            ResBlock(stem, c1, stride=2),
        )
        self.stage2 = ResBlock(c1, c2, stride=2)
        self.attention = AttentionBranch(c1, cfg.attention_blocks, cfg.se_reduction)
        # ends on a norm layer (no ReLU) so pooled features stay centered
        self.remainder = nn.Sequential(
            nn.Conv2d(c2, cfg.feature_dim, 3, 2, 1, bias=False),
            _bn(cfg.feature_dim),
            nn.ReLU(),
            nn.Conv2d(cfg.feature_dim, cfg.feature_dim, 1, bias=False),
            _bn(cfg.feature_dim),
        )
        self.proj = nn.Sequential(
            nn.Linear(cfg.feature_dim, cfg.proj_hidden),
            nn.ReLU(),
            nn.Linear(cfg.proj_hidden, cfg.embed_dim),
        )

    def _check_input(self, x: torch.Tensor) -> None:
        if x.ndim != 4 or x.shape[2] != self.cfg.input_side or x.shape[3] != self.cfg.input_side:
            raise ShapeMismatch(
                f"expected (B, 1, {self.cfg.input_side}, {self.cfg.input_side}), got {tuple(x.shape)}"
            )

    def masks(self, x: torch.Tensor) -> torch.Tensor:
        self._check_input(x)
        return self.attention(self.stage1(x))

    def pooled_features(
        self,
        x: torch.Tensor,
        use_attention: bool = True,
        forced_mask: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """Attention-masked stage2 output through the remainder + GAP.

        forced_mask substitutes the attention branch output (test hook for
        the mask-of-ones identity).
        """
        self._check_input(x)
        h1 = self.stage1(x)
        h2 = self.stage2(h1)
        if forced_mask is not None:
            h2 = h2 * forced_mask
        elif use_attention:
            h2 = h2 * self.attention(h1)
        return self.remainder(h2).mean(dim=(2, 3))

    def forward(
        self,
        x: torch.Tensor,
        use_attention: bool = True,
        forced_mask: torch.Tensor | None = None,
    ) -> torch.Tensor:
        feats = self.pooled_features(x, use_attention, forced_mask)
        emb = self.proj(feats)
        return nn.functional.normalize(emb, p=2, dim=1)


def _init_parameters(net: EmbedderNet, seed: int) -> None:
    """He fan-in init for convs/linears, seeded; norms start at identity.

    The projection output bias gets a small seeded draw instead of zero so
    the normalized embedding stays defined even for an all-zero feature
    vector (e.g. a blank input through the bias-free conv stack).
    """
    gen = torch.Generator().manual_seed(seed)
    for module in net.modules():
        if isinstance(module, (nn.Conv2d, nn.Linear)):
            fan_in = module.weight[0].numel()
            std = (2.0 / fan_in) ** 0.5
            with torch.no_grad():
                module.weight.normal_(0.0, std, generator=gen)
                if module.bias is not None:
                    module.bias.zero_()
        elif isinstance(module, nn.BatchNorm2d):
            module.reset_running_stats()
            with torch.no_grad():
                module.weight.fill_(1.0)
                module.bias.zero_()
    with torch.no_grad():
        net.proj[-1].bias.normal_(0.0, 1e-2, generator=gen)


@dataclass
class ModelCheckpoint:
    net: EmbedderNet
    config: EmbedderConfig
    iteration: int = 0
    train_seed: int = 0

    @property
    def content_hash(self) -> str:
        return parameter_hash(self.net)


def parameter_hash(net: nn.Module) -> str:
    """sha256 over name-sorted float32 little-endian parameter bytes."""
    h = hashlib.sha256()
    for name, p in sorted(net.state_dict().items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.detach().cpu().numpy(), dtype="<f4").tobytes())
    return h.hexdigest()


def init_model(cfg: EmbedderConfig) -> ModelCheckpoint:
    """Build a model with seeded He initialization; eval mode by default."""
    net = EmbedderNet(cfg)
    _init_parameters(net, cfg.seed)
    net.eval()
    return ModelCheckpoint(net=net, config=cfg, iteration=0, train_seed=cfg.seed)


def save_checkpoint(ckpt: ModelCheckpoint, out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.save(ckpt.net.state_dict(), out_dir / "weights.bin")
    meta = {
        "config": ckpt.config.to_json(),
        "iteration": ckpt.iteration,
        "train_seed": ckpt.train_seed,
        "content_hash": ckpt.content_hash,
    }
    (out_dir / "meta.json").write_text(json.dumps(meta, indent=2))
    return out_dir


def load_checkpoint(path: str | Path, verify_hash: bool = True) -> ModelCheckpoint:
    path = Path(path)
    meta_path, weights_path = path / "meta.json", path / "weights.bin"
    if not meta_path.exists() or not weights_path.exists():
        raise SchemaError(f"checkpoint directory {path} is missing meta.json or weights.bin")
    try:
        meta = json.loads(meta_path.read_text())
        cfg = EmbedderConfig.from_json(meta["config"])
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise SchemaError(f"bad checkpoint meta: {exc}") from None
    net = EmbedderNet(cfg)
    state = torch.load(weights_path, map_location="cpu", weights_only=True)
    try:
        net.load_state_dict(state)
    except RuntimeError as exc:
        raise SchemaError(f"weights do not match config: {exc}") from None
    net.eval()
    ckpt = ModelCheckpoint(
        net=net,
        config=cfg,
        iteration=int(meta.get("iteration", 0)),
        train_seed=int(meta.get("train_seed", cfg.seed)),
    )
    if verify_hash and meta.get("content_hash") not in (None, ckpt.content_hash):
        raise HashMismatch(
            f"checkpoint {path} content hash {ckpt.content_hash[:12]} "
            f"!= recorded {meta['content_hash'][:12]}"
        )
    return ckpt


def _as_batch(model: ModelCheckpoint, image: ImageBuffer) -> torch.Tensor:
    px = image.pixels
    if px.shape != (model.config.input_side, model.config.input_side):
        raise ShapeMismatch(
            f"image shape {px.shape} != ({model.config.input_side}, {model.config.input_side})"
        )
    dtype = next(model.net.parameters()).dtype
    return torch.from_numpy(np.ascontiguousarray(px)).to(dtype)[None, None]


def embed(model: ModelCheckpoint, image: ImageBuffer) -> np.ndarray:
    """Unit-norm embedding with the attention mask applied."""
    with torch.no_grad():
        out = model.net(_as_batch(model, image), use_attention=True)
    return out[0].numpy().astype(np.float64)


def embed_no_attention(model: ModelCheckpoint, image: ImageBuffer) -> np.ndarray:
    """Unit-norm embedding bypassing the attention branch entirely."""
    with torch.no_grad():
        out = model.net(_as_batch(model, image), use_attention=False)
    return out[0].numpy().astype(np.float64)


def attention_map(model: ModelCheckpoint, image: ImageBuffer) -> np.ndarray:
    """The sigmoid mask used inside embed(), on the stage2 grid."""
    with torch.no_grad():
        mask = model.net.masks(_as_batch(model, image))
    return mask[0, 0].numpy().astype(np.float64)


def features(model: ModelCheckpoint, image: ImageBuffer) -> np.ndarray:
    """Pre-projection pooled features (transfer-learning output)."""
    with torch.no_grad():
        out = model.net.pooled_features(_as_batch(model, image), use_attention=True)
    return out[0].numpy().astype(np.float64)


def embed_batch(
    model: ModelCheckpoint,
    images: list[ImageBuffer],
    batch_size: int = 48,
    use_attention: bool = True,
) -> np.ndarray:
    """Vectorized embed() over many buffers (evaluation mode)."""
    rows = []
    dtype = next(model.net.parameters()).dtype
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            chunk = images[start : start + batch_size]
            x = torch.stack(
                [torch.from_numpy(np.ascontiguousarray(b.pixels)).to(dtype) for b in chunk]
            )[:, None]
            rows.append(model.net(x, use_attention=use_attention).numpy())
    if not rows:
        return np.zeros((0, model.config.embed_dim))
    return np.concatenate(rows).astype(np.float64)


def feature_batch(
    model: ModelCheckpoint,
    images: list[ImageBuffer],
    batch_size: int = 48,
    use_attention: bool = True,
) -> np.ndarray:
    """Vectorized features() over many buffers (evaluation mode)."""
    rows = []
    dtype = next(model.net.parameters()).dtype
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            chunk = images[start : start + batch_size]
            x = torch.stack(
                [torch.from_numpy(np.ascontiguousarray(b.pixels)).to(dtype) for b in chunk]
            )[:, None]
            rows.append(model.net.pooled_features(x, use_attention=use_attention).numpy())
    if not rows:
        return np.zeros((0, model.config.feature_dim))
    return np.concatenate(rows).astype(np.float64)
