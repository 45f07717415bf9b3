"""The six network blocks and the bundle/checkpoint container that holds them.

Blocks take batched tensors: clouds are ``(B, N, 3)``, codes ``(B, latent)``,
mode vectors ``(B, mode_dim)``. Point-set inputs are first put into a canonical
lexicographic order, so every reduction over points (attention sums, batch
statistics, max-pooling) runs in the same order for any permutation of the
input and the outputs are exactly equal.
"""

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn

from .geometry import as_points

BLOCKS = ("encoder", "decoder", "generator", "discriminator", "mode_encoder", "classifier")


@dataclass(frozen=True)
class NetConfig:
    cloud_size: int = 1024
    latent_dim: int = 256
    mode_dim: int = 64
    n_classes: int = 10
    enc_embed: Tuple[int, ...] = (64, 128)
    attn_blocks: int = 4
    enc_fuse: int = 1024
    enc_head: Tuple[int, ...] = (512,)
    dec_hidden: Tuple[int, ...] = (512, 1024)
    gen_hidden: Tuple[int, ...] = (512, 512)
    disc_hidden: Tuple[int, ...] = (256, 128)
    mode_point: Tuple[int, ...] = (64, 128, 256)
    mode_head: Tuple[int, ...] = (128,)
    vae_dec_hidden: Tuple[int, ...] = (256, 512)
    cls_point: Tuple[int, ...] = (64, 128, 1024)
    cls_head: Tuple[int, ...] = (512, 256)
    batch_norm: bool = True

    @classmethod
    def from_dict(cls, data: dict) -> "NetConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown network settings: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in data.items()})

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def miniature(cls, width: int = 8, n_points: int = 16, n_classes: int = 3) -> "NetConfig":
        """Tiny variant of every block, used for finite-difference checks."""
        w = width
        return cls(
            cloud_size=n_points, latent_dim=w, mode_dim=4, n_classes=n_classes,
            enc_embed=(w, w), attn_blocks=4, enc_fuse=w, enc_head=(w,),
            dec_hidden=(w, w), gen_hidden=(w, w), disc_hidden=(w, w),
            mode_point=(w, w, w), mode_head=(w,), vae_dec_hidden=(w, w),
            cls_point=(w, w, w), cls_head=(w, w),
        )

    @classmethod
    def desk(cls, n_points: int = 256, n_classes: int = 4, mode_dim: int = 8) -> "NetConfig":
        """Narrower blocks for single-machine CPU runs on the toy domains."""
        return cls(
            cloud_size=n_points, latent_dim=256, mode_dim=mode_dim, n_classes=n_classes,
            enc_embed=(32, 32), attn_blocks=2, enc_fuse=256, enc_head=(256,),
            dec_hidden=(256, 512), gen_hidden=(256, 256), disc_hidden=(128, 64),
            mode_point=(32, 64, 128), mode_head=(64,), vae_dec_hidden=(128, 256),
            cls_point=(32, 64, 256), cls_head=(128, 64),
        )


# --------------------------------------------------------------------------
# building blocks
# --------------------------------------------------------------------------

def init_linear(layer: nn.Linear, gen: torch.Generator) -> None:
    bound = 1.0 / math.sqrt(layer.in_features)
    with torch.no_grad():
        layer.weight.uniform_(-bound, bound, generator=gen)
        if layer.bias is not None:
            layer.bias.uniform_(-bound, bound, generator=gen)


def canonical_order(x: torch.Tensor) -> torch.Tensor:
    """Sort each cloud's points lexicographically by (x, y, z)."""
    idx = torch.arange(x.shape[1], device=x.device).expand(x.shape[0], -1)
    for axis in (2, 1, 0):
        keys = torch.gather(x[..., axis].detach(), 1, idx)
        order = torch.sort(keys, dim=1, stable=True).indices
        idx = torch.gather(idx, 1, order)
    return torch.gather(x, 1, idx.unsqueeze(-1).expand(-1, -1, x.shape[2]))


class PointBN(nn.Module):
    """BatchNorm over the channel axis of (B, N, C) features."""

    def __init__(self, channels: int):
        super().__init__()
        self.bn = nn.BatchNorm1d(channels)

    def forward(self, x):
        return self.bn(x.reshape(-1, x.shape[-1])).view(x.shape)


def mlp(dims: Sequence[int], final_act: bool, norm=None) -> nn.Sequential:
    """Linear layers with ReLU between them; ``norm`` builds a norm layer per hidden width."""
    layers = []
    for i in range(len(dims) - 1):
        layers.append(nn.Linear(dims[i], dims[i + 1]))
        last = i == len(dims) - 2
        if not last or final_act:
            if norm is not None:
                layers.append(norm(dims[i + 1]))
            layers.append(nn.ReLU())
    return nn.Sequential(*layers)


class OffsetAttention(nn.Module):
    """Single-head self-attention over points with an offset residual."""

    def __init__(self, width: int, batch_norm: bool = True):
        super().__init__()
        qk = max(width // 4, 1)
        self.q = nn.Linear(width, qk, bias=False)
        self.k = nn.Linear(width, qk, bias=False)
        self.v = nn.Linear(width, width)
        self.scale = 1.0 / math.sqrt(qk)
        self.out = mlp([width, width], final_act=True, norm=PointBN if batch_norm else None)

    def forward(self, x):
        energy = torch.bmm(self.q(x), self.k(x).transpose(1, 2)) * self.scale
        attn = torch.softmax(energy, dim=-1)
        y = torch.bmm(attn, self.v(x))
        return x + self.out(x - y)


class Encoder(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        norm = PointBN if cfg.batch_norm else None
        self.cloud_size = cfg.cloud_size
        self.embed = mlp([3, *cfg.enc_embed], final_act=True, norm=norm)
        width = cfg.enc_embed[-1]
        self.blocks = nn.ModuleList([OffsetAttention(width, cfg.batch_norm) for _ in range(cfg.attn_blocks)])
        self.fuse = mlp([width * cfg.attn_blocks, cfg.enc_fuse], final_act=True, norm=norm)
        self.head = mlp([cfg.enc_fuse, *cfg.enc_head, cfg.latent_dim], final_act=False)

    def forward(self, x):
        if x.shape[1] != self.cloud_size:
            raise ValueError(f"encoder expects {self.cloud_size} points, got {x.shape[1]}")
        h = self.embed(canonical_order(x))
        outs = []
        for block in self.blocks:
            h = block(h)
            outs.append(h)
        feat = self.fuse(torch.cat(outs, dim=-1)).max(dim=1).values
        return self.head(feat)


class Decoder(nn.Module):
    def __init__(self, in_dim: int, hidden: Sequence[int], cloud_size: int):
        super().__init__()
        self.cloud_size = cloud_size
        self.net = mlp([in_dim, *hidden, cloud_size * 3], final_act=False)

    def forward(self, code):
        return self.net(code).view(code.shape[0], self.cloud_size, 3)


class Generator(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.net = mlp([cfg.latent_dim + cfg.mode_dim, *cfg.gen_hidden, cfg.latent_dim], final_act=False)

    def forward(self, code, z):
        return self.net(torch.cat([code, z], dim=1))


class Discriminator(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.net = mlp([cfg.latent_dim, *cfg.disc_hidden, 1], final_act=False)

    def forward(self, code):
        return self.net(code).squeeze(-1)


class PointNetFeatures(nn.Module):
    """Shared per-point MLP followed by max-pooling."""

    def __init__(self, dims: Sequence[int], batch_norm: bool):
        super().__init__()
        self.net = mlp([3, *dims], final_act=True, norm=PointBN if batch_norm else None)

    def forward(self, x):
        return self.net(canonical_order(x)).max(dim=1).values


class ModeEncoder(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.mode_dim = cfg.mode_dim
        self.features = PointNetFeatures(cfg.mode_point, cfg.batch_norm)
        norm = nn.BatchNorm1d if cfg.batch_norm else None
        self.head = mlp([cfg.mode_point[-1], *cfg.mode_head, 2 * cfg.mode_dim], final_act=False, norm=norm)

    def forward(self, x):
        out = self.head(self.features(x))
        return out[:, : self.mode_dim], out[:, self.mode_dim:]


class Classifier(nn.Module):
    """PointNet classifier; ``forward`` returns logits."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.features = PointNetFeatures(cfg.cls_point, cfg.batch_norm)
        norm = nn.BatchNorm1d if cfg.batch_norm else None
        self.head = mlp([cfg.cls_point[-1], *cfg.cls_head, cfg.n_classes], final_act=False, norm=norm)

    def forward(self, x):
        return self.head(self.features(x))

    def probs(self, x):
        return torch.softmax(self.forward(x), dim=-1)


def build_block(name: str, cfg: NetConfig, seed: int) -> nn.Module:
    if name == "encoder":
        module = Encoder(cfg)
    elif name == "decoder":
        module = Decoder(cfg.latent_dim, cfg.dec_hidden, cfg.cloud_size)
    elif name == "generator":
        module = Generator(cfg)
    elif name == "discriminator":
        module = Discriminator(cfg)
    elif name == "mode_encoder":
        module = ModeEncoder(cfg)
    elif name == "vae_decoder":
        module = Decoder(cfg.mode_dim, cfg.vae_dec_hidden, cfg.cloud_size)
    elif name == "classifier":
        module = Classifier(cfg)
    else:
        raise ValueError(f"unknown block {name!r}")
    # per-block stream so one block's init never depends on which others exist
    gen = torch.Generator().manual_seed(_block_seed(seed, name))
    for layer in module.modules():
        if isinstance(layer, nn.Linear):
            init_linear(layer, gen)
    return module


def _block_seed(seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


# --------------------------------------------------------------------------
# bundle + checkpoints
# --------------------------------------------------------------------------

@dataclass
class ModelBundle:
    config: NetConfig
    blocks: Dict[str, nn.Module] = field(default_factory=dict)
    frozen: Dict[str, bool] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @classmethod
    def initialize(cls, config: NetConfig, seed: int, names: Sequence[str] = BLOCKS) -> "ModelBundle":
        bundle = cls(config, meta={"stage": "init", "epoch": 0, "seed": seed})
        for name in names:
            bundle.blocks[name] = build_block(name, config, seed)
            bundle.frozen[name] = False
        return bundle

    def __getitem__(self, name: str) -> nn.Module:
        try:
            return self.blocks[name]
        except KeyError:
            raise KeyError(f"bundle has no {name!r} block (present: {sorted(self.blocks)})") from None

    def __contains__(self, name: str) -> bool:
        return name in self.blocks

    def freeze(self, *names: str) -> None:
        for name in names:
            self.frozen[name] = True
            block = self[name]
            block.eval()
            for p in block.parameters():
                p.requires_grad_(False)

    def unfreeze(self, *names: str) -> None:
        for name in names:
            self.frozen[name] = False
            for p in self[name].parameters():
                p.requires_grad_(True)

    def trainable_parameters(self, names: Sequence[str]):
        params = []
        for name in names:
            if not self.frozen.get(name, False):
                params.extend(self[name].parameters())
        return params

    def set_mode(self, training: bool) -> None:
        """Train mode for unfrozen blocks; frozen blocks always stay in eval mode."""
        for name, block in self.blocks.items():
            block.train(training and not self.frozen.get(name, False))

    def merge(self, other: "ModelBundle", names: Sequence[str]) -> None:
        for name in names:
            self.blocks[name] = other[name]
            self.frozen[name] = other.frozen.get(name, False)

    def double(self) -> "ModelBundle":
        for block in self.blocks.values():
            block.double()
        return self

    def state_arrays(self) -> Dict[str, np.ndarray]:
        out = {}
        for name in sorted(self.blocks):
            for key, tensor in self.blocks[name].state_dict().items():
                out[f"{name}.{key}"] = tensor.detach().cpu().numpy()
        return out

    def digest(self) -> str:
        h = hashlib.sha256()
        for key, arr in self.state_arrays().items():
            h.update(key.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def save_checkpoint(bundle: ModelBundle, path) -> Path:
    """Write metadata.json, manifest.json and one ``<block>.<param>.f32`` file per tensor."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {}
    for key, arr in bundle.state_arrays().items():
        fname = f"{key}.f32"
        arr.astype("<f4").tofile(path / fname)
        manifest[key] = {"file": fname, "shape": list(arr.shape), "dtype": str(arr.dtype)}
    meta = dict(bundle.meta)
    meta.update(
        net_config=bundle.config.to_dict(),
        frozen={k: bool(bundle.frozen.get(k, False)) for k in sorted(bundle.blocks)},
        blocks={name: {k: v["shape"] for k, v in manifest.items() if k.startswith(name + ".")}
                for name in sorted(bundle.blocks)},
    )
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    (path / "metadata.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    return path


def load_checkpoint(path, names: Optional[Sequence[str]] = None) -> ModelBundle:
    path = Path(path)
    meta_file = path / "metadata.json"
    if not meta_file.is_file():
        raise FileNotFoundError(f"no checkpoint at {path} (missing metadata.json)")
    meta = json.loads(meta_file.read_text())
    manifest = json.loads((path / "manifest.json").read_text())
    cfg = NetConfig.from_dict(meta.pop("net_config"))
    frozen = meta.pop("frozen")
    meta.pop("blocks", None)
    names = list(frozen) if names is None else list(names)
    bundle = ModelBundle(cfg, meta=meta)
    for name in names:
        if name not in frozen:
            raise KeyError(f"checkpoint {path} has no {name!r} block")
        block = build_block(name, cfg, seed=0)
        state = {}
        for key, ref in block.state_dict().items():
            entry = manifest[f"{name}.{key}"]
            raw = np.fromfile(path / entry["file"], dtype="<f4").reshape(entry["shape"])
            state[key] = torch.from_numpy(raw.astype(entry["dtype"])).to(ref.dtype)
        block.load_state_dict(state)
        bundle.blocks[name] = block
        bundle.frozen[name] = False
        if frozen[name]:
            bundle.freeze(name)
    return bundle


# --------------------------------------------------------------------------
# single-object conveniences (inference mode)
# --------------------------------------------------------------------------

def _run(block: nn.Module, *args, method: str = "forward"):
    was_training = block.training
    block.eval()
    try:
        with torch.no_grad():
            return getattr(block, method)(*args)
    finally:
        block.train(was_training)


def _as_tensor(block: nn.Module, value) -> torch.Tensor:
    return torch.as_tensor(np.asarray(value)).to(next(block.parameters()).dtype)


def encode(bundle: ModelBundle, cloud) -> np.ndarray:
    block = bundle["encoder"]
    return _run(block, _as_tensor(block, as_points(cloud))[None])[0].numpy()


def decode(bundle: ModelBundle, code) -> np.ndarray:
    block = bundle["decoder"]
    return _run(block, _as_tensor(block, code)[None])[0].numpy()


def generate(bundle: ModelBundle, code, z) -> np.ndarray:
    block = bundle["generator"]
    return _run(block, _as_tensor(block, code)[None], _as_tensor(block, z)[None])[0].numpy()


def discriminate(bundle: ModelBundle, code) -> float:
    block = bundle["discriminator"]
    return float(_run(block, _as_tensor(block, code)[None])[0])


def mode_encode(bundle: ModelBundle, cloud) -> Tuple[np.ndarray, np.ndarray]:
    block = bundle["mode_encoder"]
    mu, logvar = _run(block, _as_tensor(block, as_points(cloud))[None])
    return mu[0].numpy(), logvar[0].numpy()


def classify(bundle: ModelBundle, cloud) -> np.ndarray:
    block = bundle["classifier"]
    return _run(block, _as_tensor(block, as_points(cloud))[None], method="probs")[0].numpy()


def reparameterize(mu: torch.Tensor, logvar: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    eps = torch.randn(mu.shape, generator=gen, dtype=mu.dtype)
    return mu + torch.exp(0.5 * logvar) * eps
