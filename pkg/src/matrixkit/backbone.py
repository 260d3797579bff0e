"""Multi-view multi-modal diffusion transformer.

Condition maps (any view, any modality) are patchified into tokens and run
through a self-attention encoder. Noisy target maps go through a decoder whose
blocks apply self-attention, cross-attention into the encoder output and an
MLP, each modulated by the diffusion timestep. Grid positions enter through
2-D rotary embeddings inside attention; view and modality identities are
added as fixed sinusoids with separate base frequencies.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .depthmap import DepthMap, DisparityMap, decode_disparity, encode_disparity
from .errors import ConfigError, NothingToGenerateError, SceneIOError, ShapeError, ViewRangeError
from .geometry import Camera, RayMap, camera_to_raymap

MODALITIES = ("rgb", "pose", "depth")
CHANNELS = {"rgb": 3, "pose": 6, "depth": 2}
MODALITY_ID = {m: i for i, m in enumerate(MODALITIES)}


@dataclass
class ModelConfig:
    hidden_enc: int = 128
    hidden_dec: int = 192
    enc_blocks: int = 4
    dec_blocks: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0
    max_views: int = 4
    # per-modality (H, W) map resolution and patch size
    resolutions: dict = field(default_factory=lambda: {"rgb": (32, 32), "pose": (8, 8), "depth": (16, 16)})
    patchify: dict = field(default_factory=lambda: {"rgb": 4, "pose": 1, "depth": 2})
    view_base: float = 100.0
    modality_base: float = 1000.0
    time_base: float = 10000.0
    rope_base: float = 100.0
    time_freq_dim: int = 64
    # fixed codec constants for the diffusable encodings
    moment_scale: float = 1.0
    disparity_shift: float = 1.0
    disparity_scale: float = 1.0

    def __post_init__(self):
        self.resolutions = {m: tuple(int(x) for x in v) for m, v in self.resolutions.items()}
        self.patchify = {m: int(v) for m, v in self.patchify.items()}
        self.validate()

    def validate(self) -> None:
        if set(self.resolutions) != set(MODALITIES) or set(self.patchify) != set(MODALITIES):
            raise ConfigError(f"resolutions and patchify must cover exactly {MODALITIES}")
        if self.max_views < 2:
            raise ConfigError("max_views must be >= 2")
        for m in MODALITIES:
            h, w = self.resolutions[m]
            p = self.patchify[m]
            if p < 1 or h % p or w % p:
                raise ConfigError(f"{m} resolution {h}x{w} is not divisible by patch size {p}")
        grids = {m: self.token_grid(m) for m in MODALITIES}
        if len(set(grids.values())) != 1:
            raise ConfigError(f"modalities yield unequal token grids per view: {grids}")
        for d in (self.hidden_enc, self.hidden_dec):
            if d % self.heads or (d // self.heads) % 4:
                raise ConfigError(f"hidden size {d} must split into {self.heads} heads with head dim divisible by 4")

    def token_grid(self, modality: str) -> tuple[int, int]:
        h, w = self.resolutions[modality]
        p = self.patchify[modality]
        return h // p, w // p

    def tokens_per_view(self, modality: str) -> int:
        gh, gw = self.token_grid(modality)
        return gh * gw

    def patch_dim(self, modality: str) -> int:
        return self.patchify[modality] ** 2 * CHANNELS[modality]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["resolutions"] = {m: list(v) for m, v in self.resolutions.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def reference_scale(cls) -> "ModelConfig":
        return cls(
            hidden_enc=1024,
            hidden_dec=1408,
            enc_blocks=20,
            dec_blocks=40,
            heads=16,
            max_views=8,
            resolutions={"rgb": (32, 32), "pose": (16, 16), "depth": (64, 64)},
            patchify={"rgb": 2, "pose": 1, "depth": 4},
        )

    @classmethod
    def overfit_scale(cls) -> "ModelConfig":
        """Small preset that overfits a handful of scenes in minutes on one CPU core."""
        return cls(
            hidden_enc=128,
            hidden_dec=128,
            enc_blocks=2,
            dec_blocks=3,
            heads=4,
            max_views=4,
            resolutions={"rgb": (16, 16), "pose": (4, 4), "depth": (8, 8)},
            patchify={"rgb": 4, "pose": 1, "depth": 2},
        )


# -- modality codecs ----------------------------------------------------------


def encode_rgb(rgb: np.ndarray) -> np.ndarray:
    """(H, W, 3) in [0, 1] -> (3, H, W) in [-1, 1]."""
    return np.transpose(np.asarray(rgb, dtype=np.float64) * 2.0 - 1.0, (2, 0, 1))


def decode_rgb(x: np.ndarray) -> np.ndarray:
    return np.clip((np.transpose(np.asarray(x, dtype=np.float64), (1, 2, 0)) + 1.0) / 2.0, 0.0, 1.0)


def encode_pose(cam: Camera, config: ModelConfig) -> np.ndarray:
    h, w = config.resolutions["pose"]
    rm = camera_to_raymap(cam, (w, h))
    return np.concatenate([rm.directions, rm.moments * config.moment_scale], -1).transpose(2, 0, 1)


def decode_pose(x: np.ndarray, config: ModelConfig) -> RayMap:
    arr = np.transpose(np.asarray(x, dtype=np.float64), (1, 2, 0))
    return RayMap(arr[..., :3], arr[..., 3:] / config.moment_scale)


def encode_depth(d: DepthMap, config: ModelConfig) -> np.ndarray:
    """(2, H, W): codec disparity (0 where invalid) and mask mapped to +-1."""
    h, w = config.resolutions["depth"]
    if d.depth.shape != (h, w):
        raise ShapeError(f"depth map is {d.depth.shape}, model expects {(h, w)}")
    disp = encode_disparity(d, config.disparity_shift, config.disparity_scale)
    return np.stack([disp.disparity.astype(np.float64), np.where(d.valid, 1.0, -1.0)])


def decode_depth(x: np.ndarray, config: ModelConfig, threshold: float = 0.5) -> DepthMap:
    """Mask channel is thresholded at ``threshold`` on its [0, 1] scale."""
    x = np.asarray(x, dtype=np.float64)
    valid = (x[1] + 1.0) / 2.0 > threshold
    dm = DisparityMap(np.where(valid, x[0], 0.0), valid, config.disparity_shift, config.disparity_scale)
    return decode_disparity(dm)


# -- token batches ------------------------------------------------------------


def patchify(x: torch.Tensor, p: int) -> torch.Tensor:
    """(N, C, H, W) -> (N, H/p * W/p, p*p*C), row-major over the token grid."""
    n, c, h, w = x.shape
    if h % p or w % p:
        raise ShapeError(f"map {h}x{w} is not divisible by patch size {p}")
    x = x.reshape(n, c, h // p, p, w // p, p)
    return x.permute(0, 2, 4, 3, 5, 1).reshape(n, (h // p) * (w // p), p * p * c)


def unpatchify(tokens: torch.Tensor, p: int, c: int, h: int, w: int) -> torch.Tensor:
    n = tokens.shape[0]
    x = tokens.reshape(n, h // p, w // p, p, p, c)
    return x.permute(0, 5, 1, 3, 2, 4).reshape(n, c, h, w)


@dataclass
class TokenBatch:
    """Maps grouped by modality, each tagged with (sample, slot, view).

    Slot k of sample b occupies tokens [k*T, (k+1)*T) of that sample's
    sequence, where T is the per-view token count shared by all modalities.
    """

    maps: dict  # modality -> tensor (N, C, H, W)
    sample: dict  # modality -> long tensor (N,)
    slot: dict
    view: dict
    n_slots: torch.Tensor  # (B,)

    @property
    def batch_size(self) -> int:
        return int(self.n_slots.shape[0])

    def token_count(self, tokens_per_view: int) -> int:
        return int(self.n_slots.sum()) * tokens_per_view

    @classmethod
    def from_slots(cls, samples: list, dtype=torch.float32) -> "TokenBatch":
        """``samples[b]`` is a list of (view_id, modality, array (C, H, W))."""
        groups = {m: ([], [], [], []) for m in MODALITIES}
        for b, slots in enumerate(samples):
            for k, (view, mod, arr) in enumerate(slots):
                g = groups[mod]
                g[0].append(torch.as_tensor(np.asarray(arr), dtype=dtype))
                g[1].append(b)
                g[2].append(k)
                g[3].append(int(view))
        maps, sample, slot, view = {}, {}, {}, {}
        for m, (arrs, bs, ks, vs) in groups.items():
            if not arrs:
                continue
            maps[m] = torch.stack(arrs)
            sample[m] = torch.tensor(bs, dtype=torch.long)
            slot[m] = torch.tensor(ks, dtype=torch.long)
            view[m] = torch.tensor(vs, dtype=torch.long)
        n_slots = torch.tensor([len(s) for s in samples], dtype=torch.long)
        return cls(maps, sample, slot, view, n_slots)

    def with_maps(self, maps: dict) -> "TokenBatch":
        return TokenBatch(maps, self.sample, self.slot, self.view, self.n_slots)

    def to(self, dtype) -> "TokenBatch":
        return self.with_maps({m: x.to(dtype) for m, x in self.maps.items()})


# -- embeddings ---------------------------------------------------------------


def sinusoid(pos: torch.Tensor, dim: int, base: float) -> torch.Tensor:
    """Standard sin/cos table: (...,) -> (..., dim)."""
    half = dim // 2
    freqs = base ** (-torch.arange(half, dtype=torch.float64) / half)
    ang = pos.to(torch.float64)[..., None] * freqs
    return torch.cat([torch.sin(ang), torch.cos(ang)], -1)


def rope_angles(pos: torch.Tensor, head_dim: int, base: float) -> torch.Tensor:
    """(..., 2) integer (row, col) -> (..., head_dim/2) rotation angles."""
    quarter = head_dim // 4
    freqs = base ** (-torch.arange(quarter, dtype=torch.float64) / quarter)
    rows = pos[..., 0].to(torch.float64)[..., None] * freqs
    cols = pos[..., 1].to(torch.float64)[..., None] * freqs
    return torch.cat([rows, cols], -1)


def rope_table(pos: torch.Tensor, head_dim: int, base: float, dtype) -> tuple[torch.Tensor, torch.Tensor]:
    """(cos, sin), each (B, 1, N, head_dim/2), ready for :func:`apply_rope`."""
    ang = rope_angles(pos, head_dim, base)
    return torch.cos(ang).to(dtype)[:, None], torch.sin(ang).to(dtype)[:, None]


def apply_rope(x: torch.Tensor, table: tuple[torch.Tensor, torch.Tensor]) -> torch.Tensor:
    """Rotate consecutive channel pairs of x (B, h, N, dh) by the angles in ``table``."""
    cos, sin = table
    x1, x2 = x[..., 0::2], x[..., 1::2]
    return torch.stack([x1 * cos - x2 * sin, x1 * sin + x2 * cos], -1).flatten(-2)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int, kv_dim: int | None = None):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(kv_dim or dim, 2 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x, rope_q, mem, rope_k, attn_mask):
        b, n, d = x.shape
        h = self.heads
        dh = d // h
        q = self.q(x).reshape(b, n, h, dh).transpose(1, 2)
        k, v = self.kv(mem).reshape(b, mem.shape[1], 2, h, dh).permute(2, 0, 3, 1, 4)
        q = apply_rope(q, rope_q)
        k = apply_rope(k, rope_k)
        o = F.scaled_dot_product_attention(q, k, v, attn_mask=attn_mask[:, None])
        return self.out(o.transpose(1, 2).reshape(b, n, d))


class Mlp(nn.Sequential):
    def __init__(self, dim: int, ratio: float):
        hidden = int(dim * ratio)
        super().__init__(nn.Linear(dim, hidden), nn.GELU(approximate="tanh"), nn.Linear(hidden, dim))


class EncoderBlock(nn.Module):
    def __init__(self, dim, heads, ratio):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, ratio)

    def forward(self, x, rope, mask):
        h = self.norm1(x)
        x = x + self.attn(h, rope, h, rope, mask)
        return x + self.mlp(self.norm2(x))


def _modulate(x, shift, scale):
    return x * (1 + scale[:, None]) + shift[:, None]


class DecoderBlock(nn.Module):
    """Self-attention, cross-attention and MLP, each with timestep-driven shift/scale/gate."""

    def __init__(self, dim, mem_dim, heads, ratio):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, elementwise_affine=False)
        self.self_attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, elementwise_affine=False)
        self.cross_attn = Attention(dim, heads, kv_dim=mem_dim)
        self.norm3 = nn.LayerNorm(dim, elementwise_affine=False)
        self.mlp = Mlp(dim, ratio)
        self.ada = nn.Linear(dim, 9 * dim)

    def forward(self, x, rope, self_mask, mem, mem_rope, mem_mask, c):
        sh1, sc1, g1, sh2, sc2, g2, sh3, sc3, g3 = self.ada(F.silu(c)).chunk(9, -1)
        h = _modulate(self.norm1(x), sh1, sc1)
        x = x + g1[:, None] * self.self_attn(h, rope, h, rope, self_mask)
        h = _modulate(self.norm2(x), sh2, sc2)
        x = x + g2[:, None] * self.cross_attn(h, rope, mem, mem_rope, mem_mask)
        h = _modulate(self.norm3(x), sh3, sc3)
        return x + g3[:, None] * self.mlp(h)


class MultiViewDiT(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        c = config
        self.grid = c.token_grid("rgb")
        self.T = self.grid[0] * self.grid[1]
        self.enc_embed = nn.ModuleDict({m: nn.Linear(c.patch_dim(m), c.hidden_enc) for m in MODALITIES})
        self.dec_embed = nn.ModuleDict({m: nn.Linear(c.patch_dim(m), c.hidden_dec) for m in MODALITIES})
        self.encoder = nn.ModuleList(
            [EncoderBlock(c.hidden_enc, c.heads, c.mlp_ratio) for _ in range(c.enc_blocks)]
        )
        self.enc_norm = nn.LayerNorm(c.hidden_enc)
        self.null_memory = nn.Parameter(torch.zeros(1, 1, c.hidden_enc))
        self.time_mlp = nn.Sequential(nn.Linear(c.time_freq_dim, c.hidden_dec), nn.SiLU(), nn.Linear(c.hidden_dec, c.hidden_dec))
        self.decoder = nn.ModuleList(
            [DecoderBlock(c.hidden_dec, c.hidden_enc, c.heads, c.mlp_ratio) for _ in range(c.dec_blocks)]
        )
        self.final_norm = nn.LayerNorm(c.hidden_dec, elementwise_affine=False)
        self.final_ada = nn.Linear(c.hidden_dec, 2 * c.hidden_dec)
        self.head = nn.ModuleDict({m: nn.Linear(c.hidden_dec, c.patch_dim(m)) for m in MODALITIES})
        gh, gw = self.grid
        rr, cc = torch.meshgrid(torch.arange(gh), torch.arange(gw), indexing="ij")
        self.register_buffer("grid_pos", torch.stack([rr.reshape(-1), cc.reshape(-1)], -1), persistent=False)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        for mod in self.modules():
            if isinstance(mod, nn.Linear):
                nn.init.trunc_normal_(mod.weight, std=0.02, a=-0.04, b=0.04)
                nn.init.zeros_(mod.bias)
        nn.init.trunc_normal_(self.null_memory, std=0.02, a=-0.04, b=0.04)
        # zero-initialized modulation and output head
        for blk in self.decoder:
            nn.init.zeros_(blk.ada.weight)
            nn.init.zeros_(blk.ada.bias)
        nn.init.zeros_(self.final_ada.weight)
        nn.init.zeros_(self.final_ada.bias)
        for lin in self.head.values():
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)

    # positional tags
    def view_embedding(self, view: torch.Tensor, dim: int) -> torch.Tensor:
        if view.numel() and int(view.max()) >= self.config.max_views:
            raise ViewRangeError(f"view id {int(view.max())} >= max_views {self.config.max_views}")
        if view.numel() and int(view.min()) < 0:
            raise ViewRangeError("negative view id")
        return sinusoid(view, dim, self.config.view_base)

    def modality_embedding(self, modality: str, dim: int) -> torch.Tensor:
        return sinusoid(torch.tensor(MODALITY_ID[modality]), dim, self.config.modality_base)

    def embed(self, tb: TokenBatch, role: str):
        """Padded token tensor (B, S*T, D), grid positions (B, S*T, 2) and validity (B, S*T)."""
        layers = self.enc_embed if role == "condition" else self.dec_embed
        dim = self.config.hidden_enc if role == "condition" else self.config.hidden_dec
        B = tb.batch_size
        S = max(int(tb.n_slots.max()) if B else 0, 1)
        dtype = next(self.parameters()).dtype
        x = torch.zeros(B, S, self.T, dim, dtype=dtype)
        for m, maps in tb.maps.items():
            p = self.config.patchify[m]
            if tuple(maps.shape[-2:]) != self.config.resolutions[m]:
                raise ShapeError(f"{m} map is {tuple(maps.shape[-2:])}, model expects {self.config.resolutions[m]}")
            tok = layers[m](patchify(maps.to(dtype), p))
            tok = tok + self.view_embedding(tb.view[m], dim).to(dtype)[:, None] + self.modality_embedding(m, dim).to(dtype)
            x = x.index_put((tb.sample[m], tb.slot[m]), tok)
        valid = (torch.arange(S)[None] < tb.n_slots[:, None])[:, :, None].expand(B, S, self.T)
        pos = self.grid_pos[None, None].expand(B, S, self.T, 2)
        return x.reshape(B, S * self.T, dim), pos.reshape(B, S * self.T, 2), valid.reshape(B, S * self.T)

    def encode(self, cond: TokenBatch):
        x, pos, valid = self.embed(cond, "condition")
        n = x.shape[1]
        # padded rows attend to themselves only so they stay finite
        mask = valid[:, None, :] | torch.eye(n, dtype=torch.bool)[None]
        rope = rope_table(pos, self.config.hidden_enc // self.config.heads, self.config.rope_base, x.dtype)
        for blk in self.encoder:
            x = blk(x, rope, mask)
        x = self.enc_norm(x) * valid[..., None]
        B = x.shape[0]
        mem = torch.cat([self.null_memory.expand(B, 1, -1).to(x.dtype), x], 1)
        mem_pos = torch.cat([torch.zeros(B, 1, 2, dtype=pos.dtype), pos], 1)
        mem_valid = torch.cat([torch.ones(B, 1, dtype=torch.bool), valid], 1)
        return mem, mem_pos, mem_valid

    def forward(self, cond: TokenBatch, target: TokenBatch, t: torch.Tensor) -> dict:
        """v-prediction for every target map, keyed by modality and aligned with ``target.maps``."""
        if target.batch_size == 0 or int(target.n_slots.min()) == 0:
            raise NothingToGenerateError("every sample needs at least one target map")
        if cond.batch_size != target.batch_size:
            raise ShapeError("condition and target batches differ in size")
        mem, mem_pos, mem_valid = self.encode(cond)
        x, pos, valid = self.embed(target, "target")
        n = x.shape[1]
        self_mask = valid[:, None, :] | torch.eye(n, dtype=torch.bool)[None]
        cross_mask = mem_valid[:, None, :].expand(-1, n, -1)
        temb = sinusoid(torch.as_tensor(t), self.config.time_freq_dim, self.config.time_base).to(x.dtype)
        c = self.time_mlp(temb)
        dh = self.config.hidden_dec // self.config.heads
        rope = rope_table(pos, dh, self.config.rope_base, x.dtype)
        mem_rope = rope_table(mem_pos, dh, self.config.rope_base, x.dtype)
        for blk in self.decoder:
            x = blk(x, rope, self_mask, mem, mem_rope, cross_mask, c)
        shift, scale = self.final_ada(F.silu(c)).chunk(2, -1)
        x = _modulate(self.final_norm(x), shift, scale)
        x = x.reshape(target.batch_size, -1, self.T, x.shape[-1])
        out = {}
        for m, maps in target.maps.items():
            tok = x[target.sample[m], target.slot[m]]
            h, w = self.config.resolutions[m]
            out[m] = unpatchify(self.head[m](tok), self.config.patchify[m], CHANNELS[m], h, w)
        return out


# -- loss ---------------------------------------------------------------------


def supervision_weights(x0: dict) -> dict:
    """1 for supervised entries; depth disparity is ignored where the clean mask is off."""
    w = {m: torch.ones_like(x) for m, x in x0.items()}
    if "depth" in x0:
        w["depth"][:, 0] = (x0["depth"][:, 1] > 0).to(x0["depth"].dtype)
    return w


def masked_mse(pred: dict, target: dict, weights: dict) -> torch.Tensor:
    num = sum(((pred[m] - target[m]) ** 2 * weights[m]).sum() for m in pred)
    den = sum(weights[m].sum() for m in pred)
    return num / den.clamp_min(1.0)


def per_sample_mse(pred: dict, target: dict, weights: dict, sample: dict, batch_size: int) -> torch.Tensor:
    """Masked MSE of each sample's own targets, shape (B,)."""
    dtype = next(iter(pred.values())).dtype
    num = torch.zeros(batch_size, dtype=dtype)
    den = torch.zeros(batch_size, dtype=dtype)
    for m in pred:
        err = ((pred[m] - target[m]) ** 2 * weights[m]).flatten(1).sum(1)
        num = num.index_add(0, sample[m], err)
        den = den.index_add(0, sample[m], weights[m].flatten(1).sum(1))
    return num / den.clamp_min(1.0)


def loss_terms(model: MultiViewDiT, cond: TokenBatch, x0: TokenBatch, t: torch.Tensor, noise: dict, schedule):
    """(sum of weighted squared errors, number of supervised entries, per-sample MSE)."""
    dtype = next(model.parameters()).dtype
    alpha = torch.tensor(schedule.alpha, dtype=dtype)[t]
    sigma = torch.tensor(schedule.sigma, dtype=dtype)[t]
    xt, v = {}, {}
    for m, x in x0.maps.items():
        a = alpha[x0.sample[m]][:, None, None, None]
        s = sigma[x0.sample[m]][:, None, None, None]
        x = x.to(dtype)
        e = noise[m].to(dtype)
        xt[m] = a * x + s * e
        v[m] = a * e - s * x
    pred = model(cond.to(dtype), x0.with_maps(xt), t)
    weights = supervision_weights({m: x.to(dtype) for m, x in x0.maps.items()})
    num = sum(((pred[m] - v[m]) ** 2 * weights[m]).sum() for m in pred)
    den = sum(weights[m].sum() for m in pred)
    with torch.no_grad():
        each = per_sample_mse(pred, v, weights, x0.sample, x0.batch_size)
    return num, den, each


def loss(model: MultiViewDiT, cond: TokenBatch, x0: TokenBatch, t: torch.Tensor, noise: dict, schedule) -> torch.Tensor:
    """v-prediction MSE over target entries (masked depth pixels excluded)."""
    num, den, _ = loss_terms(model, cond, x0, t, noise, schedule)
    return num / den.clamp_min(1.0)


# -- parameters and checkpoints -----------------------------------------------

CKPT_MAGIC = b"MXKCKPT\x00"
CKPT_VERSION = 1


def parameter_checksum(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().to(torch.float32).contiguous().numpy().astype("<f4").tobytes())
    return h.hexdigest()


def all_finite(model: nn.Module) -> bool:
    return all(bool(torch.isfinite(p).all()) for p in model.parameters())


def save_checkpoint(path, model: MultiViewDiT, extra: dict | None = None) -> None:
    """magic | u32 version | u32 len + config JSON | u32 count | tensors | sha256.

    Each tensor: u16 name length, utf-8 name, u8 ndim, u32 dims, u64 byte length,
    little-endian float32 data.
    """
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", CKPT_VERSION))
    meta = json.dumps({"config": model.config.to_dict(), "extra": extra or {}}, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(meta)))
    buf.write(meta)
    state = model.state_dict()
    buf.write(struct.pack("<I", len(state)))
    for name in sorted(state):
        arr = state[name].detach().to(torch.float32).contiguous().numpy().astype("<f4")
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        raw = arr.tobytes()
        buf.write(struct.pack("<Q", len(raw)))
        buf.write(raw)
    body = buf.getvalue()
    Path(path).write_bytes(body + hashlib.sha256(body).digest())


def load_checkpoint(path) -> tuple[MultiViewDiT, dict]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise SceneIOError(path, f"cannot read checkpoint: {exc.strerror or exc}") from exc
    if len(raw) < len(CKPT_MAGIC) + 40 or not raw.startswith(CKPT_MAGIC):
        raise SceneIOError(path, "not a checkpoint file")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise SceneIOError(path, "checkpoint checksum mismatch")
    off = len(CKPT_MAGIC)
    (version,) = struct.unpack_from("<I", body, off)
    off += 4
    if version != CKPT_VERSION:
        raise SceneIOError(path, f"unsupported checkpoint version {version}")
    (mlen,) = struct.unpack_from("<I", body, off)
    off += 4
    meta = json.loads(body[off : off + mlen])
    off += mlen
    (count,) = struct.unpack_from("<I", body, off)
    off += 4
    state = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", body, off)
        off += 2
        name = body[off : off + nlen].decode()
        off += nlen
        (ndim,) = struct.unpack_from("<B", body, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", body, off)
        off += 4 * ndim
        (nbytes,) = struct.unpack_from("<Q", body, off)
        off += 8
        arr = np.frombuffer(body[off : off + nbytes], dtype="<f4").reshape(shape)
        off += nbytes
        state[name] = torch.from_numpy(arr.copy())
    model = MultiViewDiT(ModelConfig.from_dict(meta["config"]))
    model.load_state_dict(state)
    return model, meta.get("extra", {})


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def head_is_zero(model: MultiViewDiT) -> bool:
    return all(float(lin.weight.detach().abs().max()) == 0.0 for lin in model.head.values())

