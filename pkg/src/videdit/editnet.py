"""Toy latent video editor built around the MoE connector.

Data flow for one sample::

    source clip --pool--> source latent ----------------+
    noise + target latent --interp(t)--> noisy latent --+--channel concat--> denoiser --> velocity
    instruction --text encoder--> text tokens --proj--+                        ^
    (source, instruction) --MLLM--> hidden --drop prefix--> connector --+--> token concat (text first)

The VAE, text encoder and MLLM are deterministic stand-ins so that the whole
stack trains on CPU in seconds. The denoiser cross-attends to the fused context
with one softmax per context segment (text, connector) whose outputs are
summed; because key/value projections carry no bias, an all-zero connector
segment contributes exactly nothing.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .connector import ConnectorConfig, MoEConnector, ParameterError, filter_prefix_tokens, init_connector
from .core import EditPair, InstructionEmbedding, LatentVideo, VideoClip, stable_seed


class DataError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Stand-in encoders


def encode_latent(clip: VideoClip, factor: int = 4, latent_channels: int = 4) -> LatentVideo:
    """Average-pool each ``factor`` x ``factor`` block.

    The first C latent channels hold the pooled pixels; any extra channels hold
    the pooled channel mean (luma-like). Time is not downsampled.
    """
    t, h, w, c = clip.shape
    if h % factor or w % factor:
        raise ParameterError(f"frame {h}x{w} not divisible by spatial factor {factor}")
    if latent_channels < c:
        raise ParameterError("latent_channels must be >= clip channels")
    blocks = clip.frames.reshape(t, h // factor, factor, w // factor, factor, c)
    pooled = blocks.mean(axis=(2, 4))
    # float summation can drift on constant blocks; use the exact value there
    flat = blocks[:, :, 0, :, 0, :]
    pooled = np.where((blocks == flat[:, :, None, :, None, :]).all(axis=(2, 4)), flat, pooled)
    extra = np.repeat(pooled.mean(axis=-1, keepdims=True), latent_channels - c, axis=-1)
    return LatentVideo(np.concatenate([pooled, extra], axis=-1), spatial_factor=factor)


def decode_latent(latent: LatentVideo, channels: int = 3) -> VideoClip:
    data = latent.data[..., :channels]
    f = latent.spatial_factor
    frames = data.repeat(f, axis=1).repeat(f, axis=2)
    return VideoClip(np.clip(frames, 0.0, 1.0))


def _token_vector(token: str, dim: int, salt: str) -> np.ndarray:
    rng = np.random.default_rng(stable_seed(salt, token))
    return rng.standard_normal(dim) / math.sqrt(dim)


def encode_instruction(text: str, length: int = 16, dim: int = 32) -> InstructionEmbedding:
    """Hashed word embeddings, padded with a pad token to ``length``."""
    words = text.lower().split()[:length]
    words += ["<pad>"] * (length - len(words))
    tokens = np.stack([_token_vector(w, dim, "text") + 0.1 * _position_code(i, dim) for i, w in enumerate(words)])
    return InstructionEmbedding(tokens, np.zeros(length, bool))


def _position_code(i: int, dim: int) -> np.ndarray:
    freqs = np.exp(-np.arange(0, dim, 2) / dim * math.log(100.0))
    out = np.zeros(dim)
    out[0::2] = np.sin(i * freqs)
    out[1::2] = np.cos(i * freqs)
    return out


SYSTEM_PREFIX = ("<|system|>", "you", "are", "a", "helpful", "assistant", "<|user|>")


def mllm_hidden(clip: VideoClip, instruction: str, dim: int = 32, n_prefix: int = 4, n_text: int = 16) -> InstructionEmbedding:
    """Joint video+instruction features with a flagged system-prompt prefix.

    Layout: ``n_prefix`` prefix tokens, 8 video tokens (2 time halves x 2x2
    spatial quadrants, mean and std per channel), ``n_text`` instruction tokens
    each modulated by the global video feature.
    """
    prefix = [_token_vector(SYSTEM_PREFIX[i % len(SYSTEM_PREFIX)], dim, f"mllm-prefix-{i}") for i in range(n_prefix)]
    t, h, w, c = clip.shape
    proj = np.random.default_rng(stable_seed("mllm-video-proj", c, dim)).standard_normal((2 * c, dim)) / math.sqrt(2 * c)
    video = []
    for half in np.array_split(clip.frames, 2, axis=0) if t > 1 else [clip.frames, clip.frames]:
        for rows in (slice(0, h // 2), slice(h // 2, h)):
            for cols in (slice(0, w // 2), slice(w // 2, w)):
                block = half[:, rows, cols, :]
                feat = np.concatenate([block.mean(axis=(0, 1, 2)), block.std(axis=(0, 1, 2))])
                video.append(np.tanh(feat @ proj * 2.0))
    video_global = np.mean(video, axis=0)
    words = instruction.lower().split()[:n_text]
    words += ["<pad>"] * (n_text - len(words))
    text = [_token_vector(wd, dim, "mllm-text") * (1.0 + 0.5 * video_global) for wd in words]
    tokens = np.stack(prefix + video + text)
    is_prefix = np.zeros(len(tokens), bool)
    is_prefix[:n_prefix] = True
    return InstructionEmbedding(tokens, is_prefix)


# ---------------------------------------------------------------------------
# Conditioning


def build_condition(src_latent, noisy):
    """Channel concat; the output always puts the noisy channels first, the condition second."""
    a = noisy.data if isinstance(noisy, LatentVideo) else noisy
    b = src_latent.data if isinstance(src_latent, LatentVideo) else src_latent
    if tuple(a.shape[:-1]) != tuple(b.shape[:-1]):
        raise ParameterError(f"latent shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    if torch.is_tensor(a):
        return torch.cat([a, b], dim=-1)
    return np.concatenate([a, b], axis=-1)


@dataclass(frozen=True, eq=False)
class FusionContext:
    tokens: torch.Tensor  # b x (L_text + L_q) x d
    n_text: int

    @property
    def segments(self) -> list[tuple[int, int]]:
        n = self.tokens.shape[1]
        return [(0, self.n_text)] if n == self.n_text else [(0, self.n_text), (self.n_text, n)]

    def text_only(self) -> "FusionContext":
        return FusionContext(self.tokens[:, : self.n_text], self.n_text)


def build_context(text_tokens: torch.Tensor, connector_out: Optional[torch.Tensor]) -> FusionContext:
    if connector_out is None:
        return FusionContext(text_tokens, text_tokens.shape[1])
    if text_tokens.shape[0] != connector_out.shape[0] or text_tokens.shape[-1] != connector_out.shape[-1]:
        raise ParameterError(
            f"cannot concatenate text {tuple(text_tokens.shape)} with connector {tuple(connector_out.shape)}"
        )
    return FusionContext(torch.cat([text_tokens, connector_out], dim=1), text_tokens.shape[1])


# ---------------------------------------------------------------------------
# Denoiser


@dataclass(frozen=True)
class EditorConfig:
    frames: int = 8
    height: int = 32
    width: int = 32
    channels: int = 3
    spatial_factor: int = 4
    latent_channels: int = 4
    patch: int = 2
    d_model: int = 64
    n_blocks: int = 2
    n_heads: int = 4
    d_ff: int = 128
    text_len: int = 16
    d_text: int = 32
    mllm_prefix: int = 4
    connector: ConnectorConfig = field(default_factory=ConnectorConfig)
    # "segmented": one softmax per context segment; "joint": single softmax over all tokens
    context_attention: str = "segmented"

    @property
    def latent_shape(self) -> tuple:
        f = self.spatial_factor
        return (self.frames, self.height // f, self.width // f, self.latent_channels)

    @property
    def n_latent_tokens(self) -> int:
        t, h, w, _ = self.latent_shape
        return t * (h // self.patch) * (w // self.patch)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EditorConfig":
        d = dict(d)
        d["connector"] = ConnectorConfig(**d["connector"])
        return cls(**d)


class CrossAttention(nn.Module):
    def __init__(self, dim: int, d_ctx: int, n_heads: int, mode: str = "segmented"):
        super().__init__()
        self.n_heads = n_heads
        self.mode = mode
        self.q = nn.Linear(dim, dim)
        # no bias: a zero context token must map to a zero key and a zero value
        self.k = nn.Linear(d_ctx, dim, bias=False)
        self.v = nn.Linear(d_ctx, dim, bias=False)
        self.o = nn.Linear(dim, dim)

    def forward(self, x, context: FusionContext):
        b, n, d = x.shape
        h = self.n_heads
        ctx = context.tokens
        q = self.q(x).view(b, n, h, d // h).transpose(1, 2)
        k = self.k(ctx).view(b, ctx.shape[1], h, d // h).transpose(1, 2)
        v = self.v(ctx).view(b, ctx.shape[1], h, d // h).transpose(1, 2)
        segments = context.segments if self.mode == "segmented" else [(0, ctx.shape[1])]
        out = 0
        for lo, hi in segments:
            scores = q @ k[:, :, lo:hi].transpose(-1, -2) / math.sqrt(d // h)
            out = out + torch.softmax(scores, dim=-1) @ v[:, :, lo:hi]
        return self.o(out.transpose(1, 2).reshape(b, n, d))


class SelfAttention(nn.Module):
    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.o = nn.Linear(dim, dim)

    def forward(self, x):
        b, n, d = x.shape
        h = self.n_heads
        q, k, v = self.qkv(x).view(b, n, 3, h, d // h).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2) / math.sqrt(d // h)
        out = torch.softmax(scores, dim=-1) @ v
        return self.o(out.transpose(1, 2).reshape(b, n, d))


class DiTBlock(nn.Module):
    def __init__(self, cfg: EditorConfig):
        super().__init__()
        d = cfg.d_model
        self.norm1 = nn.LayerNorm(d)
        self.self_attn = SelfAttention(d, cfg.n_heads)
        self.norm2 = nn.LayerNorm(d)
        self.cross_attn = CrossAttention(d, cfg.connector.d_out, cfg.n_heads, cfg.context_attention)
        self.norm3 = nn.LayerNorm(d)
        self.ff = nn.Sequential(nn.Linear(d, cfg.d_ff), nn.GELU(), nn.Linear(cfg.d_ff, d))

    def forward(self, x, context):
        x = x + self.self_attn(self.norm1(x))
        x = x + self.cross_attn(self.norm2(x), context)
        return x + self.ff(self.norm3(x))


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype) / half)
    args = 1000.0 * t[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class Denoiser(nn.Module):
    def __init__(self, cfg: EditorConfig):
        super().__init__()
        self.config = cfg
        p, c = cfg.patch, cfg.latent_channels
        self.patch_embed = nn.Linear(p * p * 2 * c, cfg.d_model)
        self.pos = nn.Parameter(torch.zeros(cfg.n_latent_tokens, cfg.d_model))
        self.time_mlp = nn.Sequential(nn.Linear(cfg.d_model, cfg.d_model), nn.SiLU(), nn.Linear(cfg.d_model, cfg.d_model))
        self.blocks = nn.ModuleList(DiTBlock(cfg) for _ in range(cfg.n_blocks))
        self.norm_out = nn.LayerNorm(cfg.d_model)
        self.head = nn.Linear(cfg.d_model, p * p * c)

    def forward(self, cond_input: torch.Tensor, context: FusionContext, t: torch.Tensor) -> torch.Tensor:
        cfg = self.config
        if not torch.isfinite(cond_input).all() or not torch.isfinite(context.tokens).all():
            raise DataError("non-finite denoiser input")
        b, T, h, w, c2 = cond_input.shape
        if (T, h, w) != cfg.latent_shape[:3] or c2 != 2 * cfg.latent_channels:
            raise ParameterError(f"condition shape {tuple(cond_input.shape)} does not match {cfg.latent_shape}")
        p = cfg.patch
        x = cond_input.reshape(b, T, h // p, p, w // p, p, c2).permute(0, 1, 2, 4, 3, 5, 6)
        x = self.patch_embed(x.reshape(b, -1, p * p * c2)) + self.pos
        t = torch.as_tensor(t, dtype=x.dtype).reshape(-1).expand(b)
        x = x + self.time_mlp(timestep_embedding(t, cfg.d_model))[:, None]
        for block in self.blocks:
            x = block(x, context)
        y = self.head(self.norm_out(x))
        c = cfg.latent_channels
        y = y.reshape(b, T, h // p, w // p, p, p, c).permute(0, 1, 2, 4, 3, 5, 6)
        return y.reshape(b, T, h, w, c)


def denoise(cond_input, context: FusionContext, t, params: Denoiser) -> torch.Tensor:
    return params(cond_input, context, t)


class Editor(nn.Module):
    """Text projection + connector + denoiser; the text projection is frozen."""

    def __init__(self, cfg: EditorConfig, seed: int = 0):
        super().__init__()
        self.config = cfg
        self.text_proj = nn.Linear(cfg.d_text, cfg.connector.d_out, bias=False)
        self.text_proj.requires_grad_(False)
        self.connector: MoEConnector = init_connector(cfg.connector, seed)
        self.denoiser = Denoiser(cfg)
        _init_uniform(self.text_proj, self.denoiser, seed=stable_seed("editor", seed))

    def context(self, text_tokens, mllm_tokens, use_connector: bool = True) -> FusionContext:
        text = self.text_proj(text_tokens)
        if not use_connector:
            return build_context(text, None)
        return build_context(text, self.connector(mllm_tokens))

    def forward(self, noisy, src_latent, t, text_tokens, mllm_tokens, use_connector: bool = True):
        return self.denoiser(build_condition(src_latent, noisy), self.context(text_tokens, mllm_tokens, use_connector), t)


def _init_uniform(*modules, seed: int):
    """U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for linear layers; positions ~ U(-0.02, 0.02)."""
    gen = torch.Generator().manual_seed(seed % (1 << 63))
    with torch.no_grad():
        for module in modules:
            for mod in module.modules():
                if isinstance(mod, nn.Linear):
                    bound = 1.0 / math.sqrt(mod.in_features)
                    mod.weight.copy_(torch.rand(mod.weight.shape, generator=gen) * 2 * bound - bound)
                    if mod.bias is not None:
                        mod.bias.copy_(torch.rand(mod.bias.shape, generator=gen) * 2 * bound - bound)
                elif isinstance(mod, nn.LayerNorm):
                    mod.weight.fill_(1.0)
                    mod.bias.zero_()
                elif isinstance(mod, Denoiser):
                    mod.pos.copy_(torch.rand(mod.pos.shape, generator=gen) * 0.04 - 0.02)


# ---------------------------------------------------------------------------
# Training


@dataclass(frozen=True, eq=False)
class TrainSample:
    pair: EditPair
    text: InstructionEmbedding
    mllm_hidden: InstructionEmbedding
    source_latent: LatentVideo
    target_latent: LatentVideo


def fit_frames(clip: VideoClip, frames: int) -> VideoClip:
    """Nearest-index temporal resampling to a fixed frame count."""
    if clip.num_frames == frames:
        return clip
    idx = np.floor(np.arange(frames) * clip.num_frames / frames).astype(int)
    return clip.with_frames(clip.frames[idx])


def make_train_sample(pair: EditPair, cfg: EditorConfig) -> TrainSample:
    src = fit_frames(pair.source, cfg.frames)
    tgt = fit_frames(pair.target, cfg.frames)
    return TrainSample(
        pair=pair,
        text=encode_instruction(pair.instruction, cfg.text_len, cfg.d_text),
        mllm_hidden=mllm_hidden(src, pair.instruction, cfg.connector.d_in, cfg.mllm_prefix, cfg.text_len),
        source_latent=encode_latent(src, cfg.spatial_factor, cfg.latent_channels),
        target_latent=encode_latent(tgt, cfg.spatial_factor, cfg.latent_channels),
    )


def collate(samples: Sequence[TrainSample]) -> dict:
    def stack(arrs):
        return torch.from_numpy(np.stack(arrs)).float()

    return {
        "source": stack([s.source_latent.data for s in samples]),
        "target": stack([s.target_latent.data for s in samples]),
        "text": stack([s.text.tokens for s in samples]),
        "mllm": stack([filter_prefix_tokens(s.mllm_hidden) for s in samples]),
    }


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 4
    seed: int = 0
    weight_decay: float = 0.0

    @classmethod
    def full_scale(cls, stage: int = 1, **kw) -> "TrainConfig":
        """Two-stage schedule: 1e-5 for the first epoch, 1e-6 for the fine-tune."""
        return cls(lr={1: 1e-5, 2: 1e-6}[stage], **kw)


@dataclass(eq=False)
class TrainState:
    editor: Editor
    optimizer: torch.optim.Optimizer
    config: TrainConfig
    step: int = 0
    generator: torch.Generator = field(default_factory=torch.Generator)
    last_grad_norms: dict = field(default_factory=dict)


def init_train_state(cfg: EditorConfig, train_cfg: TrainConfig = TrainConfig(), seed: Optional[int] = None) -> TrainState:
    seed = train_cfg.seed if seed is None else seed
    editor = Editor(cfg, seed)
    opt = torch.optim.AdamW(
        [p for p in editor.parameters() if p.requires_grad], lr=train_cfg.lr, weight_decay=train_cfg.weight_decay
    )
    gen = torch.Generator().manual_seed(int(stable_seed("train", seed) % (1 << 63)))
    return TrainState(editor, opt, train_cfg, 0, gen)


def flow_loss(editor: Editor, batch: dict, t: torch.Tensor, noise: torch.Tensor, use_connector: bool = True):
    """Rectified flow: x_t = (1-t) x + t eps, regress v = eps - x."""
    x0 = batch["target"]
    tt = t.reshape(-1, 1, 1, 1, 1)
    x_t = (1 - tt) * x0 + tt * noise
    v = noise - x0
    pred = editor(x_t, batch["source"], t, batch["text"], batch["mllm"], use_connector)
    return F.mse_loss(pred, v)


def training_step(batch: Sequence[TrainSample], state: TrainState) -> tuple[TrainState, float]:
    if not batch:
        raise ParameterError("empty batch")
    tensors = collate(batch)
    b = tensors["target"].shape[0]
    t = torch.rand(b, generator=state.generator)
    noise = torch.randn(tensors["target"].shape, generator=state.generator)
    state.editor.train()
    state.optimizer.zero_grad()
    loss = flow_loss(state.editor, tensors, t, noise)
    if not torch.isfinite(loss):
        raise TrainingDivergedError(f"non-finite loss {float(loss)} at step {state.step}")
    loss.backward()
    state.last_grad_norms = {
        "out_proj": float(state.editor.connector.out_proj.weight.grad.norm()),
        "total": float(torch.sqrt(sum(p.grad.pow(2).sum() for p in state.editor.parameters() if p.grad is not None))),
    }
    state.optimizer.step()
    state.step += 1
    return state, float(loss.detach())


def evaluate_loss(editor: Editor, samples: Sequence[TrainSample], seed: int = 0, repeats: int = 4) -> float:
    """Loss on fixed timesteps and noise, for comparing checkpoints."""
    tensors = collate(samples)
    gen = torch.Generator().manual_seed(seed)
    b = tensors["target"].shape[0]
    total = 0.0
    with torch.no_grad():
        for _ in range(repeats):
            t = torch.rand(b, generator=gen)
            noise = torch.randn(tensors["target"].shape, generator=gen)
            total += float(flow_loss(editor, tensors, t, noise))
    return total / repeats


@torch.no_grad()
def sample_edit(src: VideoClip, instruction: str, steps: int, state, seed: int = 0) -> VideoClip:
    """Euler-integrate the learned velocity from pure noise (t=1) down to t=0."""
    if steps < 1:
        raise ParameterError("steps must be >= 1")
    editor = state.editor if isinstance(state, TrainState) else state
    cfg = editor.config
    sample = make_train_sample(EditPair(src, src, None, instruction), cfg)
    tensors = collate([sample])
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn(tensors["source"].shape, generator=gen)
    editor.eval()
    ctx = editor.context(tensors["text"], tensors["mllm"])
    for i in range(steps):
        t = torch.full((1,), 1.0 - i / steps)
        v = editor.denoiser(build_condition(tensors["source"], x), ctx, t)
        x = x - v / steps
    out = decode_latent(LatentVideo(x[0].double().numpy(), cfg.spatial_factor), cfg.channels)
    return out.with_frames(out.frames, id=f"{src.id}-edited")


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(state: TrainState, path) -> Path:
    """``path`` (.npz) holds model and optimizer arrays; a sibling .json holds configs and step."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {f"model.{k}": v.detach().cpu().numpy() for k, v in state.editor.state_dict().items()}
    names = {id(p): n for n, p in state.editor.named_parameters()}
    for group in state.optimizer.param_groups:
        for p in group["params"]:
            for key, val in state.optimizer.state.get(p, {}).items():
                arrays[f"optim.{names[id(p)]}.{key}"] = torch.as_tensor(val).cpu().numpy()
    arrays["rng"] = state.generator.get_state().numpy()
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    tmp.replace(path)
    meta = {"editor": state.editor.config.to_dict(), "train": asdict(state.config), "step": state.step}
    path.with_suffix(".json").write_text(json.dumps(meta, sort_keys=True, indent=2))
    return path


def load_checkpoint(path) -> TrainState:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    cfg = EditorConfig.from_dict(meta["editor"])
    state = init_train_state(cfg, TrainConfig(**meta["train"]))
    with np.load(path) as data:
        model_state = {k[len("model."):]: torch.from_numpy(data[k]) for k in data.files if k.startswith("model.")}
        state.editor.load_state_dict(model_state)
        params = dict(state.editor.named_parameters())
        for k in data.files:
            if k.startswith("optim."):
                name, key = k[len("optim."):].rsplit(".", 1)
                state.optimizer.state[params[name]][key] = torch.from_numpy(data[k].copy())
        state.generator.set_state(torch.from_numpy(data["rng"].copy()))
    state.step = meta["step"]
    return state


def train(samples: Sequence[TrainSample], steps: int, state: TrainState, log_path=None, checkpoint=None) -> list[float]:
    """Cycle through ``samples`` in fixed batches for ``steps`` steps, logging one JSON line per step."""
    if not samples:
        raise ParameterError("no training samples")
    bs = state.config.batch_size
    losses = []
    log = open(log_path, "a", encoding="utf-8") if log_path else None
    try:
        for _ in range(steps):
            start = (state.step * bs) % len(samples)
            batch = [samples[(start + j) % len(samples)] for j in range(min(bs, len(samples)))]
            state, loss = training_step(batch, state)
            losses.append(loss)
            if log:
                hist = state.editor.connector.routing_histogram()
                rec = {"step": state.step, "loss": loss, "lr": state.optimizer.param_groups[0]["lr"],
                       "expert_histogram": hist}
                log.write(json.dumps(rec, sort_keys=True) + "\n")
    finally:
        if log:
            log.close()
    if checkpoint:
        save_checkpoint(state, checkpoint)
    return losses
