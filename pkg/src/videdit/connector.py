"""Mixture-of-experts connector.

Maps a variable-length sequence of multimodal hidden states onto a fixed set of
``num_queries`` context tokens::

    Y = W_o( MoEDecoder( Q, MoEEncoder( F_in(X) ) ) )

Each encoder block is ``self-attn -> MoE-FFN``; each decoder block is
``self-attn -> cross-attn(memory=encoder output) -> MoE-FFN``. All blocks are
pre-norm with residual connections. Every MoE-FFN routes each token position
independently to ``top_k`` of ``num_experts`` GELU experts.

The output projection ``W_o`` (weight and bias) starts at exactly zero so the
connector emits an all-zero context until training moves it.

Parameter archive keys are the module's ``state_dict`` names, e.g.::

    in_ffn.fc1.weight            in_ffn.fc2.bias
    enc.0.norm1.weight           enc.0.self_attn.q.weight
    dec.1.cross_attn.o.bias      dec.0.moe.gate
    dec.0.moe.expert.3.W1        dec.0.moe.expert.3.b2
    queries                      out_proj.weight
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import ParameterError


class EmptyInputError(ValueError):
    pass


@dataclass(frozen=True)
class ConnectorConfig:
    d_in: int = 32
    d_hidden: int = 32
    d_out: int = 32
    num_queries: int = 8
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    num_experts: int = 6
    top_k: int = 2
    d_ff: int = 64
    n_heads: int = 4
    # False keeps the raw softmax mass of the selected experts (ablation only).
    renormalize: bool = True

    def __post_init__(self):
        for name in ("d_in", "d_hidden", "d_out", "num_queries", "num_experts", "d_ff", "n_heads"):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be >= 1")
        if self.n_enc_layers < 0 or self.n_dec_layers < 0:
            raise ParameterError("layer counts must be >= 0")
        if not 1 <= self.top_k <= self.num_experts:
            raise ParameterError(f"top_k={self.top_k} outside [1, {self.num_experts}]")
        if self.d_hidden % self.n_heads:
            raise ParameterError("n_heads must divide d_hidden")

    @classmethod
    def full_scale(cls, **overrides) -> "ConnectorConfig":
        """2+2 layers, 6 experts with 2 active, 512 learnable queries."""
        base = dict(n_enc_layers=2, n_dec_layers=2, num_experts=6, top_k=2, num_queries=512)
        base.update(overrides)
        return cls(**base)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ConnectorConfig":
        return cls(**json.loads(text))


def gate_select(x: torch.Tensor, gate_weight: torch.Tensor, k: int, renormalize: bool = True):
    """Pick the ``k`` experts with the largest gate probability for each row of ``x``.

    Returns ``(indices, weights)``, each shaped ``x.shape[:-1] + (k,)``.
    Ties go to the lower expert index. With ``renormalize`` the selected
    probabilities are rescaled to sum to one.
    """
    num_experts = gate_weight.shape[0]
    if not 1 <= k <= num_experts:
        raise ParameterError(f"k={k} outside [1, {num_experts}]")
    if x.shape[-1] != gate_weight.shape[1]:
        raise ParameterError(f"gate expects dim {gate_weight.shape[1]}, got {x.shape[-1]}")
    probs = torch.softmax(F.linear(x, gate_weight), dim=-1)
    # stable sort keeps ascending index order among equal probabilities
    order = torch.sort(probs, dim=-1, descending=True, stable=True).indices
    indices = order[..., :k]
    weights = probs.gather(-1, indices)
    if renormalize:
        weights = weights / weights.sum(dim=-1, keepdim=True)
    return indices, weights


class Expert(nn.Module):
    def __init__(self, d_hidden: int, d_ff: int):
        super().__init__()
        self.W1 = nn.Parameter(torch.empty(d_ff, d_hidden))
        self.b1 = nn.Parameter(torch.empty(d_ff))
        self.W2 = nn.Parameter(torch.empty(d_hidden, d_ff))
        self.b2 = nn.Parameter(torch.empty(d_hidden))

    def forward(self, x):
        return F.linear(F.gelu(F.linear(x, self.W1, self.b1)), self.W2, self.b2)


class MoEFFN(nn.Module):
    def __init__(self, d_hidden: int, d_ff: int, num_experts: int, top_k: int, renormalize: bool = True):
        super().__init__()
        self.top_k = top_k
        self.renormalize = renormalize
        self.gate = nn.Parameter(torch.empty(num_experts, d_hidden))
        self.expert = nn.ModuleList(Expert(d_hidden, d_ff) for _ in range(num_experts))
        self.last_indices: Optional[torch.Tensor] = None
        self.last_margin: Optional[float] = None

    @property
    def num_experts(self) -> int:
        return len(self.expert)

    def forward(self, x: torch.Tensor, k: Optional[int] = None) -> torch.Tensor:
        k = self.top_k if k is None else k
        if x.shape[-1] != self.gate.shape[1]:
            raise ParameterError(f"MoE-FFN expects dim {self.gate.shape[1]}, got {x.shape[-1]}")
        flat = x.reshape(-1, x.shape[-1])
        indices, weights = gate_select(flat, self.gate, k, self.renormalize)
        self._record(flat, indices, k)
        out = torch.zeros_like(flat)
        for e, expert in enumerate(self.expert):
            rows, slot = torch.nonzero(indices == e, as_tuple=True)
            if rows.numel() == 0:
                continue
            y = expert(flat[rows]) * weights[rows, slot].unsqueeze(-1)
            out = out.index_add(0, rows, y)
        return out.reshape(x.shape)

    @torch.no_grad()
    def _record(self, flat, indices, k):
        self.last_indices = indices.detach()
        if k < self.num_experts:
            logits = torch.sort(F.linear(flat, self.gate), dim=-1, descending=True).values
            self.last_margin = float((logits[:, k - 1] - logits[:, k]).min())
        else:
            self.last_margin = math.inf


class Attention(nn.Module):
    """Multi-head scaled dot-product attention with separate q/k/v/o projections."""

    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.o = nn.Linear(dim, dim)

    def forward(self, x, memory=None, key_padding_mask=None):
        memory = x if memory is None else memory
        b, n, d = x.shape
        m = memory.shape[1]
        h = self.n_heads
        q = self.q(x).view(b, n, h, d // h).transpose(1, 2)
        k = self.k(memory).view(b, m, h, d // h).transpose(1, 2)
        v = self.v(memory).view(b, m, h, d // h).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(d // h)
        if key_padding_mask is not None:
            scores = scores.masked_fill(key_padding_mask[:, None, None, :], float("-inf"))
        out = torch.softmax(scores, dim=-1) @ v
        return self.o(out.transpose(1, 2).reshape(b, n, d))


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ConnectorConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.d_hidden)
        self.self_attn = Attention(cfg.d_hidden, cfg.n_heads)
        self.norm2 = nn.LayerNorm(cfg.d_hidden)
        self.moe = MoEFFN(cfg.d_hidden, cfg.d_ff, cfg.num_experts, cfg.top_k, cfg.renormalize)

    def forward(self, x, key_padding_mask=None):
        x = x + self.self_attn(self.norm1(x), key_padding_mask=key_padding_mask)
        return x + self.moe(self.norm2(x))


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ConnectorConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.d_hidden)
        self.self_attn = Attention(cfg.d_hidden, cfg.n_heads)
        self.norm2 = nn.LayerNorm(cfg.d_hidden)
        self.cross_attn = Attention(cfg.d_hidden, cfg.n_heads)
        self.norm3 = nn.LayerNorm(cfg.d_hidden)
        self.moe = MoEFFN(cfg.d_hidden, cfg.d_ff, cfg.num_experts, cfg.top_k, cfg.renormalize)

    def forward(self, q, memory, memory_padding_mask=None):
        q = q + self.self_attn(self.norm1(q))
        q = q + self.cross_attn(self.norm2(q), memory, key_padding_mask=memory_padding_mask)
        return q + self.moe(self.norm3(q))


class InputFFN(nn.Module):
    def __init__(self, d_in: int, d_hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(d_in, d_hidden)
        self.fc2 = nn.Linear(d_hidden, d_hidden)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class MoEConnector(nn.Module):
    def __init__(self, cfg: ConnectorConfig):
        super().__init__()
        self.config = cfg
        self.in_ffn = InputFFN(cfg.d_in, cfg.d_hidden)
        self.enc = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.n_enc_layers))
        self.dec = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.n_dec_layers))
        self.queries = nn.Parameter(torch.empty(cfg.num_queries, cfg.d_hidden))
        self.out_proj = nn.Linear(cfg.d_hidden, cfg.d_out)

    def moe_layers(self) -> list[MoEFFN]:
        return [layer.moe for layer in (*self.enc, *self.dec)]

    def forward(self, x: torch.Tensor, key_padding_mask=None) -> torch.Tensor:
        cfg = self.config
        if x.ndim != 3 or x.shape[-1] != cfg.d_in or x.shape[1] < 1:
            raise ParameterError(f"expected b x s x {cfg.d_in} input with s >= 1, got {tuple(x.shape)}")
        memory = self.in_ffn(x)
        for layer in self.enc:
            memory = layer(memory, key_padding_mask)
        q = self.queries.unsqueeze(0).expand(x.shape[0], -1, -1)
        for layer in self.dec:
            q = layer(q, memory, key_padding_mask)
        return self.out_proj(q)

    def routing_histogram(self) -> list[int]:
        """Expert selection counts summed over every MoE layer for the last forward pass."""
        counts = np.zeros(self.config.num_experts, dtype=np.int64)
        for moe in self.moe_layers():
            if moe.last_indices is not None:
                counts += np.bincount(moe.last_indices.reshape(-1).cpu().numpy(), minlength=moe.num_experts)
        return counts.tolist()

    def min_routing_margin(self) -> float:
        margins = [m.last_margin for m in self.moe_layers() if m.last_margin is not None]
        return min(margins) if margins else math.inf


def init_connector(cfg: ConnectorConfig, seed: int = 0, dtype=torch.float32) -> MoEConnector:
    """Build a connector with seeded weights.

    Every weight and bias is drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)),
    fan_in being the width of the vector the parameter multiplies (d_hidden for
    the gate and the queries). LayerNorm starts at (1, 0). The output
    projection is exactly zero.
    """
    model = MoEConnector(cfg).to(dtype)
    gen = torch.Generator().manual_seed(int(seed))

    def fill(p, fan_in):
        bound = 1.0 / math.sqrt(fan_in)
        p.copy_(torch.rand(p.shape, generator=gen, dtype=torch.float64).mul(2 * bound).sub(bound))

    with torch.no_grad():
        for name, mod in model.named_modules():
            if isinstance(mod, nn.LayerNorm):
                mod.weight.fill_(1.0)
                mod.bias.zero_()
            elif isinstance(mod, nn.Linear):
                if name == "out_proj":
                    mod.weight.zero_()
                    mod.bias.zero_()
                else:
                    fill(mod.weight, mod.in_features)
                    fill(mod.bias, mod.in_features)
            elif isinstance(mod, MoEFFN):
                fill(mod.gate, cfg.d_hidden)
            elif isinstance(mod, Expert):
                fill(mod.W1, cfg.d_hidden)
                fill(mod.b1, cfg.d_hidden)
                fill(mod.W2, cfg.d_ff)
                fill(mod.b2, cfg.d_ff)
        fill(model.queries, cfg.d_hidden)
    return model


def connector_forward(x, model: MoEConnector, cfg: Optional[ConnectorConfig] = None) -> torch.Tensor:
    if cfg is not None and cfg != model.config:
        raise ParameterError("config does not match the parameters")
    if not torch.is_tensor(x):
        x = torch.as_tensor(np.asarray(x), dtype=next(model.parameters()).dtype)
    return model(x)


def moe_ffn_forward(x, moe: MoEFFN, k: Optional[int] = None) -> torch.Tensor:
    return moe(x, k)


def filter_prefix_tokens(tokens, is_prefix=None):
    """Drop tokens flagged as prefix (system prompt, chat template), keeping order.

    ``tokens`` may be an :class:`~videdit.core.InstructionEmbedding` or an
    array-like with a separate ``is_prefix`` mask.
    """
    if is_prefix is None:
        tokens, is_prefix = tokens.tokens, tokens.is_prefix
    keep = ~np.asarray(is_prefix, dtype=bool)
    if keep.shape[0] != len(tokens):
        raise ParameterError("prefix mask length must equal the token count")
    if not keep.any():
        raise EmptyInputError("every token is a prefix token")
    if torch.is_tensor(tokens):
        return tokens[torch.from_numpy(keep).to(tokens.device)]
    return np.asarray(tokens)[keep]


def expert_utilization(x, moe: MoEFFN, k: Optional[int] = None) -> np.ndarray:
    """Histogram of expert selections over every row of ``x``."""
    x = torch.as_tensor(x, dtype=moe.gate.dtype)
    if x.numel() == 0:
        raise ParameterError("empty batch")
    flat = x.reshape(-1, x.shape[-1])
    with torch.no_grad():
        indices, _ = gate_select(flat, moe.gate, moe.top_k if k is None else k)
    return np.bincount(indices.reshape(-1).numpy(), minlength=moe.num_experts)


def save_connector(model: MoEConnector, archive, config_path=None) -> None:
    archive = Path(archive)
    arrays = {name: t.detach().cpu().numpy() for name, t in model.state_dict().items()}
    with open(archive, "wb") as fh:
        np.savez(fh, **arrays)
    config_path = Path(config_path) if config_path else archive.with_suffix(".json")
    config_path.write_text(model.config.to_json())


def load_connector(archive, config_path=None, dtype=None) -> MoEConnector:
    archive = Path(archive)
    config_path = Path(config_path) if config_path else archive.with_suffix(".json")
    cfg = ConnectorConfig.from_json(config_path.read_text())
    with np.load(archive) as data:
        state = {k: torch.from_numpy(data[k]) for k in data.files}
    dtype = dtype or next(iter(state.values())).dtype
    model = MoEConnector(cfg).to(dtype)
    model.load_state_dict(state)
    return model
