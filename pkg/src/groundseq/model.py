"""Small encoder-decoder transformer over grid features and the unified vocabulary."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from groundseq.vocab import BOS, PAD, UnifiedVocab

TYPE_EMBEDDINGS = ("none", "two_type", "three_type")


@dataclass
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    enc_layers: int = 2
    dec_layers: int = 2
    feat_dim: int = 14
    grid_h: int = 8
    grid_w: int = 8
    max_text_len: int = 64
    max_dec_len: int = 256
    type_embedding: str = "none"
    # two_type only: which side the object markers are tagged as
    markers_as: str = "text"

    def __post_init__(self):
        if self.type_embedding not in TYPE_EMBEDDINGS:
            raise ValueError(f"type_embedding must be one of {TYPE_EMBEDDINGS}")
        if self.markers_as not in ("text", "box"):
            raise ValueError("markers_as must be 'text' or 'box'")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")

    def to_dict(self) -> dict:
        return asdict(self)


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_model, d_model)
        self.v = nn.Linear(d_model, d_model)
        self.out = nn.Linear(d_model, d_model)

    def forward(self, x, mem, mask=None):
        # mask: bool, broadcastable to (B, 1, Tq, Tk); True = attend
        B, Tq, _ = x.shape
        Tk = mem.shape[1]
        q = self.q(x).view(B, Tq, self.n_heads, self.d_head).transpose(1, 2)
        k = self.k(mem).view(B, Tk, self.n_heads, self.d_head).transpose(1, 2)
        v = self.v(mem).view(B, Tk, self.n_heads, self.d_head).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.d_head)
        if mask is not None:
            scores = scores.masked_fill(~mask, float("-inf"))
        att = scores.softmax(dim=-1)
        y = (att @ v).transpose(1, 2).reshape(B, Tq, -1)
        return self.out(y)


class FeedForward(nn.Module):
    def __init__(self, d_model: int, d_ff: int):
        super().__init__()
        self.fc1 = nn.Linear(d_model, d_ff)
        self.fc2 = nn.Linear(d_ff, d_model)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.attn = MultiHeadAttention(cfg.d_model, cfg.n_heads)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.ff = FeedForward(cfg.d_model, cfg.d_ff)

    def forward(self, x, mask):
        h = self.ln1(x)
        x = x + self.attn(h, h, mask)
        return x + self.ff(self.ln2(x))


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.cross_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads)
        self.ln3 = nn.LayerNorm(cfg.d_model)
        self.ff = FeedForward(cfg.d_model, cfg.d_ff)

    def forward(self, y, mem, self_mask, mem_mask):
        h = self.ln1(y)
        y = y + self.self_attn(h, h, self_mask)
        y = y + self.cross_attn(self.ln2(y), mem, mem_mask)
        return y + self.ff(self.ln3(y))


def causal_mask(t: int, device=None) -> torch.Tensor:
    """(t, t) bool mask, True on and below the diagonal."""
    return torch.ones(t, t, dtype=torch.bool, device=device).tril()


class GroundedSeq2Seq(nn.Module):
    """Image-grid + text encoder, unified-vocabulary decoder with one output head."""

    def __init__(self, cfg: ModelConfig, vocab: UnifiedVocab):
        super().__init__()
        self.cfg = cfg
        self.vocab = vocab
        d = cfg.d_model
        n_cells = cfg.grid_h * cfg.grid_w
        self.img_proj = nn.Linear(cfg.feat_dim, d)
        self.img_pos = nn.Parameter(torch.randn(n_cells, d) * 0.02)
        self.txt_emb = nn.Embedding(vocab.n_text, d)
        self.txt_pos = nn.Parameter(torch.randn(cfg.max_text_len, d) * 0.02)
        self.enc_layers = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.enc_layers))
        self.enc_ln = nn.LayerNorm(d)

        self.tok_emb = nn.Embedding(vocab.size, d)
        self.dec_pos = nn.Parameter(torch.randn(cfg.max_dec_len + 1, d) * 0.02)
        n_types = {"none": 0, "two_type": 2, "three_type": 3}[cfg.type_embedding]
        self.type_emb = nn.Embedding(n_types, d) if n_types else None
        self.register_buffer("type_ids", self._type_table(vocab, cfg), persistent=False)
        self.dec_layers = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.dec_layers))
        self.dec_ln = nn.LayerNorm(d)
        self.head = nn.Linear(d, vocab.size)

    @staticmethod
    def _type_table(vocab: UnifiedVocab, cfg: ModelConfig) -> torch.Tensor:
        t = torch.zeros(vocab.size, dtype=torch.long)
        t[vocab.n_text : vocab.n_text + vocab.n_bins] = 1
        markers = [vocab.obj_open, vocab.obj_close]
        if cfg.type_embedding == "three_type":
            t[markers] = 2
        elif cfg.markers_as == "box":
            t[markers] = 1
        return t

    def encode(self, feats: torch.Tensor, text: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """feats (B, H*W, F), text (B, L) padded with PAD -> memory, memory mask."""
        B, n_cells, _ = feats.shape
        L = text.shape[1]
        if n_cells != self.img_pos.shape[0]:
            raise ValueError(f"expected {self.img_pos.shape[0]} grid cells, got {n_cells}")
        if L > self.cfg.max_text_len:
            raise ValueError(f"input text length {L} exceeds {self.cfg.max_text_len}")
        x_img = self.img_proj(feats) + self.img_pos
        x_txt = self.txt_emb(text) + self.txt_pos[:L]
        x = torch.cat([x_img, x_txt], dim=1)
        keep = torch.cat([torch.ones(B, n_cells, dtype=torch.bool, device=text.device), text != PAD], dim=1)
        mask = keep[:, None, None, :]
        for layer in self.enc_layers:
            x = layer(x, mask)
        return self.enc_ln(x), mask

    def decode(self, mem: torch.Tensor, mem_mask: torch.Tensor, prefix: torch.Tensor) -> torch.Tensor:
        """prefix (B, T) starting with BOS -> logits (B, T, V)."""
        T = prefix.shape[1]
        if T > self.dec_pos.shape[0]:
            raise ValueError(f"decoder prefix length {T} exceeds {self.dec_pos.shape[0]}")
        y = self.tok_emb(prefix) + self.dec_pos[:T]
        if self.type_emb is not None:
            y = y + self.type_emb(self.type_ids[prefix])
        self_mask = causal_mask(T, prefix.device)[None, None]
        for layer in self.dec_layers:
            y = layer(y, mem, self_mask, mem_mask)
        return self.head(self.dec_ln(y))

    def forward(self, feats, text, prefix):
        mem, mem_mask = self.encode(feats, text)
        return self.decode(mem, mem_mask, prefix)

    # decoding protocol (see groundseq.decoding)
    @torch.no_grad()
    def start_batch(self, images, input_texts):
        feats = torch.as_tensor(np.stack(images), dtype=self.head.weight.dtype)
        text = pad_batch(input_texts)
        return self.encode(feats, text)

    @torch.no_grad()
    def next_logits_batch(self, ctx, prefixes, rows):
        mem, mem_mask = ctx
        idx = torch.as_tensor(rows, dtype=torch.long)
        prefix = pad_batch(prefixes)
        lengths = torch.as_tensor([len(p) for p in prefixes])
        logits = self.decode(mem[idx], mem_mask[idx], prefix)
        return logits[torch.arange(len(rows)), lengths - 1].double().numpy()


def pad_batch(seqs: Sequence[Sequence[int]], pad: int = PAD, min_len: int = 1) -> torch.Tensor:
    n = max([min_len] + [len(s) for s in seqs])
    out = torch.full((len(seqs), n), pad, dtype=torch.long)
    for i, s in enumerate(seqs):
        if len(s):
            out[i, : len(s)] = torch.as_tensor(list(s), dtype=torch.long)
    return out


def teacher_forcing_batch(targets: Sequence[Sequence[int]]) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Decoder inputs (BOS + target[:-1]), targets, and the non-padding mask."""
    inp = pad_batch([[BOS] + list(t[:-1]) for t in targets])
    tgt = pad_batch(targets)
    mask = torch.zeros_like(tgt, dtype=torch.bool)
    for i, t in enumerate(targets):
        mask[i, : len(t)] = True
    return inp, tgt, mask


def lm_loss(logits: torch.Tensor, targets: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Mean negative log-likelihood of the target ids over unmasked steps."""
    if logits.shape[:-1] != targets.shape:
        raise ValueError(f"logits {tuple(logits.shape)} do not align with targets {tuple(targets.shape)}")
    if mask is None:
        mask = torch.ones_like(targets, dtype=torch.bool)
    if not mask.any():
        raise ValueError("every target step is masked")
    logp = logits.log_softmax(dim=-1).gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    return -(logp * mask).sum() / mask.sum()


def zero_init_(model: nn.Module) -> nn.Module:
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()
    return model


def count_params(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
