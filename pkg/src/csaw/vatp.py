"""Style statistics, visual attentive tokens, prompt assembly and the cosine classifier."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


def compute_style_stats(taps) -> list[torch.Tensor]:
    """Batch-and-spatial mean of every tapped ``(B, H, W, C)`` map -> list of ``(C,)``."""
    stats = []
    for layer in taps:
        if layer.shape[0] == 0:
            raise ValueError("cannot compute style statistics of an empty batch")
        stats.append(layer.reshape(-1, layer.shape[-1]).mean(dim=0))
    return stats


class VatGenerator(nn.Module):
    """Per-layer style projectors plus a shared Linear-ReLU-Linear-Sigmoid mask.

    Each projected style vector ``s`` becomes the token ``a * s + s`` with the
    mask ``a`` in (0, 1).
    """

    def __init__(self, in_channels, d_t: int, reduction: int = 4):
        super().__init__()
        hidden = max(1, d_t // reduction)
        self.in_channels = [int(c) for c in in_channels]
        self.d_t = d_t
        self.projectors = nn.ModuleList([nn.Linear(c, d_t) for c in self.in_channels])
        self.mask = nn.Sequential(nn.Linear(d_t, hidden), nn.ReLU(), nn.Linear(hidden, d_t), nn.Sigmoid())

    def project(self, stats):
        if len(stats) != len(self.projectors):
            raise ValueError(f"got {len(stats)} style vectors for {len(self.projectors)} projectors")
        out = []
        for mu, proj, c in zip(stats, self.projectors, self.in_channels):
            if mu.shape[-1] != c:
                raise ValueError(f"style vector width {mu.shape[-1]} != projector input {c}")
            out.append(proj(mu))
        return torch.stack(out)

    def forward(self, stats):
        s = self.project(stats)
        return self.mask(s) * s + s


def visual_attentive_tokens(stats, params: VatGenerator) -> torch.Tensor:
    return params(stats)


def init_context(backbone, context_length: int = 4, init_text: str | None = "a photo of a", seed: int = 0):
    """Context vectors from the token embeddings of ``init_text``.

    Falls back to N(0, 0.02) noise when the text does not tokenize to exactly
    ``context_length`` tokens.
    """
    if init_text:
        words = backbone.token_embed(init_text)[1:-1].detach().clone()
        if words.shape[0] == context_length:
            return words.float()
    g = torch.Generator().manual_seed(int(seed))
    return torch.randn(context_length, backbone.d_t, generator=g) * 0.02


def assemble_prompts(context, v_sm, class_parts, backbone, names=None) -> torch.Tensor:
    """Encode ``prefix + (context + v_sm) + suffix`` for every class -> ``(K, d_v)``."""
    if not class_parts:
        raise ValueError("no classes to build prompts for")
    if v_sm is not None and v_sm.shape != context.shape:
        raise ValueError(f"visual tokens {tuple(v_sm.shape)} do not match context {tuple(context.shape)}")
    ctx = context if v_sm is None else context + v_sm
    seqs = [torch.cat([prefix.to(ctx), ctx, suffix.to(ctx)]) for prefix, suffix in class_parts]
    return backbone.text_encode(seqs, names)


def ape(prompt_emb_jumbled, prompt_emb_clean):
    if prompt_emb_jumbled.shape != prompt_emb_clean.shape:
        raise ValueError("prompt embeddings must have equal shapes")
    return (prompt_emb_jumbled + prompt_emb_clean) / 2


def predict_probs(image_embedding, class_embedding, temperature: float):
    """Softmax over cosine similarity / temperature; rows are images, columns classes."""
    return F.softmax(similarity_logits(image_embedding, class_embedding, temperature), dim=-1)


def similarity_logits(image_embedding, class_embedding, temperature: float):
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if (image_embedding.norm(dim=-1) == 0).any() or (class_embedding.norm(dim=-1) == 0).any():
        raise ValueError("zero-norm embedding has no direction")
    img = F.normalize(image_embedding, dim=-1)
    cls = F.normalize(class_embedding, dim=-1)
    return img @ cls.T / temperature
