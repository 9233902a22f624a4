"""The trainable heads assembled around a frozen backbone."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .backbone import tap_indices
from .recon import Reconstructor
from .vatp import VatGenerator, ape, assemble_prompts, compute_style_stats, init_context, predict_probs

TRAINABLE_GROUPS = frozenset({"context", "vat", "reconstructor"})


@dataclass
class ForwardOutputs:
    emb_clean: torch.Tensor
    emb_jumbled: torch.Tensor
    class_emb: torch.Tensor
    probs: torch.Tensor
    x_hat: torch.Tensor


class CSaw(nn.Module):
    """Learnable context, visual-attentive token generator and reconstructor.

    The backbone is registered as a submodule so ``.double()``/``.to()`` reach
    it, but all its parameters stay frozen and are excluded from
    :meth:`trainable_parameters`.
    """

    def __init__(self, backbone, context_length=4, init_text="a photo of a", reduction=4,
                 tap_layers=None, seed_shape=None, temperature=None, seed=0):
        super().__init__()
        self.backbone = backbone
        self.tap_layers = list(tap_layers) if tap_layers else tap_indices(backbone.depth, context_length)
        if len(self.tap_layers) != context_length:
            raise ValueError(f"{len(self.tap_layers)} tapped layers for context length {context_length}")
        if not all(1 <= i <= backbone.depth for i in self.tap_layers):
            raise ValueError(f"tap layers must lie in [1, {backbone.depth}]")
        self.temperature = float(temperature or backbone.logit_temperature)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(int(seed))
            self.context = nn.Parameter(init_context(backbone, context_length, init_text, seed))
            self.vat = VatGenerator([backbone.tap_channels[i - 1] for i in self.tap_layers], backbone.d_t, reduction)
            self.reconstructor = Reconstructor(backbone.d_v, seed_shape)
        self._parts_cache = {}

    # -- parameter bookkeeping -----------------------------------------------

    def named_trainable_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if not n.startswith("backbone.")]

    def trainable_parameters(self):
        return [p for _, p in self.named_trainable_parameters()]

    def trainable_groups(self) -> set[str]:
        return {n.split(".")[0] for n, p in self.named_parameters() if p.requires_grad}

    def trainable_state(self) -> dict[str, torch.Tensor]:
        return {n: p.detach().clone() for n, p in self.named_trainable_parameters()}

    def load_trainable_state(self, state):
        params = dict(self.named_trainable_parameters())
        if set(state) != set(params):
            raise KeyError(f"parameter mismatch: {sorted(set(state) ^ set(params))}")
        with torch.no_grad():
            for n, t in state.items():
                params[n].copy_(t)

    def train(self, mode: bool = True):
        super().train(mode)
        self.backbone.eval()
        return self

    # -- forward pieces --------------------------------------------------------

    def class_parts(self, class_names):
        key = tuple(class_names)
        parts = self._parts_cache.get(key)
        if parts is None or parts[0][0].dtype != self.context.dtype:
            parts = [tuple(t.detach().to(self.context) for t in self.backbone.prompt_parts(n)) for n in class_names]
            self._parts_cache = {key: parts}
        return parts

    def encode(self, x):
        emb, taps = self.backbone.encode_image(x)
        stats = compute_style_stats([taps[i - 1] for i in self.tap_layers])
        return emb, stats

    def prompt_embeddings(self, stats, class_names):
        v_sm = self.vat(stats)
        return assemble_prompts(self.context, v_sm, self.class_parts(class_names), self.backbone, class_names)

    def forward(self, x, x_jumbled, class_names) -> ForwardOutputs:
        emb_clean, stats_clean = self.encode(x)
        emb_jig, stats_jig = self.encode(x_jumbled)
        class_emb = ape(self.prompt_embeddings(stats_jig, class_names), self.prompt_embeddings(stats_clean, class_names))
        probs = predict_probs(emb_jig, class_emb, self.temperature)
        x_hat = self.reconstructor(emb_jig)
        return ForwardOutputs(emb_clean, emb_jig, class_emb, probs, x_hat)

    @torch.no_grad()
    def classify_probs(self, x, class_names, x_jumbled=None):
        """Clean-input inference; with ``x_jumbled`` the training-time averaged path is used."""
        if x_jumbled is None:
            emb, stats = self.encode(x)
            return predict_probs(emb, self.prompt_embeddings(stats, class_names), self.temperature)
        return self.forward(x, x_jumbled, class_names).probs
