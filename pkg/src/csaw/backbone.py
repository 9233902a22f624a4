"""Frozen vision-language backbones.

Two implementations share one duck-typed surface used by the rest of the
package:

``encode_image(x)``
    ``(B, 3, 224, 224)`` -> ``(embeddings (B, d_v), taps)`` where ``taps`` holds
    one channels-last feature map ``(B, H, W, C)`` per block, in network order
    (``tap_channels`` lists their widths).
``prompt_parts(class_name)``
    token embeddings ``(prefix, suffix)`` that sandwich the learnable context.
``token_embed(text)``
    token embeddings ``(L, d_t)`` for plain text, special tokens included.
``text_encode(sequences, names=None)``
    list of ``(L_k, d_t)`` token-embedding sequences -> ``(K, d_v)``.

:class:`StandInBackbone` is a tiny CPU model for tests; :class:`ClipBackbone`
wraps a HuggingFace ``CLIPModel`` checkpoint.
"""

from __future__ import annotations

import hashlib
import math
import re
import zlib

import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import PALETTE
from .jigsaw import IMAGE_SIZE, normalize

REFERENCE_CHECKPOINTS = {
    "ViT-B/16": "openai/clip-vit-base-patch16",
}


class BackboneError(RuntimeError):
    pass


def _words(text: str) -> list[str]:
    return re.findall(r"[a-z0-9]+|[^\sa-z0-9]", text.lower().replace("_", " "))


def tap_indices(depth: int, n: int) -> list[int]:
    """``n`` block indices (1-based) spread evenly over ``depth`` blocks.

    ``tap_indices(12, 4) == [3, 6, 9, 12]``. Indices repeat when ``n > depth``.
    """
    if n < 1:
        raise ValueError("need at least one tapped layer")
    return [max(1, math.ceil(depth * (i + 1) / n)) for i in range(n)]


def checksum_parameters(module: nn.Module) -> str:
    """sha256 over every named parameter and buffer (name, dtype, shape, bytes)."""
    h = hashlib.sha256()
    tensors = list(module.named_parameters()) + list(module.named_buffers())
    for name, t in sorted(tensors, key=lambda kv: kv[0]):
        arr = t.detach().cpu().contiguous().reshape(-1)
        h.update(name.encode())
        h.update(str(arr.dtype).encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(arr.view(torch.uint8).numpy().tobytes() if arr.numel() else b"")
    return h.hexdigest()


class _FrozenMixin:
    frozen = True

    def freeze(self):
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        self.frozen = True
        return self

    def checksum_parameters(self) -> str:
        return checksum_parameters(self)

    def _check_finite(self, t, what):
        if not torch.isfinite(t).all():
            raise BackboneError(f"non-finite values in {what}; backbone weights look corrupt")


class StandInBackbone(_FrozenMixin, nn.Module):
    """Deterministic two-block conv vision encoder plus a mean-pooling linear text encoder.

    Each vision block is two 3x3 convolutions; all four are tapped.

    Both towers end in the same ``d_t -> d_v`` projection so they share an
    embedding space. Colour words from :data:`csaw.data.PALETTE` get token
    vectors chosen so that ``"a photo of a <colour>"`` embeds exactly like a
    flat image of that colour. That gives the stand-in a zero-shot ability on
    the synthetic dataset, which is the role pretraining plays for CLIP.
    """

    d_v = 32
    d_t = 16
    vocab_size = 4096
    context_limit = 77
    depth = 4
    tap_channels = (8, 8, 16, 16)

    def __init__(self, seed: int = 0, temperature: float = 0.01, ground_text: str = "a photo of a"):
        super().__init__()
        g = torch.Generator().manual_seed(int(seed))

        def conv(cin, cout, stride):
            layer = nn.Conv2d(cin, cout, 3, stride=stride, padding=1)
            fan = cin * 9
            with torch.no_grad():
                layer.weight.copy_(torch.randn(layer.weight.shape, generator=g) * (1.5 / math.sqrt(fan)))
                layer.bias.copy_(torch.randn(layer.bias.shape, generator=g) * 0.1)
            return layer

        self.convs = nn.ModuleList([conv(3, 8, 1), conv(8, 8, 2), conv(8, 16, 1), conv(16, 16, 2)])
        self.head = nn.Linear(16, self.d_t)
        with torch.no_grad():
            self.head.weight.copy_(torch.randn(self.d_t, 16, generator=g) / math.sqrt(16))
            self.head.bias.zero_()
        self.proj = nn.Parameter(torch.randn(self.d_v, self.d_t, generator=g) / math.sqrt(self.d_t))
        self.token_table = nn.Parameter(torch.randn(self.vocab_size, self.d_t, generator=g) * 0.5)
        self.logit_temperature = float(temperature)
        # rows 0/1: start/end tokens, then one dedicated row per palette word
        self._lexicon = {w: 2 + i for i, w in enumerate(PALETTE)}
        self._calibrate(ground_text)
        self.freeze()

    # -- vision ---------------------------------------------------------------

    def _pre_embed(self, x):
        h = F.avg_pool2d(x, 8)
        taps = []
        for conv in self.convs:
            h = torch.tanh(conv(h))
            taps.append(h)
        return self.head(h.mean(dim=(2, 3))), taps

    def encode_image(self, x):
        if x.ndim != 4 or x.shape[1:] != (3, IMAGE_SIZE, IMAGE_SIZE):
            raise ValueError(f"expected (B, 3, {IMAGE_SIZE}, {IMAGE_SIZE}) images, got {tuple(x.shape)}")
        pre, taps = self._pre_embed(x)
        emb = pre @ self.proj.T
        self._check_finite(emb, "image embeddings")
        return emb, [t.permute(0, 2, 3, 1) for t in taps]

    # -- text -----------------------------------------------------------------

    def _token_id(self, word):
        if word in self._lexicon:
            return self._lexicon[word]
        n_fixed = 2 + len(self._lexicon)
        return n_fixed + zlib.crc32(word.encode()) % (self.vocab_size - n_fixed)

    def _embed_words(self, text):
        ids = [self._token_id(w) for w in _words(text)]
        return self.token_table[torch.as_tensor(ids, dtype=torch.long)].reshape(len(ids), self.d_t)

    def token_embed(self, text: str) -> torch.Tensor:
        return torch.cat([self.token_table[:1], self._embed_words(text), self.token_table[1:2]])

    def prompt_parts(self, class_name: str):
        return self.token_table[:1], torch.cat([self._embed_words(class_name), self.token_table[1:2]])

    def text_encode(self, sequences, names=None) -> torch.Tensor:
        rows = []
        for k, seq in enumerate(sequences):
            if seq.shape[0] > self.context_limit:
                who = names[k] if names else f"#{k}"
                raise ValueError(f"prompt for class {who!r} has {seq.shape[0]} tokens, limit is {self.context_limit}")
            rows.append(seq.mean(dim=0))
        out = torch.stack(rows) @ self.proj.T
        self._check_finite(out, "text embeddings")
        return out

    @torch.no_grad()
    def _calibrate(self, ground_text):
        names = list(PALETTE)
        rgb = torch.tensor([PALETTE[n] for n in names], dtype=torch.float32) / 255.0
        flat = normalize(rgb[:, :, None, None].expand(-1, -1, IMAGE_SIZE, IMAGE_SIZE))
        pre, _ = self._pre_embed(flat)
        # centre the image pre-embedding over the palette so cosines are informative
        self.head.bias.sub_(pre.mean(dim=0))
        pre = pre - pre.mean(dim=0)
        prompt = self.token_embed(ground_text)
        length = prompt.shape[0] + 1
        for name, target in zip(names, pre):
            self.token_table[self._lexicon[name]] = length * target - prompt.sum(dim=0)


class ClipBackbone(_FrozenMixin, nn.Module):
    """Adapter around a HuggingFace ``CLIPModel`` exposing tapped ViT blocks.

    ``tokenizer`` maps text to a list of token ids without special tokens;
    ``bos_id``/``eos_id`` frame each prompt.
    """

    def __init__(self, model, tokenizer, bos_id: int, eos_id: int):
        super().__init__()
        self.model = model
        self.tokenizer = tokenizer
        self.bos_id, self.eos_id = int(bos_id), int(eos_id)
        vcfg = model.config.vision_config
        self.depth = vcfg.num_hidden_layers
        self.tap_channels = (vcfg.hidden_size,) * self.depth
        self.grid = vcfg.image_size // vcfg.patch_size
        self.d_v = model.config.projection_dim
        self.d_t = model.config.text_config.hidden_size
        self.context_limit = model.config.text_config.max_position_embeddings
        self.freeze()

    @property
    def logit_temperature(self) -> float:
        return float(1.0 / self.model.logit_scale.exp())

    @classmethod
    def from_pretrained(cls, name: str = "ViT-B/16"):
        from transformers import CLIPModel, CLIPTokenizer

        ref = REFERENCE_CHECKPOINTS.get(name, name)
        model = CLIPModel.from_pretrained(ref)
        tok = CLIPTokenizer.from_pretrained(ref)

        def encode(text):
            return tok(text, add_special_tokens=False)["input_ids"]

        return cls(model, encode, tok.bos_token_id, tok.eos_token_id)

    def encode_image(self, x):
        out = self.model.vision_model(pixel_values=x, output_hidden_states=True)
        emb = self.model.visual_projection(out.pooler_output)
        self._check_finite(emb, "image embeddings")
        b = x.shape[0]
        # hidden_states[0] is the patch embedding; block i output is hidden_states[i]
        taps = [h[:, 1:, :].reshape(b, self.grid, self.grid, -1) for h in out.hidden_states[1:]]
        return emb, taps

    def _embed_ids(self, ids):
        table = self.model.text_model.embeddings.token_embedding
        return table(torch.as_tensor(ids, dtype=torch.long, device=table.weight.device))

    def token_embed(self, text):
        return self._embed_ids([self.bos_id, *self.tokenizer(text), self.eos_id])

    def prompt_parts(self, class_name):
        words = class_name.replace("_", " ")
        return self._embed_ids([self.bos_id]), self._embed_ids([*self.tokenizer(words + "."), self.eos_id])

    def text_encode(self, sequences, names=None):
        text = self.model.text_model
        L = self.context_limit
        lengths = []
        padded = []
        for k, seq in enumerate(sequences):
            if seq.shape[0] > L:
                who = names[k] if names else f"#{k}"
                raise ValueError(f"prompt for class {who!r} has {seq.shape[0]} tokens, limit is {L}")
            lengths.append(seq.shape[0])
            padded.append(F.pad(seq, (0, 0, 0, L - seq.shape[0])))
        h = torch.stack(padded)
        pos = text.embeddings.position_embedding(torch.arange(L, device=h.device))
        h = h + pos
        mask = torch.full((L, L), float("-inf"), dtype=h.dtype, device=h.device).triu(1)
        h = text.encoder(inputs_embeds=h, attention_mask=mask[None, None].expand(h.shape[0], 1, L, L)).last_hidden_state
        h = text.final_layer_norm(h)
        eot = torch.as_tensor(lengths, device=h.device) - 1
        pooled = h[torch.arange(h.shape[0], device=h.device), eot]
        out = self.model.text_projection(pooled)
        self._check_finite(out, "text embeddings")
        return out


def build_backbone(name: str = "standin", seed: int = 0, temperature: float | None = None):
    if name == "standin":
        return StandInBackbone(seed=seed, temperature=0.01 if temperature is None else temperature)
    if temperature is not None:
        raise ValueError("temperature override is only supported for the stand-in backbone")
    return ClipBackbone.from_pretrained(name)
