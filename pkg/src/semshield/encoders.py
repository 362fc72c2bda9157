"""Toy dual encoders over a shared embedding space.

The image tower is a small patch transformer that also exposes its CLS-query
attention row over patches; the text tower is a token transformer over a
corpus-built vocabulary. Both towers end in a linear projection and L2
normalization, so dot products are cosine similarities. Attention is
hand-rolled (no fused modules) because the defense reads, and differentiates
through, the attention probabilities themselves.
"""

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

PAD_ID = 0
UNK_ID = 1


def tokenize(text):
    return text.lower().split()


class Vocab:
    """Token-to-id table; id 0 pads, id 1 catches unknown tokens."""

    def __init__(self, tokens):
        self.tokens = tuple(tokens)
        self._ids = {t: i + 2 for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens) + 2

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def encode(self, text, max_len):
        return [self._ids.get(t, UNK_ID) for t in tokenize(text)[:max_len]]


def build_vocab(texts):
    return Vocab(sorted({t for text in texts for t in tokenize(text)}))


@dataclass(frozen=True)
class EncoderConfig:
    """Hyperparameters shared by both towers."""

    embed_dim: int = 64
    patch_size: int = 8
    image_size: int = 64
    depth: int = 2
    heads: int = 4
    vocab: tuple = ()  # token strings; the table adds pad/unk ids
    max_text_len: int = 100
    attn_layer: object = "mean"  # block index, or "mean" of every block's CLS row
    head_reduction: str = "mean"
    token_mixing: str = "cls_only"  # image tokens: route all content through CLS rows

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ValueError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim % self.heads != 0:
            raise ValueError("embed_dim must be divisible by heads")
        if self.head_reduction not in ("mean", "max"):
            raise ValueError(f"unknown head_reduction {self.head_reduction!r}")
        if self.attn_layer != "mean" and not isinstance(self.attn_layer, int):
            raise ValueError(f"attn_layer must be an int or 'mean', got {self.attn_layer!r}")
        if self.token_mixing not in ("full", "cls_only"):
            raise ValueError(f"unknown token_mixing {self.token_mixing!r}")

    @property
    def num_patches(self):
        return (self.image_size // self.patch_size) ** 2


@dataclass
class EncodedBatch:
    """One batch's embeddings: all rows unit-norm, attention rows sum to 1."""

    patch_embeddings: torch.Tensor  # N×n×d
    image_embedding: torch.Tensor  # N×d
    text_embedding: torch.Tensor  # N×d
    attention: torch.Tensor  # N×n
    ke_embeddings: torch.Tensor | None = None  # N×m×d, padded
    ke_mask: torch.Tensor | None = None  # N×m, True where a KE exists

    def check(self, atol=1e-5):
        for rows in (self.patch_embeddings, self.image_embedding, self.text_embedding):
            norms = rows.detach().norm(dim=-1)
            if not torch.allclose(norms, torch.ones_like(norms), atol=atol):
                raise AssertionError("embedding rows are not unit-norm")
        sums = self.attention.detach().sum(dim=-1)
        if not torch.allclose(sums, torch.ones_like(sums), atol=atol):
            raise AssertionError("attention rows do not sum to 1")
        if (self.attention.detach() < 0).any():
            raise AssertionError("attention has negative entries")
        return self


def _normalize(x):
    return x / x.norm(dim=-1, keepdim=True)


class TransformerBlock(nn.Module):
    """Pre-LN block; returns its attention probabilities alongside the states.

    With cls_only mixing, just the first token (the summary token) runs the
    attention sublayer; the other tokens keep their own state and pass
    through the MLP alone. Content then reaches the summary token only via
    its attention row, so that row fully gates information flow.
    """

    def __init__(self, dim, heads, mixing="full"):
        super().__init__()
        self.heads = heads
        self.mixing = mixing
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.attn_out = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim)
        )

    def forward(self, x, key_mask=None):
        b, L, d = x.shape
        h = self.heads
        q, k, v = self.qkv(self.norm1(x)).reshape(b, L, 3, h, d // h).unbind(dim=2)
        if self.mixing == "cls_only":
            q = q[:, :1]
        scores = torch.einsum("bqhe,bkhe->bhqk", q, k) / math.sqrt(d // h)
        if key_mask is not None:
            scores = scores.masked_fill(key_mask[:, None, None, :], float("-inf"))
        probs = scores.softmax(dim=-1)
        ctx = torch.einsum("bhqk,bkhe->bqhe", probs, v).reshape(b, -1, d)
        if self.mixing == "cls_only":
            x = torch.cat([x[:, :1] + self.attn_out(ctx), x[:, 1:]], dim=1)
        else:
            x = x + self.attn_out(ctx)
        x = x + self.mlp(self.norm2(x))
        return x, probs


class _Tower(nn.Module):
    def __init__(self, dim, depth, heads, seq_len, mixing="full"):
        super().__init__()
        self.cls = nn.Parameter(torch.zeros(1, 1, dim))
        self.pos = nn.Parameter(torch.zeros(1, seq_len + 1, dim))
        self.blocks = nn.ModuleList(
            TransformerBlock(dim, heads, mixing) for _ in range(depth))
        self.norm = nn.LayerNorm(dim)
        nn.init.normal_(self.cls, std=0.02)
        nn.init.normal_(self.pos, std=0.02)

    def forward(self, tokens, key_mask=None, want_layer=None):
        b, L, _ = tokens.shape
        x = torch.cat([self.cls.expand(b, -1, -1), tokens], dim=1)
        x = x + self.pos[:, : L + 1]
        if key_mask is not None:
            key_mask = torch.cat(
                [torch.zeros(b, 1, dtype=torch.bool, device=x.device), key_mask], dim=1
            )
        wanted = [] if want_layer == "mean" else None
        for i, block in enumerate(self.blocks):
            x, probs = block(x, key_mask)
            if want_layer == "mean":
                wanted.append(probs)
            elif want_layer is not None and i == want_layer % len(self.blocks):
                wanted = probs
        if isinstance(wanted, list):
            wanted = torch.stack(wanted, dim=1)  # b × layers × h × L × L
        return self.norm(x), wanted


class DualEncoder(nn.Module):
    """Image and text towers plus projections into the shared space."""

    def __init__(self, config):
        super().__init__()
        self.config = config
        d, p = config.embed_dim, config.patch_size
        self.vocab = Vocab(config.vocab)
        self.patch_proj = nn.Linear(p * p * 3, d)
        self.image_tower = _Tower(d, config.depth, config.heads,
                                  config.num_patches, config.token_mixing)
        self.token_emb = nn.Embedding(len(self.vocab), d, padding_idx=PAD_ID)
        self.text_tower = _Tower(d, config.depth, config.heads, config.max_text_len)
        self.image_out = nn.Linear(d, d, bias=False)
        self.text_out = nn.Linear(d, d, bias=False)

    @property
    def dtype(self):
        return self.patch_proj.weight.dtype

    def _patchify(self, images):
        if not torch.is_tensor(images):
            images = torch.as_tensor(np.asarray(images))
        images = images.to(dtype=self.dtype, device=self.patch_proj.weight.device)
        if images.ndim == 3:
            images = images[None]
        n, h, w, c = images.shape
        p = self.config.patch_size
        if h != self.config.image_size or w != self.config.image_size or c != 3:
            raise ValueError(
                f"expected {self.config.image_size}px RGB images, got {tuple(images.shape[1:])}"
            )
        grid = h // p
        patches = images.reshape(n, grid, p, grid, p, c)
        return patches.permute(0, 1, 3, 2, 4, 5).reshape(n, grid * grid, p * p * c)

    def encode_image(self, images):
        """(patch_embeddings N×n×d, image_embedding N×d, attention N×n)."""
        tokens = self.patch_proj(self._patchify(images))
        states, probs = self.image_tower(
            tokens, want_layer=self.config.attn_layer
        )
        cls_row = probs[..., 0, 1:]  # heads × patches, with a layer axis when averaging
        if self.config.head_reduction == "mean":
            cls_row = cls_row.mean(dim=-2)
        else:
            cls_row = cls_row.amax(dim=-2)
        if cls_row.ndim == 3:
            cls_row = cls_row.mean(dim=1)
        attention = cls_row / cls_row.sum(dim=-1, keepdim=True)
        patch_emb = _normalize(self.image_out(states[:, 1:]))
        image_emb = _normalize(self.image_out(states[:, 0]))
        return patch_emb, image_emb, attention

    def _text_states(self, texts):
        if isinstance(texts, str):
            texts = [texts]
        ids = [self.vocab.encode(t, self.config.max_text_len) for t in texts]
        L = max((len(i) for i in ids), default=0)
        batch = torch.full((len(ids), L), PAD_ID, dtype=torch.long,
                           device=self.patch_proj.weight.device)
        for r, row in enumerate(ids):
            batch[r, : len(row)] = torch.as_tensor(row, dtype=torch.long)
        key_mask = batch == PAD_ID
        states, _ = self.text_tower(self.token_emb(batch), key_mask=key_mask)
        return states

    def encode_text(self, texts):
        """Unit-norm N×d embeddings; inputs truncate at max_text_len tokens."""
        return _normalize(self.text_out(self._text_states(texts)[:, 0]))

    def encode_kes(self, ke_strings):
        """Embeddings for KE phrases; same path as captions."""
        return self.encode_text(list(ke_strings))


def make_dual_encoder(config, seed=0):
    """Build a DualEncoder with all weights drawn from one seeded stream."""
    state = torch.random.get_rng_state()
    torch.manual_seed(int(seed))
    try:
        model = DualEncoder(config)
    finally:
        torch.random.set_rng_state(state)
    return model
