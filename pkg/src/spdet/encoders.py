"""Learned text encoders for the two prompt modalities.

The report encoder produces token-level embeddings through one
self-attention block; the beacon encoder mean-pools token embeddings
through a two-layer projection and unit-normalizes, so cosine similarity
against region embeddings is a plain dot product.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .enhancer import MODALITY_SCP, TextEmbedding
from .errors import ParseError
from .nn import (
    AttentionWeights,
    FeedForwardWeights,
    LayerNormWeights,
    feed_forward,
    gather_rows,
    gauss_param,
    init_attention,
    init_feed_forward,
    init_layer_norm,
    l2_normalize_rows,
    layer_norm,
    linear_param,
    multi_head_attention,
    zeros_param,
)
from .tensor import Tensor, concat, gelu, matmul

UNKNOWN_ID = 0
PAD_ID = -1

_TOKEN_RE = re.compile(r"[a-z0-9']+")


@dataclass
class Vocabulary:
    """Token ids are 1-based; id 0 is the unknown token."""

    token_to_id: dict
    max_len: int

    @classmethod
    def build(cls, texts, max_len=64):
        tokens = set()
        for text in texts:
            tokens.update(_TOKEN_RE.findall(text.lower()))
        return cls(
            token_to_id={tok: i + 1 for i, tok in enumerate(sorted(tokens))},
            max_len=max_len,
        )

    @property
    def size(self):
        return len(self.token_to_id)

    def save(self, path):
        ordered = sorted(self.token_to_id, key=self.token_to_id.get)
        with open(path, "w", encoding="utf-8") as f:
            f.write("\n".join(ordered) + ("\n" if ordered else ""))

    @classmethod
    def load(cls, path, max_len=64):
        table = {}
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f):
                token = line.rstrip("\n")
                if not token:
                    raise ParseError(f"{path}:{lineno + 1}: empty vocabulary line")
                if token in table:
                    raise ParseError(f"{path}:{lineno + 1}: duplicate token {token!r}")
                table[token] = lineno + 1
        return cls(token_to_id=table, max_len=max_len)


def tokenize(text, vocab, pad_to=None):
    """Lowercase, split on non-word characters, map through the vocabulary.

    Unknown words map to id 0. Sequences are truncated at the vocabulary's
    max length; if ``pad_to`` is given the result is right-padded with the
    pad id, which every consumer drops before attention.
    """
    ids = [vocab.token_to_id.get(w, UNKNOWN_ID) for w in _TOKEN_RE.findall(text.lower())]
    ids = ids[: vocab.max_len]
    if pad_to is not None:
        ids = ids[:pad_to] + [PAD_ID] * max(0, pad_to - len(ids))
    return ids


@dataclass
class ClassEmbedding:
    matrix: Tensor  # N_cls x D_e, rows unit-normalized
    class_names: list


@dataclass
class ScpEncoderWeights:
    token_embed: Tensor  # (V+1) x D_t, row 0 = unknown
    pos_embed: Tensor  # max_len x D_t
    null_token: Tensor  # 1 x D_t, stands in for an empty report
    attn: AttentionWeights
    norm: LayerNormWeights
    ffn: FeedForwardWeights
    heads: int = 2


def init_scp_encoder(rng, vocab_size, max_len, d_t, heads=2):
    return ScpEncoderWeights(
        token_embed=gauss_param(rng, (vocab_size + 1, d_t), 0.02),
        pos_embed=gauss_param(rng, (max_len, d_t), 0.02),
        null_token=gauss_param(rng, (1, d_t), 0.02),
        attn=init_attention(rng, d_t),
        norm=init_layer_norm(d_t),
        ffn=init_feed_forward(rng, d_t),
        heads=heads,
    )


def encode_scp(report, weights, vocab):
    """Token-level encoding of a post-processed report."""
    ids = [i for i in tokenize(" ".join(report.sentences), vocab) if i != PAD_ID]
    if not ids:
        return TextEmbedding(embedding=weights.null_token, modality=MODALITY_SCP)
    x = gather_rows(weights.token_embed, ids) + gather_rows(
        weights.pos_embed, np.arange(len(ids))
    )
    attended = multi_head_attention(x, x, x, weights.heads, weights.attn) + x
    out = feed_forward(layer_norm(attended, weights.norm.gain, weights.norm.bias), weights.ffn)
    return TextEmbedding(embedding=out + attended, modality=MODALITY_SCP)


@dataclass
class DbpEncoderWeights:
    token_embed: Tensor  # (V+1) x D_e
    w1: Tensor
    b1: Tensor
    # the output layer is bias-free: a shared bias ahead of the row
    # normalization would collapse all class anchors toward one direction
    w2: Tensor


def init_dbp_encoder(rng, vocab_size, d_e):
    return DbpEncoderWeights(
        token_embed=gauss_param(rng, (vocab_size + 1, d_e), 0.02),
        w1=linear_param(rng, d_e, d_e),
        b1=zeros_param(d_e),
        w2=linear_param(rng, d_e, d_e),
    )


def encode_dbp(texts, weights, vocab):
    """Shared-space class/phrase encoding: mean token embedding through two
    affine layers, rows L2-normalized."""
    if not texts:
        raise ParseError("encode_dbp requires at least one string")
    rows = []
    for text in texts:
        ids = [i for i in tokenize(text, vocab, pad_to=None) if i != PAD_ID]
        if not ids:
            ids = [UNKNOWN_ID]
        rows.append(gather_rows(weights.token_embed, ids).mean(axis=0, keepdims=True))
    pooled = rows[0] if len(rows) == 1 else concat(rows, axis=0)
    hidden = gelu(matmul(pooled, weights.w1) + weights.b1)
    projected = matmul(hidden, weights.w2)
    return ClassEmbedding(matrix=l2_normalize_rows(projected), class_names=list(texts))
