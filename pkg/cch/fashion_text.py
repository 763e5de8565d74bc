# cch/fashion_text.py
"""
Fashion descriptions over a closed attribute vocabulary.

Exports:
- Vocabulary: token <-> id map (id 0 = <pad>, id 1 = <unk>)
    Vocabulary.from_file(path)   # one token per line, line number = id
    vocab.id(token) -> int
    vocab.tokenize(text) -> list[int]
- FashionText: token ids + embedding rows {w_l}
- TextEncoder: trainable embedding table (nn.Module)
- encode(description, vocab, table, max_tokens) -> FashionText
- attention_weights(f, words, W) -> p over words
- cross_attention(f, words, W) -> Σ_l p_l w_l
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple, Union

import torch
from torch import Tensor, nn

from Constants.variables import Text
from cch.diff_engine import DTYPE
from utils.errors import InvalidInputError

# ---------------- Vocabulary ---------------- #


class Vocabulary:

    def __init__(self, tokens: Sequence[str]):
        tokens = tuple(tokens)
        if len(tokens) < 2 or tokens[0] != Text.PAD or tokens[1] != Text.UNK:
            raise InvalidInputError(f"vocabulary must start with {Text.PAD}, {Text.UNK}")
        if len(set(tokens)) != len(tokens):
            raise InvalidInputError("vocabulary contains duplicate tokens")
        self.tokens: Tuple[str, ...] = tokens
        self.index: Dict[str, int] = {t: i for i, t in enumerate(tokens)}

    @classmethod
    def from_file(cls, path: str) -> "Vocabulary":
        with open(path, "r", encoding="utf-8") as f:
            tokens = [line.strip() for line in f if line.strip()]
        return cls(tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def unk_id(self) -> int:
        return 1

    def id(self, token: str) -> int:
        return self.index.get(token, self.unk_id)

    def tokenize(self, text: str) -> List[int]:
        """Lowercase, split on whitespace, unknown words -> <unk>."""
        return [self.id(w) for w in text.lower().split()]


# ---------------- Encoded text ---------------- #


@dataclass(frozen=True, eq=False)
class FashionText:
    ids: Tensor  # (L,) long
    embeddings: Tensor  # (L, d_w)
    text: str = ""

    def __len__(self) -> int:
        return int(self.ids.shape[0])


def encode(description: str, vocab: Vocabulary, table: nn.Embedding,
           max_tokens: int = Text.MAX_TOKENS) -> FashionText:
    ids = vocab.tokenize(description)
    if not ids:
        raise InvalidInputError("description must contain at least one token")
    ids_t = torch.tensor(ids[:max_tokens], dtype=torch.long)
    return FashionText(ids=ids_t, embeddings=table(ids_t), text=description)


class TextEncoder(nn.Module):
    """Learned word embeddings; no contextual encoder."""

    def __init__(self, vocab: Vocabulary, embed_dim: int = Text.EMBED_DIM,
                 max_tokens: int = Text.MAX_TOKENS):
        super().__init__()
        self.vocab = vocab
        self.max_tokens = max_tokens
        self.table = nn.Embedding(len(vocab), embed_dim, padding_idx=vocab.pad_id, dtype=DTYPE)
        with torch.no_grad():
            self.table.weight.normal_(0.0, 0.3)
            self.table.weight[vocab.pad_id].zero_()

    @property
    def embed_dim(self) -> int:
        return self.table.embedding_dim

    def encode(self, description: str) -> FashionText:
        return encode(description, self.vocab, self.table, self.max_tokens)


# ---------------- Cross-modal attention ---------------- #


def _word_matrix(words: Union[FashionText, Tensor]) -> Tensor:
    w = words.embeddings if isinstance(words, FashionText) else words
    if w.shape[0] == 0:
        raise InvalidInputError("cross attention needs at least one word")
    return w


def attention_logits(f: Tensor, words: Union[FashionText, Tensor], weight: Tensor) -> Tensor:
    """f W w_lᵀ for features (..., d_f) -> (..., L)."""
    w = _word_matrix(words)
    if f.shape[-1] != weight.shape[0] or weight.shape[1] != w.shape[-1]:
        raise InvalidInputError(
            f"attention shapes disagree: f {tuple(f.shape)}, W {tuple(weight.shape)}, "
            f"words {tuple(w.shape)}")
    return (f @ weight) @ w.T


def attention_weights(f: Tensor, words: Union[FashionText, Tensor], weight: Tensor) -> Tensor:
    # torch.softmax subtracts the row max before exponentiating
    return torch.softmax(attention_logits(f, words, weight), dim=-1)


def cross_attention(f: Tensor, words: Union[FashionText, Tensor], weight: Tensor) -> Tensor:
    """Context Σ_l softmax_l(f W w_lᵀ) w_l, a convex combination of the word rows."""
    w = _word_matrix(words)
    return attention_weights(f, w, weight) @ w
