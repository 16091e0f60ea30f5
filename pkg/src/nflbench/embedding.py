"""Closed-vocabulary embedding space: tokens, tables, prompts, encoders.

The canonical table defines the metric used everywhere else: the distance
between two tokens is the Euclidean distance between their canonical
embedding rows, and a prompt embeds as the mean of its token rows. The
encoder is a full-rank linear map of that space, which makes its two-sided
distance-preservation constants computable from singular values.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Union

import numpy as np

from .errors import (
    DegenerateVocabularyError,
    SingularEncoderError,
    UnknownTokenError,
)

SINGULARITY_TOL = 1e-12


@dataclass(frozen=True)
class Vocabulary:
    """Ordered unique token strings; a token's id is its position."""

    tokens: tuple[str, ...]
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        tokens = tuple(self.tokens)
        if len(tokens) < 2:
            raise ValueError("vocabulary needs at least two tokens")
        index: dict[str, int] = {}
        for i, tok in enumerate(tokens):
            if tok in index:
                raise ValueError(f"duplicate token {tok!r}")
            index[tok] = i
        object.__setattr__(self, "tokens", tokens)
        object.__setattr__(self, "_index", index)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def id_of(self, token: str) -> int:
        try:
            return self._index[token]
        except KeyError:
            raise UnknownTokenError(token) from None

    def token(self, token_id: int) -> str:
        return self.tokens[token_id]


@dataclass(frozen=True)
class EmbeddingTable:
    """One embedding row per token.

    role is "canonical" (defines the prompt-space metric) or "encoded"
    (the image of a canonical table under an encoder).
    """

    matrix: np.ndarray
    role: str = "canonical"

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float)
        if m.ndim != 2:
            raise ValueError("embedding matrix must be 2-D")
        if m.shape[0] < 2:
            raise ValueError("embedding table needs at least two rows")
        if m.shape[1] < 1:
            raise ValueError("embedding dimension must be >= 1")
        if not np.all(np.isfinite(m)):
            raise ValueError("embedding matrix contains non-finite entries")
        if self.role not in ("canonical", "encoded"):
            raise ValueError(f"unknown table role {self.role!r}")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @property
    def vocab_size(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def row(self, token_id: int) -> np.ndarray:
        return self.matrix[token_id]

    def rows(self, token_ids) -> np.ndarray:
        return self.matrix[np.asarray(token_ids, dtype=int)]


@dataclass(frozen=True)
class Prompt:
    """Non-empty sequence of vocabulary indices."""

    token_ids: tuple[int, ...]

    def __post_init__(self):
        ids = tuple(int(i) for i in self.token_ids)
        if not ids:
            raise ValueError("prompt must contain at least one token")
        if any(i < 0 for i in ids):
            raise ValueError("token ids must be non-negative")
        object.__setattr__(self, "token_ids", ids)

    @classmethod
    def of(cls, ids: Iterable[int]) -> "Prompt":
        return cls(tuple(ids))

    def __len__(self) -> int:
        return len(self.token_ids)

    def text(self, vocab: Vocabulary) -> str:
        return " ".join(vocab.token(i) for i in self.token_ids)


def tokenize(text: str, vocab: Vocabulary) -> Prompt:
    """Whitespace-split text over a closed vocabulary."""
    units = text.split()
    if not units:
        raise ValueError("empty prompt text")
    return Prompt(tuple(vocab.id_of(u) for u in units))


def _check_ids(prompt: Prompt, table: EmbeddingTable) -> None:
    if max(prompt.token_ids) >= table.vocab_size:
        raise ValueError("prompt contains ids outside the table")


def token_embeddings(prompt: Prompt, table: EmbeddingTable) -> np.ndarray:
    """Per-token embedding rows, shape (len(prompt), M)."""
    _check_ids(prompt, table)
    return table.rows(prompt.token_ids)


def embed_prompt(prompt: Prompt, table: EmbeddingTable) -> np.ndarray:
    """Mean-pooled prompt embedding (arithmetic mean of token rows)."""
    return token_embeddings(prompt, table).mean(axis=0)


def nearest_token(v: np.ndarray, table: EmbeddingTable) -> int:
    """Id of the embedding row closest to v; ties go to the lowest id."""
    v = np.asarray(v, dtype=float)
    if v.shape != (table.dim,):
        raise ValueError(f"vector has dimension {v.shape}, table expects ({table.dim},)")
    d2 = np.sum((table.matrix - v) ** 2, axis=1)
    return int(np.argmin(d2))  # argmin returns the first minimum


def nearest_tokens(vs: np.ndarray, table: EmbeddingTable) -> np.ndarray:
    """Vectorized nearest_token over rows of vs, shape (..., M) -> (...)."""
    vs = np.asarray(vs, dtype=float)
    flat = vs.reshape(-1, table.dim)
    # |x - e|^2 = |x|^2 - 2 x.e + |e|^2; the |x|^2 term is constant per row
    cross = flat @ table.matrix.T
    norms = np.sum(table.matrix**2, axis=1)
    scores = norms[None, :] - 2.0 * cross
    return np.argmin(scores, axis=1).reshape(vs.shape[:-1])


def vocab_diameter(table: EmbeddingTable) -> float:
    """Largest pairwise distance between token embeddings (Omega)."""
    m = table.matrix
    d2 = np.sum((m[:, None, :] - m[None, :, :]) ** 2, axis=2)
    omega = float(np.sqrt(d2.max()))
    if omega == 0.0:
        raise DegenerateVocabularyError("all token embeddings are identical")
    return omega


def _bilipschitz_constants(matrix: np.ndarray) -> tuple[float, float]:
    matrix = np.asarray(matrix, dtype=float)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ValueError("encoder transform must be a square matrix")
    if not np.all(np.isfinite(matrix)):
        raise ValueError("encoder transform contains non-finite entries")
    sv = np.linalg.svd(matrix, compute_uv=False)
    if sv[-1] < SINGULARITY_TOL:
        raise SingularEncoderError(f"smallest singular value {sv[-1]:.3e} below tolerance")
    # |A u| lies in [sv_min |u|, sv_max |u|], hence
    # (1/sv_max) |g(u)-g(v)| <= |u-v| <= (1/sv_min) |g(u)-g(v)|
    return 1.0 / float(sv[0]), 1.0 / float(sv[-1])


@dataclass(frozen=True)
class EncoderG:
    """Full-rank linear encoding of the canonical space with cached
    two-sided distance constants c_a <= c_b."""

    transform: np.ndarray
    c_a: float = field(init=False)
    c_b: float = field(init=False)
    _inverse: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        t = np.array(self.transform, dtype=float)
        c_a, c_b = _bilipschitz_constants(t)
        inv = np.linalg.inv(t)
        t.setflags(write=False)
        inv.setflags(write=False)
        object.__setattr__(self, "transform", t)
        object.__setattr__(self, "c_a", c_a)
        object.__setattr__(self, "c_b", c_b)
        object.__setattr__(self, "_inverse", inv)

    @property
    def dim(self) -> int:
        return self.transform.shape[0]

    @classmethod
    def identity(cls, dim: int) -> "EncoderG":
        return cls(np.eye(dim))

    @classmethod
    def scaled(cls, dim: int, factor: float) -> "EncoderG":
        return cls(np.eye(dim) * float(factor))

    def encode(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=float) @ self.transform.T

    def decode(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=float) @ self._inverse.T

    def encode_table(self, table: EmbeddingTable) -> EmbeddingTable:
        return EmbeddingTable(self.encode(table.matrix), role="encoded")


def estimate_bilipschitz(enc: Union[EncoderG, np.ndarray]) -> tuple[float, float]:
    """(c_a, c_b) = (1/sigma_max, 1/sigma_min) of the encoder transform."""
    matrix = enc.transform if isinstance(enc, EncoderG) else enc
    return _bilipschitz_constants(matrix)


def load_embedding_file(
    path, *, normalize_diameter: bool = False
) -> tuple[Vocabulary, EmbeddingTable]:
    """Load `|V| M` header plus `token x1 .. xM` rows.

    With normalize_diameter the rows are rescaled so the token-space
    diameter is exactly 1, which keeps distortion extents <= 1.
    """
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty embedding file")
    header = lines[0].split()
    if len(header) != 2:
        raise ValueError(f"{path}: header must be '|V| M'")
    n, m = int(header[0]), int(header[1])
    rows = [ln for ln in lines[1:] if ln.strip()]
    if len(rows) != n:
        raise ValueError(f"{path}: expected {n} rows, found {len(rows)}")
    tokens: list[str] = []
    matrix = np.empty((n, m), dtype=float)
    for i, ln in enumerate(rows):
        parts = ln.split()
        if len(parts) != m + 1:
            raise ValueError(f"{path}: row {i} has {len(parts) - 1} coordinates, expected {m}")
        tokens.append(parts[0])
        matrix[i] = [float(x) for x in parts[1:]]
    if not np.all(np.isfinite(matrix)):
        raise ValueError(f"{path}: non-finite embedding entry")
    vocab = Vocabulary(tuple(tokens))
    table = EmbeddingTable(matrix)
    if normalize_diameter:
        table = EmbeddingTable(matrix / vocab_diameter(table))
    return vocab, table


def save_embedding_file(path, vocab: Vocabulary, table: EmbeddingTable) -> None:
    if len(vocab) != table.vocab_size:
        raise ValueError("vocabulary and table sizes differ")
    out = [f"{table.vocab_size} {table.dim}"]
    for tok, row in zip(vocab.tokens, table.matrix):
        out.append(tok + " " + " ".join(repr(float(x)) for x in row))
    Path(path).write_text("\n".join(out) + "\n")
