"""Granularity feature channels: token embeddings, graph convolutions,
attention scores and the external-knowledge projection.

The contextual encoder is deliberately lightweight: frozen hashed-random
embeddings (or an optional lookup table) plus a trainable marker vector
added to the aspect rows.  Everything downstream of the embeddings is
trainable through the tape.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .ingest import AspectInstance, DataError
from .tensor import Tensor

logger = logging.getLogger(__name__)


def hashed_vector(token: str, dim: int, seed: int) -> np.ndarray:
    """Deterministic pseudo-random unit-scale vector keyed by token string.

    Uses md5 rather than Python's randomized hash() so that embeddings are
    stable across processes.
    """
    digest = hashlib.md5(f"{seed}|{token}".encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    return rng.standard_normal(dim) / np.sqrt(dim)


def load_embedding_table(path) -> dict:
    """Read a token -> vector table: one token and its floats per line."""
    table = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            token, values = parts[0], parts[1:]
            try:
                table[token] = np.array([float(x) for x in values])
            except ValueError:
                raise DataError(f"embedding table line {lineno}: non-numeric value")
    return table


class EmbeddingProvider:
    """Deterministic per-token embeddings, hashed-random or file-backed."""

    def __init__(self, dim: int, seed: int = 0, table: dict | None = None):
        self.dim = dim
        self.seed = seed
        self.table = table
        self._warned: set = set()

    def vector(self, token: str) -> np.ndarray:
        if self.table is not None:
            vec = self.table.get(token)
            if vec is not None:
                if vec.shape[0] != self.dim:
                    raise DataError(
                        f"embedding for {token!r} has width {vec.shape[0]}, expected {self.dim}"
                    )
                return vec
            if token not in self._warned:
                self._warned.add(token)
                logger.warning("token %r missing from embedding table, using hashed vector", token)
        return hashed_vector(token, self.dim, self.seed)

    def vectors(self, tokens) -> np.ndarray:
        return np.stack([self.vector(t) for t in tokens])


def encode_tokens(instance: AspectInstance, provider: EmbeddingProvider, marker: Tensor) -> Tensor:
    """Context matrix H: frozen embeddings plus the trainable aspect marker.

    The marker is added to every row inside the aspect span, conditioning
    the representation on which span is being classified.
    """
    base = Tensor(provider.vectors(instance.tokens))
    s, e = instance.aspect_span
    indicator = np.zeros((instance.n, 1))
    indicator[s:e, 0] = 1.0
    return T.add(base, T.matmul(Tensor(indicator), marker))


# ---------------------------------------------------------------------------
# graph convolution
# ---------------------------------------------------------------------------


def row_normalize(adj: np.ndarray) -> np.ndarray:
    """Divide each adjacency row by its degree (rows are never empty here)."""
    deg = adj.sum(axis=1, keepdims=True)
    return adj / np.maximum(deg, 1.0)


@dataclass
class GcnStack:
    kind: str  # dep | con | sem
    layers: list  # [(W, b), ...]


def init_gcn_stack(kind: str, n_layers: int, dim: int, rng, prefix: str) -> GcnStack:
    layers = []
    limit = np.sqrt(6.0 / (dim + dim))
    for l in range(n_layers):
        w = Tensor(rng.uniform(-limit, limit, size=(dim, dim)), requires_grad=True,
                   name=f"{prefix}.layer{l}.W")
        b = Tensor(np.zeros(dim), requires_grad=True, name=f"{prefix}.layer{l}.b")
        layers.append((w, b))
    return GcnStack(kind=kind, layers=layers)


def gcn_forward(h: Tensor, adj, stack: GcnStack) -> Tensor:
    """Stacked h <- relu(A_hat (h W) + b).

    ``adj`` is a degree-normalized constant matrix (dep), a list of
    per-layer constant slices (con, bottom-up), or a Tensor used at every
    layer (sem, whose rows are already a probability distribution).
    """
    if isinstance(adj, list):
        if len(adj) != len(stack.layers):
            raise DataError(
                f"{stack.kind} stack has {len(stack.layers)} layers "
                f"but {len(adj)} adjacency slices"
            )
        adjs = [Tensor(a) for a in adj]
    elif isinstance(adj, Tensor):
        adjs = [adj] * len(stack.layers)
    else:
        a = Tensor(np.asarray(adj))
        adjs = [a] * len(stack.layers)
    out = h
    for (w, b), a in zip(stack.layers, adjs):
        out = T.relu(T.add_rowvec(T.matmul(a, T.matmul(out, w)), b))
    return out


# ---------------------------------------------------------------------------
# semantic attention
# ---------------------------------------------------------------------------


@dataclass
class AttentionParams:
    heads: list  # [(Wq, Wk), ...]
    head_dim: int


def init_attention(dim: int, n_heads: int, rng, prefix: str = "attn") -> AttentionParams:
    if dim % n_heads != 0:
        raise ValueError(f"heads ({n_heads}) must divide embedding dim ({dim})")
    head_dim = dim // n_heads
    limit = np.sqrt(6.0 / (dim + head_dim))
    heads = []
    for hidx in range(n_heads):
        wq = Tensor(rng.uniform(-limit, limit, size=(dim, head_dim)), requires_grad=True,
                    name=f"{prefix}.head{hidx}.Wq")
        wk = Tensor(rng.uniform(-limit, limit, size=(dim, head_dim)), requires_grad=True,
                    name=f"{prefix}.head{hidx}.Wk")
        heads.append((wq, wk))
    return AttentionParams(heads=heads, head_dim=head_dim)


def attention_matrix(h: Tensor, params: AttentionParams) -> Tensor:
    """Per-head scaled dot-product scores, averaged, then row softmax.

    Every row of the result sums to 1; it doubles as the semantic GCN
    adjacency and as the anchor-scoring matrix.
    """
    inv = 1.0 / np.sqrt(params.head_dim)
    total = None
    for wq, wk in params.heads:
        q = T.matmul(h, wq)
        k = T.matmul(h, wk)
        s = T.scale(T.matmul(q, T.transpose(k)), inv)
        total = s if total is None else T.add(total, s)
    avg = T.scale(total, 1.0 / len(params.heads))
    return T.softmax_rows(avg)


# ---------------------------------------------------------------------------
# external knowledge channel
# ---------------------------------------------------------------------------


@dataclass
class KnowledgeParams:
    w: Tensor  # (kge_dim, dim)
    b: Tensor  # (dim,)

    @property
    def kge_dim(self) -> int:
        return self.w.shape[0]


def init_knowledge(kge_dim: int, dim: int, rng, prefix: str = "kge") -> KnowledgeParams:
    limit = np.sqrt(6.0 / (kge_dim + dim))
    w = Tensor(rng.uniform(-limit, limit, size=(kge_dim, dim)), requires_grad=True,
               name=f"{prefix}.W")
    b = Tensor(np.zeros(dim), requires_grad=True, name=f"{prefix}.b")
    return KnowledgeParams(w=w, b=b)


def knowledge_base(instance: AspectInstance, kge_dim: int, seed: int) -> np.ndarray:
    """Raw knowledge vectors for an instance, or hashed per-token defaults.

    Defaults are keyed by token string so identical tokens get identical
    rows across instances.
    """
    if instance.knowledge_vectors is not None:
        base = np.asarray(instance.knowledge_vectors, dtype=np.float64)
        if base.shape[1] != kge_dim:
            raise DataError(
                f"knowledge vectors have width {base.shape[1]}, configured width is {kge_dim}"
            )
        return base
    return np.stack([hashed_vector(t, kge_dim, seed ^ 0x6B6765) for t in instance.tokens])


def knowledge_channel(base: np.ndarray, params: KnowledgeParams) -> Tensor:
    """Project raw knowledge vectors to the channel width d."""
    return T.add_rowvec(T.matmul(Tensor(base), params.w), params.b)
