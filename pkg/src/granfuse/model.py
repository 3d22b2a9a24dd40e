"""The assembled classifier: four granularity channels, triplet preprocessing,
orthogonal purification, fusion cascade and the softmax head.

Per-instance constants (embeddings, normalized adjacencies, pos/neg label
cache, knowledge bases) are computed once by :meth:`Model.prepare` and
reused across epochs; only tensor operations run inside the training loop.
"""

from __future__ import annotations

import base64
import io
import json
from dataclasses import dataclass

import numpy as np

from . import encoders as E
from . import fusion as F
from . import preprocess as P
from . import tensor as T
from .config import TrainConfig, config_from_dict
from .ingest import AspectInstance, DataError, build_dep_adj, build_con_stack, parse_bracketed
from .tensor import Tensor


@dataclass
class PreparedInstance:
    """Cached per-instance constants for repeated forward passes."""

    instance: AspectInstance
    embed_base: np.ndarray
    aspect_col: np.ndarray
    dep_norm: np.ndarray
    con_norm: list
    sem_needed: bool
    graph: P.DualViewGraph
    label_cache: dict
    kge_base: np.ndarray
    gold: int


@dataclass
class ForwardResult:
    probs: Tensor  # (1, 3)
    class_loss: Tensor  # scalar
    triplet: Tensor | None  # scalar or None when either syntactic view is off


class Model:
    """All trainable parameters plus the forward computation."""

    def __init__(self, config: TrainConfig, table: dict | None = None):
        self.config = config
        rng = np.random.default_rng(config.seed)
        dim = config.dim
        df = config.effective_factor_dim
        self.provider = E.EmbeddingProvider(dim, seed=config.embed_seed, table=table)
        self.marker = Tensor(
            rng.normal(size=(1, dim)) / np.sqrt(dim), requires_grad=True, name="embed.marker"
        )
        self.attn = E.init_attention(dim, config.heads, rng, prefix="attn")
        self.gcn = {
            "dep": E.init_gcn_stack("dep", config.dep_layers, dim, rng, "gcn.dep"),
            "con": E.init_gcn_stack("con", config.con_layers, dim, rng, "gcn.con"),
            "sem": E.init_gcn_stack("sem", config.sem_layers, dim, rng, "gcn.sem"),
        }
        self.kge = E.init_knowledge(config.kge_dim, dim, rng, prefix="kge")
        self.blocks = F.init_fusion_blocks(config.channels, config.blocks, dim, df, rng)
        limit = np.sqrt(6.0 / (df + 3))
        self.clf_w = Tensor(rng.uniform(-limit, limit, size=(df, 3)), requires_grad=True,
                            name="clf.W")
        self.clf_b = Tensor(np.zeros(3), requires_grad=True, name="clf.b")

    # -- parameters ---------------------------------------------------------

    def parameters(self) -> list:
        params = [self.marker]
        for wq, wk in self.attn.heads:
            params.extend([wq, wk])
        for kind in ("dep", "con", "sem"):
            for w, b in self.gcn[kind].layers:
                params.extend([w, b])
        params.extend([self.kge.w, self.kge.b])
        for block in self.blocks:
            for name in F.CHANNEL_ORDER:
                if name in block.channel_maps:
                    params.append(block.channel_maps[name])
            params.extend([block.state_map, block.gain, block.bias])
        params.extend([self.clf_w, self.clf_b])
        return params

    def param_groups(self) -> dict:
        """Parameters keyed by module-level group name, for diagnostics."""
        groups: dict = {}
        for p in self.parameters():
            parts = p.name.split(".")
            key = ".".join(parts[:2]) if parts[0] == "gcn" else parts[0]
            groups.setdefault(key, []).append(p)
        return groups

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    # -- preparation --------------------------------------------------------

    @property
    def triplet_active(self) -> bool:
        return "dep" in self.config.channels and "con" in self.config.channels

    def prepare(self, instance: AspectInstance) -> PreparedInstance:
        cfg = self.config
        n = instance.n
        base = self.provider.vectors(instance.tokens)
        col = np.zeros((n, 1))
        s, e = instance.aspect_span
        col[s:e, 0] = 1.0
        dep_adj = build_dep_adj(instance)
        tree = parse_bracketed(instance.con_tree, tokens=instance.tokens)
        stack = build_con_stack(tree, cfg.con_layers, n)
        graph = P.DualViewGraph(con_adj=stack.finest, dep_adj=dep_adj)
        return PreparedInstance(
            instance=instance,
            embed_base=base,
            aspect_col=col,
            dep_norm=E.row_normalize(dep_adj),
            con_norm=[E.row_normalize(stack.adj[m]) for m in range(cfg.con_layers)],
            sem_needed="sem" in cfg.channels,
            graph=graph,
            label_cache={},
            kge_base=E.knowledge_base(instance, cfg.kge_dim, cfg.embed_seed),
            gold=instance.label_index,
        )

    # -- forward ------------------------------------------------------------

    def forward(self, prep: PreparedInstance, train: bool = False,
                rng: np.random.Generator | None = None) -> ForwardResult:
        cfg = self.config
        h_ctx = T.add(Tensor(prep.embed_base), T.matmul(Tensor(prep.aspect_col), self.marker))
        if train and cfg.dropout > 0:
            if rng is None:
                raise ValueError("training forward needs an rng for dropout")
            h_ctx = T.dropout(h_ctx, cfg.dropout, rng)
        a_sem = E.attention_matrix(h_ctx, self.attn)

        need_dep = "dep" in cfg.channels
        need_con = "con" in cfg.channels
        h_dep_raw = E.gcn_forward(h_ctx, prep.dep_norm, self.gcn["dep"]) if need_dep else None
        h_con_raw = E.gcn_forward(h_ctx, prep.con_norm, self.gcn["con"]) if need_con else None
        h_sem = E.gcn_forward(h_ctx, a_sem, self.gcn["sem"]) if prep.sem_needed else None

        triplet = None
        if need_dep and need_con:
            anchors = P.select_anchors(a_sem.data, cfg.anchor_c)
            triplets = P.build_triplet_set(
                prep.graph, anchors, cfg.margin, cache=prep.label_cache
            )
            triplet = P.triplet_loss(h_con_raw, h_dep_raw, triplets)

        channels = {}
        if need_dep:
            channels["dep"] = P.purify(h_dep_raw, h_sem) if h_sem is not None else h_dep_raw
        if need_con:
            channels["con"] = P.purify(h_con_raw, h_sem) if h_sem is not None else h_con_raw
        if h_sem is not None:
            channels["sem"] = h_sem
        if "kge" in cfg.channels:
            channels["kge"] = E.knowledge_channel(prep.kge_base, self.kge)

        fused = F.run_cascade(self.blocks, channels, prep.instance.aspect_span)
        logits = T.add_rowvec(T.matmul(fused.r, self.clf_w), self.clf_b)
        probs = T.softmax_rows(logits)
        class_loss = T.neg(T.log(T.clip_min(T.pick(probs, 0, prep.gold), 1e-12)))
        return ForwardResult(probs=probs, class_loss=class_loss, triplet=triplet)

    def batch_loss(self, preps, train: bool = False,
                   rng: np.random.Generator | None = None):
        """Mean class loss plus beta times the mean triplet loss.

        Returns (total, class_mean, triplet_mean) tensors so callers can log
        the exact decomposition.
        """
        if not preps:
            raise ValueError("empty batch")
        lc_sum = None
        lt_sum = None
        for prep in preps:
            result = self.forward(prep, train=train, rng=rng)
            lc_sum = result.class_loss if lc_sum is None else T.add(lc_sum, result.class_loss)
            if result.triplet is not None:
                lt_sum = result.triplet if lt_sum is None else T.add(lt_sum, result.triplet)
        inv = 1.0 / len(preps)
        lc_mean = T.scale(lc_sum, inv)
        lt_mean = T.scale(lt_sum, inv) if lt_sum is not None else Tensor(0.0)
        total = T.add(lc_mean, T.scale(lt_mean, self.config.beta))
        return total, lc_mean, lt_mean

    def predict(self, prep: PreparedInstance) -> int:
        return int(np.argmax(self.forward(prep, train=False).probs.data[0]))

    def attention_values(self, prep: PreparedInstance) -> np.ndarray:
        """Semantic attention matrix for inspection (eval mode, no tape)."""
        h_ctx = T.add(Tensor(prep.embed_base), T.matmul(Tensor(prep.aspect_col), self.marker))
        return E.attention_matrix(h_ctx, self.attn).data

    # -- serialization ------------------------------------------------------

    def state_dict(self) -> dict:
        return {p.name: p.data.copy() for p in self.parameters()}

    def load_state(self, state: dict) -> None:
        for p in self.parameters():
            if p.name not in state:
                raise DataError(f"checkpoint is missing parameter {p.name!r}")
            value = np.asarray(state[p.name], dtype=np.float64)
            if value.shape != p.data.shape:
                raise DataError(
                    f"checkpoint parameter {p.name!r} has shape {value.shape}, "
                    f"expected {p.data.shape}"
                )
            p.data = value.copy()


CHECKPOINT_MAGIC = "granfuse-checkpoint"
CHECKPOINT_VERSION = 1


def classify(r: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Softmax(W r + b) for a pooled representation, as plain arrays."""
    logits = np.asarray(r).reshape(1, -1) @ np.asarray(w) + np.asarray(b)
    return T.softmax_rows(Tensor(logits)).data[0]


def dump_checkpoint(model: Model) -> str:
    """Versioned text serialization: config header plus shape-tagged tensors."""
    out = io.StringIO()
    out.write(f"{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION}\n")
    out.write("config " + json.dumps(model.config.to_dict(), sort_keys=True) + "\n")
    for name, value in model.state_dict().items():
        dims = " ".join(str(d) for d in value.shape)
        out.write(f"tensor {name} {value.ndim} {dims}\n")
        flat = value.reshape(-1)
        out.write(" ".join(repr(float(x)) for x in flat) + "\n")
    out.write("end\n")
    return out.getvalue()


def parse_checkpoint(text: str):
    """Inverse of dump_checkpoint; returns (config, state dict)."""
    lines = text.splitlines()
    if not lines or not lines[0].startswith(CHECKPOINT_MAGIC):
        raise DataError("not a granfuse checkpoint")
    version = lines[0].split("v")[-1]
    if version != str(CHECKPOINT_VERSION):
        raise DataError(f"unsupported checkpoint version {version!r}")
    if len(lines) < 2 or not lines[1].startswith("config "):
        raise DataError("checkpoint missing config header")
    config = config_from_dict(json.loads(lines[1][len("config "):]))
    state = {}
    i = 2
    while i < len(lines) and lines[i] != "end":
        header = lines[i].split()
        if header[0] != "tensor" or len(header) < 3:
            raise DataError(f"bad checkpoint tensor header: {lines[i]!r}")
        name = header[1]
        ndim = int(header[2])
        shape = tuple(int(x) for x in header[3 : 3 + ndim])
        values = np.array([float(x) for x in lines[i + 1].split()])
        expected = int(np.prod(shape)) if shape else 1
        if values.size != expected:
            raise DataError(f"checkpoint tensor {name!r} has wrong element count")
        state[name] = values.reshape(shape)
        i += 2
    if i >= len(lines) or lines[i] != "end":
        raise DataError("checkpoint truncated: missing end marker")
    return config, state


def save_checkpoint(path, model: Model) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dump_checkpoint(model))


def load_checkpoint(path) -> Model:
    with open(path, "r", encoding="utf-8") as fh:
        return model_from_checkpoint(fh.read())


def model_from_checkpoint(text: str) -> Model:
    config, state = parse_checkpoint(text)
    model = Model(config)
    model.load_state(state)
    return model


def checkpoint_to_b64(model: Model) -> str:
    return base64.b64encode(dump_checkpoint(model).encode("utf-8")).decode("ascii")


def model_from_b64(b64: str) -> Model:
    try:
        text = base64.b64decode(b64.encode("ascii")).decode("utf-8")
    except Exception:
        raise DataError("checkpoint payload is not valid base64")
    return model_from_checkpoint(text)
