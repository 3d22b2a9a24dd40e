"""Dataset ingestion: aspect instances with their dependency and constituency parses.

Input is line-delimited JSON.  Each record carries::

    tokens     list of word strings
    aspect     [start, end) token indices of the aspect term
    polarity   positive | neutral | negative
    dep_heads  per-token head index, 1-based, 0 = root
    con_tree   bracketed constituency string over the same tokens
    kge        optional per-token knowledge vectors

Adjacency construction follows two conventions that the rest of the model
relies on: dependency arcs are undirected and self-loops are always added,
and constituency slices are taken bottom-up at alternating tree levels.
"""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

POLARITIES = ("positive", "neutral", "negative")


class DataError(ValueError):
    """Malformed record, invalid parse tree, or inconsistent fields."""


@dataclass
class AspectInstance:
    """One sentence, one aspect span, its gold polarity and both parses."""

    tokens: list
    aspect_span: tuple
    polarity: str
    dep_heads: list
    con_tree: str
    knowledge_vectors: list | None = None

    @property
    def n(self) -> int:
        return len(self.tokens)

    @property
    def label_index(self) -> int:
        return POLARITIES.index(self.polarity)


# ---------------------------------------------------------------------------
# validation and loading
# ---------------------------------------------------------------------------


def validate_dep_heads(heads, n: int) -> None:
    """Heads must describe a single-rooted tree: one root, no cycles."""
    if len(heads) != n:
        raise DataError(f"dep_heads length {len(heads)} != {n} tokens")
    roots = [i for i, h in enumerate(heads) if h == 0]
    if len(roots) != 1:
        raise DataError(f"dep_heads must have exactly one root, found {len(roots)}")
    for i, h in enumerate(heads):
        if not (0 <= h <= n):
            raise DataError(f"dep_heads[{i}] = {h} out of range 0..{n}")
        if h == i + 1:
            raise DataError(f"dep_heads[{i}] points at itself")
    for start in range(n):
        seen = set()
        node = start
        while heads[node] != 0:
            if node in seen:
                raise DataError(f"dep_heads contains a cycle through token {start}")
            seen.add(node)
            node = heads[node] - 1


def validate_instance(inst: AspectInstance) -> None:
    n = inst.n
    if n == 0:
        raise DataError("instance has no tokens")
    s, e = inst.aspect_span
    if not (0 <= s < e <= n):
        raise DataError(f"aspect span [{s}, {e}) invalid for {n} tokens")
    if inst.polarity not in POLARITIES:
        raise DataError(f"unknown polarity {inst.polarity!r}")
    validate_dep_heads(inst.dep_heads, n)
    parse_bracketed(inst.con_tree, tokens=inst.tokens)
    if inst.knowledge_vectors is not None:
        if len(inst.knowledge_vectors) != n:
            raise DataError(f"kge has {len(inst.knowledge_vectors)} rows for {n} tokens")
        widths = {len(v) for v in inst.knowledge_vectors}
        if len(widths) != 1:
            raise DataError(f"kge vector width inconsistent across tokens: {sorted(widths)}")


def instance_from_record(record: dict) -> AspectInstance:
    try:
        tokens = list(record["tokens"])
        aspect = record["aspect"]
        polarity = str(record["polarity"]).lower()
        dep_heads = [int(h) for h in record["dep_heads"]]
        con_tree = record["con_tree"]
    except KeyError as exc:
        raise DataError(f"missing field {exc.args[0]!r}") from None
    kge = record.get("kge")
    inst = AspectInstance(
        tokens=[str(t) for t in tokens],
        aspect_span=(int(aspect[0]), int(aspect[1])),
        polarity=polarity,
        dep_heads=dep_heads,
        con_tree=str(con_tree),
        knowledge_vectors=[[float(x) for x in row] for row in kge] if kge is not None else None,
    )
    validate_instance(inst)
    return inst


def load_records(lines) -> list:
    """Parse and validate an iterable of JSONL lines; errors carry line numbers."""
    instances = []
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"line {lineno}: not valid JSON ({exc.msg})") from None
        try:
            instances.append(instance_from_record(record))
        except DataError as exc:
            raise DataError(f"line {lineno}: {exc}") from None
    return instances


def load_dataset(path) -> list:
    """Load and validate a JSONL dataset file, logging aggregate label counts."""
    with open(path, "r", encoding="utf-8") as fh:
        instances = load_records(fh)
    if not instances:
        logger.warning("dataset %s is empty", path)
    counts = label_counts(instances)
    logger.info(
        "loaded %d instances from %s (%s)",
        len(instances),
        path,
        ", ".join(f"{k}={counts[k]}" for k in POLARITIES),
    )
    return instances


def label_counts(instances) -> Counter:
    counts = Counter({p: 0 for p in POLARITIES})
    counts.update(inst.polarity for inst in instances)
    return counts


def instance_to_record(inst: AspectInstance) -> dict:
    record = {
        "tokens": inst.tokens,
        "aspect": list(inst.aspect_span),
        "polarity": inst.polarity,
        "dep_heads": inst.dep_heads,
        "con_tree": inst.con_tree,
    }
    if inst.knowledge_vectors is not None:
        record["kge"] = inst.knowledge_vectors
    return record


# ---------------------------------------------------------------------------
# dependency adjacency
# ---------------------------------------------------------------------------


def build_dep_adj(inst: AspectInstance) -> np.ndarray:
    """Symmetric dependency adjacency with self-loops.

    Arcs are undirected; for a valid tree the result has exactly
    2*(n-1) off-diagonal ones.
    """
    n = inst.n
    adj = np.eye(n)
    for i, h in enumerate(inst.dep_heads):
        if h != 0:
            adj[i, h - 1] = 1.0
            adj[h - 1, i] = 1.0
    return adj


# ---------------------------------------------------------------------------
# bracketed constituency trees
# ---------------------------------------------------------------------------


@dataclass
class ConLeaf:
    index: int
    word: str


@dataclass
class ConNode:
    label: str
    children: list = field(default_factory=list)


def _tokenize_brackets(text: str):
    buf = []
    for ch in text:
        if ch in "()":
            if buf:
                yield "".join(buf)
                buf.clear()
            yield ch
        elif ch.isspace():
            if buf:
                yield "".join(buf)
                buf.clear()
        else:
            buf.append(ch)
    if buf:
        yield "".join(buf)


def parse_bracketed(text: str, tokens=None) -> ConNode:
    """Parse a PTB-style bracketed tree into labeled nodes with indexed leaves.

    Leaves are numbered left to right.  When ``tokens`` is given the leaf
    words are checked against it and the first divergent position is
    reported.
    """
    toks = list(_tokenize_brackets(text))
    pos = 0
    leaf_count = 0

    def parse_node():
        nonlocal pos, leaf_count
        pos += 1  # consume '('
        if pos >= len(toks) or toks[pos] in "()":
            raise DataError("node missing label after '('")
        node = ConNode(label=toks[pos])
        pos += 1
        while pos < len(toks) and toks[pos] != ")":
            if toks[pos] == "(":
                node.children.append(parse_node())
            else:
                node.children.append(ConLeaf(index=leaf_count, word=toks[pos]))
                leaf_count += 1
                pos += 1
        if pos >= len(toks):
            raise DataError("unbalanced brackets: missing ')'")
        pos += 1  # consume ')'
        return node

    if not toks or toks[0] != "(":
        raise DataError("tree must start with '('")
    root = parse_node()
    if pos != len(toks):
        raise DataError("unbalanced brackets: content after the root node closes")
    if tokens is not None:
        words = [leaf.word for leaf in iter_leaves(root)]
        for i, (a, b) in enumerate(zip(words, tokens)):
            if a != b:
                raise DataError(f"tree leaf {i} is {a!r} but token is {b!r}")
        if len(words) != len(tokens):
            raise DataError(f"tree has {len(words)} leaves for {len(tokens)} tokens")
    return root


def iter_leaves(node):
    if isinstance(node, ConLeaf):
        yield node
        return
    for child in node.children:
        yield from iter_leaves(child)


def format_tree(node) -> str:
    """Print a parsed tree back to bracketed text (round-trips through parse)."""
    if isinstance(node, ConLeaf):
        return node.word
    inner = " ".join(format_tree(c) for c in node.children)
    return f"({node.label} {inner})"


def tree_equal(a, b) -> bool:
    if isinstance(a, ConLeaf) and isinstance(b, ConLeaf):
        return a.index == b.index and a.word == b.word
    if isinstance(a, ConNode) and isinstance(b, ConNode):
        return (
            a.label == b.label
            and len(a.children) == len(b.children)
            and all(tree_equal(x, y) for x, y in zip(a.children, b.children))
        )
    return False


# ---------------------------------------------------------------------------
# layered constituent adjacency
# ---------------------------------------------------------------------------


@dataclass
class ConGraphStack:
    """Per-level phrase co-membership matrices, ordered bottom-up.

    ``adj[m][i][j] = 1`` iff tokens i and j sit in the same phrase at the
    m-th selected level.  Every slice is a partition (equivalence-relation)
    matrix, and deeper slices refine shallower ones.
    """

    adj: np.ndarray  # (l_c, n, n)
    levels: list

    @property
    def finest(self) -> np.ndarray:
        return self.adj[0]


def _ancestor_chains(root: ConNode, n: int):
    """For each token, the chain of ancestor node ids from parent to root."""
    chains = [None] * n
    counter = [0]
    ids = {}

    def walk(node, path):
        if isinstance(node, ConLeaf):
            chains[node.index] = list(reversed(path))
            return
        if id(node) not in ids:
            ids[id(node)] = counter[0]
            counter[0] += 1
        path.append(ids[id(node)])
        for child in node.children:
            walk(child, path)
        path.pop()

    walk(root, [])
    if any(c is None for c in chains):
        raise DataError(f"tree has fewer leaves than {n} tokens")
    return chains


def slices_for_levels(root: ConNode, levels, n: int) -> np.ndarray:
    """Phrase co-membership matrices at explicit levels (1 = leaves' parents).

    A token shallower than the requested level clamps to the root, so any
    level at or beyond the tree depth yields the all-ones slice.
    """
    chains = _ancestor_chains(root, n)
    out = np.zeros((len(levels), n, n))
    for m, level in enumerate(levels):
        owner = [chain[min(level - 1, len(chain) - 1)] for chain in chains]
        for i in range(n):
            for j in range(n):
                if owner[i] == owner[j]:
                    out[m, i, j] = 1.0
    return out


def alternating_levels(l_c: int) -> list:
    """Bottom-up level selection: leaves' parents first, then every other level."""
    return [2 * m + 1 for m in range(l_c)]


def build_con_stack(root: ConNode, l_c: int, n: int) -> ConGraphStack:
    """Select l_c alternating tree levels, bottom-up, and build their slices."""
    if l_c < 1:
        raise DataError(f"l_c must be >= 1, got {l_c}")
    levels = alternating_levels(l_c)
    return ConGraphStack(adj=slices_for_levels(root, levels, n), levels=levels)
