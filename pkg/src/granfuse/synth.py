"""Synthetic dataset generator with planted multi-granularity structure.

Every sentence has two clauses joined by "but".  The aspect noun lives in
the first clause together with an intensifier and an opinion word, both
drawn from the gold label's lexicon; the opinion word is dependency-linked
to the aspect noun.  The second clause carries a decoy noun with a single
opinion word from a different lexicon.  The label is therefore decodable
three ways:

  * counting lexicon tokens (two of the gold class vs one decoy) -- a
    majority-lexicon baseline scores 100% by construction;
  * following the dependency arc from the aspect to its opinion word;
  * masking to the aspect's clause via the constituency split at "but".

Knowledge vectors additionally carry each lexicon token's polarity and a
noisy polarity prior on the nouns, so the knowledge channel is informative
but deliberately imperfect.
"""

from __future__ import annotations

import json

import numpy as np

from .ingest import AspectInstance, instance_to_record, validate_instance

LEXICONS = {
    "positive": ["great", "excellent", "superb", "fantastic", "lovely", "delightfully"],
    "negative": ["terrible", "awful", "horrible", "dreadful", "lousy", "painfully"],
    "neutral": ["okay", "average", "ordinary", "plain", "unremarkable", "typically"],
}

LABELS = ("positive", "neutral", "negative")

PRIOR_FLIP = 0.12  # chance the knowledge prior on the aspect noun is wrong
KGE_WIDTH = 8


def _kge_vector(rng, polarity_slot=None, prior_slot=None) -> list:
    vec = rng.normal(0.0, 0.05, size=KGE_WIDTH)
    if polarity_slot is not None:
        vec[polarity_slot] += 1.5
    if prior_slot is not None:
        vec[3 + prior_slot] += 1.5
    return [round(float(x), 4) for x in vec]


def _clause_tree(parts) -> str:
    """One clause: uniform-depth chains leaf -> POS -> group -> wrapper -> clause."""
    groups = []
    for group in parts:
        inner = " ".join(f"({pos} {word})" for pos, word in group)
        label = {"DT": "NP", "VB": "VP", "RB": "ADJP", "JJ": "ADJP", ",": "PU", ".": "PU"}[
            group[0][0]
        ]
        groups.append(f"(X ({label} {inner}))")
    return "(S (C " + " ".join(groups) + "))"


def generate_instance(rng, label: str, vocab: int) -> AspectInstance:
    fillers = [f"w{i}" for i in range(max(vocab, 8))]
    decoy = str(rng.choice([l for l in LABELS if l != label]))
    noun_a, verb_a, noun_b, verb_b = (
        fillers[int(i)] for i in rng.choice(len(fillers), size=4, replace=False)
    )
    intensifier, opinion = (
        LEXICONS[label][int(i)] for i in rng.choice(len(LEXICONS[label]), size=2, replace=False)
    )
    decoy_opinion = LEXICONS[decoy][int(rng.integers(len(LEXICONS[decoy])))]
    use_filler_adverb = bool(rng.random() < 0.5)
    filler_adverb = fillers[int(rng.integers(len(fillers)))]

    tokens = ["the", noun_a, verb_a, intensifier, opinion, ",", "but",
              "the", noun_b, verb_b]
    # dependency heads, 1-based (0 = root): opinion attaches to the aspect noun
    heads = [2, 3, 0, 5, 2, 3, 10, 9, 10, 3]
    clause_b = [
        [("DT", "the"), ("NN", noun_b)],
        [("VB", verb_b)],
    ]
    if use_filler_adverb:
        tokens += [filler_adverb, decoy_opinion, "."]
        d = len(tokens) - 2  # decoy opinion position (0-based)
        heads += [d + 1, 9, 3]  # adverb -> decoy opinion, decoy opinion -> noun_b
        clause_b.append([("RB", filler_adverb), ("JJ", decoy_opinion)])
    else:
        tokens += [decoy_opinion, "."]
        heads += [9, 3]
        clause_b.append([("JJ", decoy_opinion)])
    clause_b.append([(".", ".")])

    clause_a = [
        [("DT", "the"), ("NN", noun_a)],
        [("VB", verb_a)],
        [("RB", intensifier), ("JJ", opinion)],
        [(",", ","), ("CC", "but")],
    ]
    tree = "(S " + _clause_tree(clause_a) + " " + _clause_tree(clause_b) + ")"

    label_idx = LABELS.index(label)
    decoy_idx = LABELS.index(decoy)
    prior_idx = label_idx
    if rng.random() < PRIOR_FLIP:
        prior_idx = int(rng.choice([i for i in range(3) if i != label_idx]))
    decoy_pos = len(tokens) - 2
    polarity_at = {3: label_idx, 4: label_idx, decoy_pos: decoy_idx}
    prior_at = {1: prior_idx, 8: decoy_idx}
    kge = [
        _kge_vector(rng, polarity_slot=polarity_at.get(pos), prior_slot=prior_at.get(pos))
        for pos in range(len(tokens))
    ]

    inst = AspectInstance(
        tokens=tokens,
        aspect_span=(1, 2),
        polarity=label,
        dep_heads=heads,
        con_tree=tree,
        knowledge_vectors=kge,
    )
    validate_instance(inst)
    return inst


def generate_dataset(count: int, vocab: int, seed: int) -> list:
    """Deterministic dataset with labels cycled for near-balance."""
    if count <= 0 or vocab <= 0:
        raise ValueError("count and vocab must be positive")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5E17]))
    return [generate_instance(rng, LABELS[i % 3], vocab) for i in range(count)]


def dataset_to_jsonl(instances) -> str:
    return "".join(
        json.dumps(instance_to_record(inst), separators=(", ", ": ")) + "\n"
        for inst in instances
    )


def write_dataset(path, count: int, vocab: int, seed: int) -> list:
    instances = generate_dataset(count, vocab, seed)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dataset_to_jsonl(instances))
    return instances


def majority_lexicon_label(tokens) -> str:
    """The bag-of-lexicon baseline: most frequent lexicon class wins."""
    counts = {label: sum(tok in LEXICONS[label] for tok in tokens) for label in LABELS}
    return max(LABELS, key=lambda label: counts[label])
