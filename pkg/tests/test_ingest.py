"""Ingestion tests: record validation, adjacency construction, tree parsing."""

import json
import logging

import numpy as np
import pytest

from granfuse import ingest
from granfuse.ingest import (
    AspectInstance,
    ConGraphStack,
    DataError,
    alternating_levels,
    build_con_stack,
    build_dep_adj,
    format_tree,
    instance_from_record,
    iter_leaves,
    load_dataset,
    load_records,
    parse_bracketed,
    slices_for_levels,
    tree_equal,
)

# The running example: two clauses joined at "but", ten tokens total.
# Every leaf sits at uniform depth (POS -> phrase -> clause -> root), so the
# bottom-up levels are: 1 = one token per POS, 3 = the two clauses, 5 = root.
EXAMPLE_TOKENS = ["Looks", "nice", ",", "but", "has", "a", "horribly", "cheap", "feel", "."]
EXAMPLE_TREE = (
    "(S"
    " (S (NP (NNS Looks)) (ADJP (JJ nice)) (PU (, ,)) (CO (CC but)))"
    " (S (VP (VBZ has)) (NP (DT a)) (ADVP (RB horribly)) (ADJP (JJ cheap))"
    " (NP (NN feel)) (PU (. .))))"
)


def make_record(**overrides):
    record = {
        "tokens": ["Looks", "nice"],
        "aspect": [0, 1],
        "polarity": "positive",
        "dep_heads": [0, 1],
        "con_tree": "(S (NP Looks) (VP nice))",
    }
    record.update(overrides)
    return record


class TestLoading:
    def test_two_token_record(self):
        inst = instance_from_record(make_record())
        assert inst.n == 2
        assert inst.aspect_span == (0, 1)
        assert inst.polarity == "positive"

    def test_polarity_case_normalized(self):
        inst = instance_from_record(make_record(polarity="Positive"))
        assert inst.polarity == "positive"

    def test_dep_cycle_rejected_with_line_number(self):
        cyclic = make_record(
            tokens=["a", "b", "c", "d"],
            dep_heads=[0, 3, 4, 2],  # root a; b -> c -> d -> b
            con_tree="(S a b c d)",
        )
        lines = [json.dumps(make_record()), json.dumps(cyclic)]
        with pytest.raises(DataError, match="line 2.*cycle"):
            load_records(lines)

    def test_two_roots_rejected(self):
        with pytest.raises(DataError, match="exactly one root"):
            instance_from_record(make_record(dep_heads=[0, 0]))

    def test_empty_file_warns_and_returns_empty(self, tmp_path, caplog):
        p = tmp_path / "empty.jsonl"
        p.write_text("")
        with caplog.at_level(logging.WARNING):
            assert load_dataset(p) == []
        assert any("empty" in r.message for r in caplog.records)

    def test_bad_json_reports_line(self, tmp_path):
        p = tmp_path / "bad.jsonl"
        p.write_text(json.dumps(make_record()) + "\n{not json\n")
        with pytest.raises(DataError, match="line 2"):
            load_dataset(p)

    def test_aspect_span_bounds(self):
        with pytest.raises(DataError, match="aspect span"):
            instance_from_record(make_record(aspect=[1, 1]))
        with pytest.raises(DataError, match="aspect span"):
            instance_from_record(make_record(aspect=[0, 3]))

    def test_inconsistent_kge_width(self):
        with pytest.raises(DataError, match="width"):
            instance_from_record(make_record(kge=[[1.0, 2.0], [1.0]]))

    def test_round_trip_record(self):
        record = make_record(kge=[[0.5, 1.5], [2.5, 3.5]])
        inst = instance_from_record(record)
        assert ingest.instance_to_record(inst) == {
            "tokens": record["tokens"],
            "aspect": record["aspect"],
            "polarity": "positive",
            "dep_heads": record["dep_heads"],
            "con_tree": record["con_tree"],
            "kge": record["kge"],
        }


class TestDepAdjacency:
    def test_two_tokens_single_arc(self):
        inst = instance_from_record(make_record())
        np.testing.assert_array_equal(build_dep_adj(inst), np.ones((2, 2)))

    def test_single_token(self):
        inst = AspectInstance(["ok"], (0, 1), "neutral", [0], "(S ok)")
        np.testing.assert_array_equal(build_dep_adj(inst), np.ones((1, 1)))

    def test_four_token_chain_is_tridiagonal(self):
        inst = AspectInstance(
            ["a", "b", "c", "d"], (0, 1), "neutral", [0, 1, 2, 3], "(S a b c d)"
        )
        adj = build_dep_adj(inst)
        expected = np.eye(4) + np.diag(np.ones(3), 1) + np.diag(np.ones(3), -1)
        np.testing.assert_array_equal(adj, expected)

    def test_tree_edge_count(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            n = int(rng.integers(2, 12))
            heads = random_heads(rng, n)
            inst = AspectInstance(
                [f"w{i}" for i in range(n)], (0, 1), "neutral", heads,
                "(S " + " ".join(f"w{i}" for i in range(n)) + ")",
            )
            adj = build_dep_adj(inst)
            np.testing.assert_array_equal(adj, adj.T)
            np.testing.assert_array_equal(np.diag(adj), np.ones(n))
            assert adj.sum() - n == 2 * (n - 1)
            assert (adj.sum(axis=1) >= 1).all()


def random_heads(rng, n):
    """A random single-rooted tree in 1-based head encoding."""
    order = rng.permutation(n)
    heads = [0] * n
    for pos in range(1, n):
        parent = order[rng.integers(0, pos)]
        heads[order[pos]] = int(parent) + 1
    return heads


class TestBracketedParsing:
    def test_two_leaf_tree(self):
        root = parse_bracketed("(S (NP Looks) (VP nice))")
        assert root.label == "S"
        assert [c.label for c in root.children] == ["NP", "VP"]
        leaves = list(iter_leaves(root))
        assert [(l.index, l.word) for l in leaves] == [(0, "Looks"), (1, "nice")]

    def test_unbalanced_rejected(self):
        with pytest.raises(DataError, match="unbalanced"):
            parse_bracketed("(S (NP (NP Looks) (VP nice))")

    def test_trailing_content_rejected(self):
        with pytest.raises(DataError, match="unbalanced"):
            parse_bracketed("(S (NP Looks)) (VP nice)")

    def test_leaf_token_mismatch_reports_first_position(self):
        with pytest.raises(DataError, match="leaf 1.*'nice'.*'bad'"):
            parse_bracketed("(S (NP Looks) (VP nice))", tokens=["Looks", "bad"])

    def test_example_sentence_ten_leaves_split_at_but(self):
        root = parse_bracketed(EXAMPLE_TREE, tokens=EXAMPLE_TOKENS)
        leaves = list(iter_leaves(root))
        assert len(leaves) == 10
        # the root splits into two clauses; the left one ends with "but"
        assert len(root.children) == 2
        left = list(iter_leaves(root.children[0]))
        right = list(iter_leaves(root.children[1]))
        assert left[-1].word == "but"
        assert right[0].word == "has"

    def test_round_trip(self):
        for text in ["(S (NP Looks) (VP nice))", EXAMPLE_TREE, "(A x (B y z) w)"]:
            root = parse_bracketed(text)
            again = parse_bracketed(format_tree(root))
            assert tree_equal(root, again)


def is_partition_matrix(m):
    n = m.shape[0]
    if not np.array_equal(m, m.T):
        return False
    if not np.array_equal(np.diag(m), np.ones(n)):
        return False
    for i in range(n):
        for j in range(n):
            for k in range(n):
                if m[i, j] == 1 and m[j, k] == 1 and m[i, k] != 1:
                    return False
    return True


def random_con_tree(rng, n):
    """Random bracketed tree over n tokens with varying depth."""
    words = [f"w{i}" for i in range(n)]

    def build(lo, hi, depth):
        if hi - lo == 1:
            if depth > 0 and rng.random() < 0.4:
                return words[lo]
            return f"(P{depth} {words[lo]})"
        n_children = int(rng.integers(2, min(4, hi - lo) + 1))
        cuts = sorted(rng.choice(np.arange(lo + 1, hi), size=n_children - 1, replace=False))
        bounds = [lo, *[int(c) for c in cuts], hi]
        parts = [build(bounds[i], bounds[i + 1], depth + 1) for i in range(n_children)]
        return f"(N{depth} " + " ".join(parts) + ")"

    return build(0, n, 0), words


class TestConStack:
    def test_root_level_is_all_ones(self):
        root = parse_bracketed("(S (NP Looks) (VP nice))")
        slc = slices_for_levels(root, [2], 2)
        np.testing.assert_array_equal(slc[0], np.ones((2, 2)))

    def test_phrase_level_is_identity(self):
        root = parse_bracketed("(S (NP Looks) (VP nice))")
        slc = slices_for_levels(root, [1], 2)
        np.testing.assert_array_equal(slc[0], np.eye(2))

    def test_alternating_levels(self):
        assert alternating_levels(3) == [1, 3, 5]
        assert alternating_levels(1) == [1]

    def test_example_sentence_stack(self):
        root = parse_bracketed(EXAMPLE_TREE, tokens=EXAMPLE_TOKENS)
        stack = build_con_stack(root, 3, 10)
        assert stack.levels == [1, 3, 5]
        # level 1: each token alone under its POS tag
        np.testing.assert_array_equal(stack.adj[0], np.eye(10))
        # level 3: the clause split at "but" (indices 0..3 vs 4..9)
        expected = np.zeros((10, 10))
        expected[:4, :4] = 1.0
        expected[4:, 4:] = 1.0
        np.testing.assert_array_equal(stack.adj[1], expected)
        # level 5 exceeds the tree depth and clamps to the root
        np.testing.assert_array_equal(stack.adj[2], np.ones((10, 10)))

    def test_shallow_tree_pads_with_root(self):
        root = parse_bracketed("(S (NP Looks) (VP nice))")
        stack = build_con_stack(root, 3, 2)
        np.testing.assert_array_equal(stack.adj[1], np.ones((2, 2)))
        np.testing.assert_array_equal(stack.adj[2], np.ones((2, 2)))

    def test_random_trees_equivalence_and_refinement(self):
        rng = np.random.default_rng(123)
        for _ in range(100):
            n = int(rng.integers(2, 16))
            text, words = random_con_tree(rng, n)
            root = parse_bracketed(text, tokens=words)
            l_c = int(rng.integers(1, 5))
            stack = build_con_stack(root, l_c, n)
            for m in range(l_c):
                assert is_partition_matrix(stack.adj[m]), f"slice {m} of {text}"
            for m in range(l_c - 1):
                finer, coarser = stack.adj[m], stack.adj[m + 1]
                assert ((finer == 1) <= (coarser == 1)).all(), "refinement violated"

    def test_finest_slice_accessor(self):
        root = parse_bracketed(EXAMPLE_TREE, tokens=EXAMPLE_TOKENS)
        stack = build_con_stack(root, 2, 10)
        np.testing.assert_array_equal(stack.finest, stack.adj[0])
