import json
from collections import Counter
from math import comb

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dynbatch.data import (
    ParseError,
    ParseTree,
    build_vocab,
    gen_random_tree,
    load_molecules,
    load_trees,
    parse_tree,
    random_molecule,
    synthetic_sentiment,
    tree_depth,
    tree_shape,
    validate_molecule,
)


def count_leaves(t):
    return count_leaves(t[0]) + count_leaves(t[1]) if isinstance(t, tuple) else 1


def catalan(n):
    return comb(2 * n, n) // (n + 1)


# -- s-expressions ----------------------------------------------------------------


def test_parse_labelled_tree():
    t = parse_tree("3:(2:(w1 w3) 1:w5)")
    assert t.label == 3 and t.left.label == 2 and t.right.label == 1
    assert t.right.word == "w5" and t.left.left.word == "w1" and t.left.left.label is None
    assert t.leaves() == ["w1", "w3", "w5"]
    assert str(t) == "3:(2:(w1 w3) 1:w5)"


def test_parse_unlabelled_tree_and_single_leaf():
    assert parse_tree("((a b) c)").to_tuple() == (("a", "b"), "c")
    leaf = parse_tree("  2:word ")
    assert leaf.is_leaf and leaf.label == 2


def test_words_with_colons_that_are_not_labels():
    assert parse_tree("(a:b c)").left.word == "a:b"


@pytest.mark.parametrize("text", ["", "(a b", "(a b c)", "(a)", "a b", ")", "3:", "(a b))"])
def test_parse_errors(text):
    with pytest.raises(ParseError):
        parse_tree(text)


@given(st.integers(1, 30), st.integers(0, 1000))
def test_print_parse_round_trip(n, seed):
    rng = np.random.default_rng(seed)
    shape = gen_random_tree(n, "random", rng, 9)

    def build(t):
        if isinstance(t, tuple):
            return ParseTree(label=int(rng.integers(0, 5)), left=build(t[0]), right=build(t[1]))
        return ParseTree(label=int(rng.integers(0, 5)), word=f"w{t}")

    tree = build(shape)
    assert parse_tree(str(tree)) == tree


def test_load_trees_skips_comments_and_reports_lines(tmp_path):
    path = tmp_path / "t.txt"
    path.write_text("# header\n1:(a b)\n\n2:c\n")
    trees = load_trees(path)
    assert [t.label for t in trees] == [1, 2]
    path.write_text("1:(a b)\n(a b\n")
    with pytest.raises(ParseError, match=":2"):
        load_trees(path)


def test_vocab_starts_at_one():
    trees = [parse_tree("(a b)"), parse_tree("(b c)")]
    assert build_vocab(trees) == {"a": 1, "b": 2, "c": 3}


def test_to_host_and_post_order():
    t = parse_tree("1:(0:a 2:b)")
    assert t.to_host() == {"label": 1, "left": {"word": "a", "label": 0},
                           "right": {"word": "b", "label": 2}}
    assert [n.word for n in t.nodes()] == ["a", "b", None]


# -- molecules ---------------------------------------------------------------------


def test_validate_molecule_checks_shape_and_symmetry():
    m = validate_molecule([[1.0, 2.0]], [[[0.5]]])
    assert m.atoms.shape == (1, 2) and m.pairs.shape == (1, 1, 1)
    with pytest.raises(ValueError, match="symmetric"):
        validate_molecule([[1.0], [2.0]], [[[0.0], [1.0]], [[2.0], [0.0]]])
    with pytest.raises(ValueError, match="2x2"):
        validate_molecule([[1.0], [2.0]], [[[0.0]]])
    with pytest.raises(ValueError):
        validate_molecule([], [])


def test_load_molecules(tmp_path):
    rng = np.random.default_rng(0)
    mols = [random_molecule(n, 3, 2, rng, "float64") for n in (1, 4)]
    path = tmp_path / "m.jsonl"
    path.write_text("\n".join(json.dumps({"atoms": m.atoms.tolist(), "pairs": m.pairs.tolist()})
                              for m in mols) + "\n")
    back = load_molecules(path, "float64")
    assert all(np.array_equal(a.pairs, b.pairs) for a, b in zip(mols, back))
    path.write_text('{"atoms": [[1.0]]}\n')
    with pytest.raises(ValueError, match=":1"):
        load_molecules(path)


def test_random_molecule_is_symmetric_with_zero_diagonal():
    m = random_molecule(5, 3, 2, np.random.default_rng(1))
    assert np.array_equal(m.pairs, m.pairs.transpose(1, 0, 2))
    assert not m.pairs[np.arange(5), np.arange(5)].any()


# -- random trees ------------------------------------------------------------------


@given(st.integers(1, 200), st.integers(0, 10**6), st.sampled_from(["fixed", "random"]))
def test_random_trees_have_the_requested_leaves(n, seed, mode):
    t = gen_random_tree(n, mode, seed, 16)
    assert count_leaves(t) == n
    assert t == gen_random_tree(n, mode, seed, 16)


def test_fixed_mode_gives_complete_trees():
    t = gen_random_tree(128, "fixed", 0)
    assert tree_depth(t) == 7
    assert tree_shape(t) == tree_shape(gen_random_tree(128, "fixed", 99))


def test_random_topologies_are_uniform():
    rng = np.random.default_rng(0)
    counts = Counter(tree_shape(gen_random_tree(5, "random", rng)) for _ in range(7000))
    assert len(counts) == catalan(4)  # 14 shapes with 5 leaves
    expected = 7000 / 14
    # chi-square with 13 dof; the 0.999 quantile is about 34.5
    chi2 = sum((c - expected) ** 2 / expected for c in counts.values())
    assert chi2 < 34.5


def test_very_deep_trees_do_not_recurse():
    rng = np.random.default_rng(3)
    t = gen_random_tree(5000, "random", rng)
    assert tree_depth(t) >= 1


def test_tree_generator_errors():
    with pytest.raises(ValueError):
        gen_random_tree(0)
    with pytest.raises(ValueError):
        gen_random_tree(4, "balanced")


# -- synthetic sentiment -----------------------------------------------------------------


def test_synthetic_labels_follow_the_hidden_rule():
    data = synthetic_sentiment(40, seed=3)
    for tree in data.trees:
        for node in tree.nodes():
            score = sum(data.polarity[w] for w in node.leaves())
            assert node.label == int(np.clip(score, -2, 2)) + 2
    assert set(data.vocab.values()) == set(range(1, 21))


def test_synthetic_data_is_deterministic():
    a, b = synthetic_sentiment(10, seed=1), synthetic_sentiment(10, seed=1)
    assert [str(t) for t in a.trees] == [str(t) for t in b.trees]
    c = synthetic_sentiment(10, seed=2)
    assert [str(t) for t in a.trees] != [str(t) for t in c.trees]
