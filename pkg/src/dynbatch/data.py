"""Host-side data: parse trees, molecules, and synthetic datasets.

Trees are written as s-expressions. A leaf is a token, an internal node is
``(left right)``, and any node may carry a ``label:`` prefix::

    3:(2:(w1 w3) 1:w5)

Parsed trees convert to the dict form the Tree-LSTM model reads
(``{"word": w}`` / ``{"left": .., "right": ..}``, plus ``"label"``) and to the
nested-tuple form the plain tree models read.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class ParseError(ValueError):
    pass


@dataclass
class ParseTree:
    label: int | None = None
    word: str | None = None
    left: "ParseTree | None" = None
    right: "ParseTree | None" = None

    @property
    def is_leaf(self) -> bool:
        return self.word is not None

    def leaves(self) -> list[str]:
        if self.is_leaf:
            return [self.word]
        return self.left.leaves() + self.right.leaves()

    def nodes(self) -> list["ParseTree"]:
        """Post-order list of all nodes."""
        if self.is_leaf:
            return [self]
        return self.left.nodes() + self.right.nodes() + [self]

    def to_host(self) -> dict:
        node = {"word": self.word} if self.is_leaf else {
            "left": self.left.to_host(), "right": self.right.to_host()}
        if self.label is not None:
            node["label"] = self.label
        return node

    def to_tuple(self, word_idx: dict | None = None):
        if self.is_leaf:
            return self.word if word_idx is None else word_idx.get(self.word, 0)
        return (self.left.to_tuple(word_idx), self.right.to_tuple(word_idx))

    def __str__(self) -> str:
        body = self.word if self.is_leaf else f"({self.left} {self.right})"
        return body if self.label is None else f"{self.label}:{body}"


_TOKEN = re.compile(r"\s*(\(|\)|[^\s()]+)")


def _tokenize(text: str) -> list[str]:
    tokens, pos = [], 0
    text = text.rstrip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            raise ParseError(f"unexpected character at offset {pos}")
        tokens.append(m.group(1))
        pos = m.end()
    return tokens


def parse_tree(text: str) -> ParseTree:
    """Parse one s-expression. Binary internal nodes only."""
    tokens = _tokenize(text)
    if not tokens:
        raise ParseError("empty tree")
    pos = 0

    def node() -> ParseTree:
        nonlocal pos
        if pos >= len(tokens):
            raise ParseError("unexpected end of input")
        tok = tokens[pos]
        pos += 1
        label = None
        if tok != "(" and tok != ")":
            head, sep, rest = tok.partition(":")
            if sep and head.lstrip("-").isdigit():
                label = int(head)
                if rest:
                    return ParseTree(label=label, word=rest)
                # "3:(" splits into "3:" and "("
                if pos >= len(tokens) or tokens[pos] != "(":
                    raise ParseError(f"label {label} is not followed by a node")
                tok = tokens[pos]
                pos += 1
            else:
                return ParseTree(word=tok)
        if tok == ")":
            raise ParseError("unbalanced ')'")
        left = node()
        right = node()
        if pos >= len(tokens) or tokens[pos] != ")":
            raise ParseError("internal nodes must have exactly two children")
        pos += 1
        return ParseTree(label=label, left=left, right=right)

    tree = node()
    if pos != len(tokens):
        raise ParseError(f"trailing input after tree: {' '.join(tokens[pos:])}")
    return tree


def load_trees(path) -> list[ParseTree]:
    """One tree per non-blank line; ``#`` starts a comment line."""
    trees = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        try:
            trees.append(parse_tree(line))
        except ParseError as e:
            raise ParseError(f"{path}:{n}: {e}") from None
    return trees


def build_vocab(trees: list[ParseTree]) -> dict[str, int]:
    """Word -> index, starting at 1 (row 0 is the unknown-word row)."""
    vocab: dict[str, int] = {}
    for t in trees:
        for w in t.leaves():
            vocab.setdefault(w, len(vocab) + 1)
    return vocab


# ---------------------------------------------------------------------------
# Molecules


@dataclass
class Molecule:
    atoms: np.ndarray  # [N, n]
    pairs: np.ndarray  # [N, N, m]

    def to_host(self) -> dict:
        return {"atoms": self.atoms, "pairs": self.pairs}


def validate_molecule(atoms, pairs, dtype: str = "float32") -> Molecule:
    atoms = np.asarray(atoms, dtype=dtype)
    pairs = np.asarray(pairs, dtype=dtype)
    if atoms.ndim != 2 or len(atoms) == 0:
        raise ValueError("atoms must be a non-empty list of equal-length feature lists")
    n = len(atoms)
    if pairs.ndim != 3 or pairs.shape[:2] != (n, n):
        raise ValueError(f"pairs must be {n}x{n}xm, got shape {list(pairs.shape)}")
    if not np.array_equal(pairs, pairs.transpose(1, 0, 2)):
        raise ValueError("pair features must be symmetric: p[i][j] == p[j][i]")
    return Molecule(atoms, pairs)


def load_molecules(path, dtype: str = "float32") -> list[Molecule]:
    """JSON lines with ``atoms`` and ``pairs``; symmetry is checked."""
    out = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            out.append(validate_molecule(obj["atoms"], obj["pairs"], dtype))
        except (ValueError, KeyError, TypeError) as e:
            raise ValueError(f"{path}:{n}: {e}") from None
    return out


def random_molecule(n_atoms: int, atom_dim: int, pair_dim: int, rng: np.random.Generator,
                    dtype: str = "float32") -> Molecule:
    """Random symmetric pair features with zero diagonal."""
    atoms = rng.standard_normal((n_atoms, atom_dim))
    pairs = rng.standard_normal((n_atoms, n_atoms, pair_dim))
    pairs = pairs + pairs.transpose(1, 0, 2)
    pairs[np.arange(n_atoms), np.arange(n_atoms)] = 0
    return validate_molecule(atoms, pairs, dtype)


# ---------------------------------------------------------------------------
# Random trees


def _log_catalan(n: int) -> float:
    return math.lgamma(2 * n + 1) - math.lgamma(n + 2) - math.lgamma(n + 1)


def _random_split(leaves: int, rng: np.random.Generator) -> int:
    """Leaf count of the left subtree, so that the whole topology is uniform
    over binary trees with ``leaves`` leaves."""
    ks = np.arange(1, leaves)
    logw = np.array([_log_catalan(k - 1) + _log_catalan(leaves - k - 1) for k in ks])
    w = np.exp(logw - logw.max())
    return int(rng.choice(ks, p=w / w.sum()))


def gen_random_tree(leaves: int, shape_mode: str = "fixed", seed=0, vocab_size: int = 64):
    """A binary tree of int tokens as nested pairs.

    ``fixed`` splits every node at ``n // 2``, which is the complete tree when
    ``leaves`` is a power of two; ``random`` draws the topology uniformly
    among all binary trees with that many leaves. ``seed`` may be an int or a
    numpy Generator.
    """
    if leaves < 1:
        raise ValueError("a tree needs at least one leaf")
    if shape_mode not in ("fixed", "random"):
        raise ValueError(f"unknown shape mode {shape_mode!r}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    # build iteratively so very deep random trees do not hit the recursion limit
    tokens = iter(rng.integers(0, vocab_size, size=leaves).tolist())
    root: list = [None]
    stack = [(leaves, root, 0)]
    while stack:
        n, parent, slot = stack.pop()
        if n == 1:
            parent[slot] = next(tokens)
            continue
        k = n // 2 if shape_mode == "fixed" else _random_split(n, rng)
        node = [None, None]
        parent[slot] = node
        stack.append((n - k, node, 1))
        stack.append((k, node, 0))
    return _freeze(root[0])


def _freeze(t):
    # post-order conversion of nested lists to nested tuples without recursion
    out = {}
    stack = [(t, False)]
    while stack:
        node, done = stack.pop()
        if not isinstance(node, list):
            out[id(node)] = node
            continue
        if done:
            out[id(node)] = (out[id(node[0])], out[id(node[1])])
        else:
            stack.append((node, True))
            stack.append((node[1], False))
            stack.append((node[0], False))
    return out[id(t)]


def tree_depth(tree) -> int:
    """Levels below the root (a single leaf has depth 0)."""
    best = 0
    stack = [(tree, 0)]
    while stack:
        t, d = stack.pop()
        if isinstance(t, tuple):
            stack.append((t[0], d + 1))
            stack.append((t[1], d + 1))
        else:
            best = max(best, d)
    return best


def tree_shape(tree):
    """The topology with tokens erased."""
    return None if not isinstance(tree, tuple) else (tree_shape(tree[0]), tree_shape(tree[1]))


# ---------------------------------------------------------------------------
# Synthetic sentiment


@dataclass
class SentimentData:
    trees: list[ParseTree]
    vocab: dict[str, int]
    polarity: dict[str, int]
    num_classes: int


def _bucket(score: int, num_classes: int) -> int:
    half = num_classes // 2
    return int(np.clip(score, -half, half)) + half


def synthetic_sentiment(n_trees: int, vocab_size: int = 20, min_leaves: int = 2,
                        max_leaves: int = 8, num_classes: int = 5, seed: int = 0) -> SentimentData:
    """Random trees over a toy vocabulary, labelled by a hidden rule.

    Every word has a hidden polarity in ``{-1, 0, +1}``; a node's label is the
    sum of its leaves' polarities clipped to the label range. Every node is
    labelled, so both root and all-node losses apply.
    """
    rng = np.random.default_rng(seed)
    words = [f"w{k}" for k in range(vocab_size)]
    polarity = {w: int(p) for w, p in zip(words, rng.integers(-1, 2, size=vocab_size))}
    trees = []
    for _ in range(n_trees):
        n = int(rng.integers(min_leaves, max_leaves + 1))
        shape = gen_random_tree(n, "random", rng, vocab_size)
        trees.append(_label(shape, words, polarity, num_classes)[0])
    vocab = {w: k + 1 for k, w in enumerate(words)}
    return SentimentData(trees, vocab, polarity, num_classes)


def _label(t, words, polarity, num_classes):
    if not isinstance(t, tuple):
        w = words[t]
        return ParseTree(label=_bucket(polarity[w], num_classes), word=w), polarity[w]
    left, sl = _label(t[0], words, polarity, num_classes)
    right, sr = _label(t[1], words, polarity, num_classes)
    return ParseTree(label=_bucket(sl + sr, num_classes), left=left, right=right), sl + sr
