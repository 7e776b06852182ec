"""Shared oracles and generators for the test suite."""

from __future__ import annotations

from collections import Counter

import numpy as np

from dynbatch.data import gen_random_tree
from dynbatch.dyn_batch import assign_depths, build_schedule, insert_pass_throughs, iter_labels
from dynbatch.graph import Constant, Invocation
from dynbatch.operations import PassThrough
from dynbatch.runtime import run_backward, run_forward


def rel_err(got, want) -> float:
    """Max-norm relative error, ``|got - want|_inf / |want|_inf``."""
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    scale = np.abs(want).max(initial=0.0)
    diff = np.abs(got - want).max(initial=0.0)
    if scale == 0.0:
        return diff
    return diff / scale


def leaves(value):
    """Flatten a nested tuple/list result into its arrays."""
    if isinstance(value, (tuple, list)):
        out = []
        for v in value:
            out.extend(leaves(v))
        return out
    return [np.asarray(value)]


def max_rel_err(got, want) -> float:
    a, b = leaves(got), leaves(want)
    assert len(a) == len(b)
    return max((rel_err(x, y) for x, y in zip(a, b)), default=0.0)


def tokens_to_host(tree, words=None):
    """Int-token nested pairs -> the dict trees the Tree-LSTM model reads."""
    if isinstance(tree, tuple):
        return {"left": tokens_to_host(tree[0], words), "right": tokens_to_host(tree[1], words)}
    return {"word": f"w{tree}" if words is None else words[tree]}


def random_host_tree(rng, max_leaves, vocab_size=12, label=None):
    n = int(rng.integers(1, max_leaves + 1))
    tree = tokens_to_host(gen_random_tree(n, "random", rng, vocab_size))
    if label is not None:
        tree["label"] = label
    return tree


def projections(results, rng):
    """Random weights, one per result tensor, for a scalar test loss."""
    def make(v):
        if isinstance(v, (tuple, list)):
            return type(v)(make(x) for x in v)
        v = np.asarray(v)
        return rng.standard_normal(v.shape).astype(v.dtype)

    return [make(r) for r in results]


def _dot(results, weights) -> float:
    return float(sum(np.sum(np.asarray(r, np.float64) * w) for r, w in
                     zip(leaves(results), leaves(weights))))


def gradient_check(schedule, params, rng, eps=1e-6, max_entries=None):
    """Backward-pass parameter gradients against central differences of
    ``L = sum_k <result_k, w_k>`` with random ``w_k``.

    Returns the largest max-norm relative error over parameter tensors. A
    tensor whose true gradient is identically zero (an attention score bias,
    say) would make that ratio pure rounding noise, so each denominator is
    floored at 1e-3 of the largest gradient entry across all tensors.
    ``max_entries`` caps the number of perturbed entries per tensor (chosen
    at random); ``None`` checks every entry.
    """
    results, tape = run_forward(schedule, params, "train")
    weights = projections(results, rng)
    grads = run_backward(tape, schedule, params, weights)

    def loss():
        return _dot(run_forward(schedule, params)[0], weights)

    checked = []
    for name, p in params.items():
        flat = p.reshape(-1)
        entries = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            entries = rng.choice(flat.size, max_entries, replace=False)
        fd = np.zeros(len(entries))
        for k, e in enumerate(entries):
            orig = flat[e]
            flat[e] = orig + eps
            up = loss()
            flat[e] = orig - eps
            down = loss()
            flat[e] = orig
            fd[k] = (up - down) / (2 * eps)
        checked.append((grads[name].reshape(-1)[entries], fd))

    floor = 1e-3 * max((max(np.abs(a).max(initial=0), np.abs(f).max(initial=0))
                        for a, f in checked), default=0.0)
    worst = 0.0
    for analytic, fd in checked:
        scale = max(np.abs(fd).max(initial=0), np.abs(analytic).max(initial=0), floor)
        if scale > 0:
            worst = max(worst, np.abs(analytic - fd).max(initial=0) / scale)
    return worst


def check_invariants(g, enum):
    """Schedule a raw graph and assert the level/group/gather invariants."""
    depths = assign_depths(g)
    g2, d2 = insert_pass_throughs(g, depths)
    s = build_schedule(g2, d2, enum)
    # every non-constant edge spans exactly one level
    for n, node in enumerate(g2.nodes):
        for r in node.inputs:
            assert d2[r.node] == d2[n] - 1
    # each invocation lands in exactly one group: group sizes per
    # (depth, operation) equal the node counts per (depth, operation)
    def key_of(op, depth):
        return (depth, ("pass", op.ttype) if isinstance(op, PassThrough) else id(op))

    nodes_per_key = Counter()
    for n, node in enumerate(g2.nodes):
        if isinstance(node, Invocation):
            nodes_per_key[(d2[n], id(node.op))] += 1
        elif not isinstance(node, Constant):
            nodes_per_key[(d2[n], ("pass", node.ttype))] += 1
    group_sizes = Counter()
    for grp in s.groups():
        k = key_of(grp.op, grp.depth)
        assert k not in group_sizes, "two groups for one (depth, operation)"
        group_sizes[k] = grp.count
    assert group_sizes == nodes_per_key
    # gathers stay within the previous level's extent
    for grp in s.groups():
        for k, idx in enumerate(grp.gathers):
            extent = s.extent(grp.depth - 1, grp.in_types[k])
            assert all(0 <= i < extent for i in idx)
            assert len(idx) == grp.count
    for label in iter_labels(s.results):
        assert label.index < s.extent(label.depth, label.ttype)
    return s
