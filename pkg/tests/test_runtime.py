import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynbatch import operations as ops
from dynbatch.blocks import Function, Map, Scalar, Sum, Tensor
from dynbatch.data import gen_random_tree
from dynbatch.dyn_batch import Compiler
from dynbatch.models import TreeRNNCell, tree_rnn_block, tree_rnn_reference
from dynbatch.operations import OperationRegistry
from dynbatch.runtime import (
    ExecutionError,
    ExecutionStats,
    ParameterStore,
    adam_step,
    evaluate_graph,
    load_checkpoint,
    run_backward,
    run_forward,
    save_checkpoint,
    sgd_step,
)

from _helpers import gradient_check, max_rel_err


def tree_setup(dim=3, dtype="float32", activation="tanh", seed=0):
    emb = ops.Embedding("embed", 10, dim, dtype=dtype)
    cell = TreeRNNCell("cell", dim, activation=activation, dtype=dtype)
    c = Compiler(tree_rnn_block(emb, cell))
    return c, c.init_params(seed)


def test_single_constant_schedule_returns_the_constant():
    c = Compiler(Tensor([3]))
    x = np.array([1.0, 2.0, 3.0], np.float32)
    results, tape = run_forward(c.compile_batch([x]), ParameterStore())
    np.testing.assert_array_equal(results[0], x)
    assert tape is None


def test_small_tree_with_identity_weights_matches_recursion():
    c, params = tree_setup(activation=None)
    params["cell/w"] = np.vstack([np.eye(3), np.eye(3)]).astype(np.float32)
    tree = ((1, 3), 5)
    (root,), _ = run_forward(c.compile_batch([tree]), params)
    table = params["embed/table"]
    np.testing.assert_array_equal(root, tree_rnn_reference(tree, params, "embed", "cell", None))
    np.testing.assert_allclose(root, table[1] + table[3] + table[5], rtol=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 20), min_size=1, max_size=8), st.integers(0, 1000))
def test_merged_batch_equals_independent_runs(sizes, seed):
    c, params = tree_setup(seed=seed)
    trees = [gen_random_tree(n, "random", seed + k, 10) for k, n in enumerate(sizes)]
    merged, _ = run_forward(c.compile_batch(trees), params)
    for tree, got in zip(trees, merged):
        (alone,), _ = run_forward(c.compile_batch([tree]), params)
        np.testing.assert_allclose(got, alone, rtol=1e-6, atol=1e-7)


def test_batched_matches_unbatched_evaluator_at_f64():
    c, params = tree_setup(dtype="float64")
    trees = [gen_random_tree(n, "random", n, 10) for n in range(1, 15)]
    g = c.trace(trees)
    want = evaluate_graph(g, params)
    got, _ = run_forward(c.schedule(g), params)
    assert max_rel_err(got, want) <= 1e-12


def test_fc_gradient_matches_dense_oracle():
    fc = ops.FC("fc", 2)
    c = Compiler(Tensor([3], "float64") >> Function(fc))
    params = c.init_params(1)
    x = np.array([0.5, -1.0, 2.0])
    s = c.compile_batch([x])
    _, tape = run_forward(s, params, "train")
    grads = run_backward(tape, s, params, [np.ones(2)])
    np.testing.assert_allclose(grads["fc/w"], np.outer(x, np.ones(2)))
    np.testing.assert_allclose(grads["fc/b"], np.ones(2))


def chain_compiler(levels):
    fc = ops.FC("fc", 3, "tanh")
    b = Tensor([3], "float64")
    for _ in range(levels):
        b = b >> Function(fc)
    return Compiler(b)


def test_shared_parameter_across_depths_sums_gradients():
    c = chain_compiler(3)
    params = c.init_params(2)
    x = np.array([0.3, -0.2, 0.9])
    s = c.compile_batch([x])
    rng = np.random.default_rng(0)
    w = rng.standard_normal(3)
    _, tape = run_forward(s, params, "train")
    total = run_backward(tape, s, params, [w])["fc/w"]

    # unroll the chain into three distinct ops holding the same weights
    names = ["a", "b", "c"]
    b = Tensor([3], "float64")
    for n in names:
        b = b >> Function(ops.FC(n, 3, "tanh"))
    c3 = Compiler(b)
    p3 = ParameterStore({f"{n}/{k}": params[f"fc/{k}"].copy() for n in names for k in ("w", "b")})
    s3 = c3.compile_batch([x])
    _, tape3 = run_forward(s3, p3, "train")
    g3 = run_backward(tape3, s3, p3, [w])
    np.testing.assert_allclose(total, sum(g3[f"{n}/w"] for n in names), rtol=1e-12)
    assert gradient_check(s, params, rng) < 1e-6


def test_tree_rnn_gradients_match_finite_differences():
    c, params = tree_setup(dtype="float64")
    trees = [gen_random_tree(n, "random", n, 10) for n in (1, 3, 6)]
    assert gradient_check(c.compile_batch(trees), params, np.random.default_rng(3)) < 1e-6


def test_unused_parameters_get_zero_gradients():
    c, params = tree_setup(dtype="float64")
    s = c.compile_batch([4])  # a single leaf never calls the cell
    _, tape = run_forward(s, params, "train")
    grads = run_backward(tape, s, params, [np.ones(3)])
    assert not grads["cell/w"].any() and not grads["cell/b"].any()
    assert grads["embed/table"][4].tolist() == [1.0, 1.0, 1.0]


def test_backward_needs_a_train_tape():
    c, params = tree_setup()
    s = c.compile_batch([((1, 2), 3)])
    with pytest.raises(ExecutionError):
        run_backward(None, s, params, [np.ones(3, np.float32)])
    with pytest.raises(ValueError):
        run_forward(s, params, "eval")


def test_tape_depth_count_matches_schedule():
    c, params = tree_setup()
    s = c.compile_batch([((1, 2), (3, (4, 5)))])
    _, tape = run_forward(s, params, "train")
    assert tape.depth_count == s.max_depth


def test_stats_count_one_call_per_group():
    c, params = tree_setup()
    tree = gen_random_tree(128, "fixed", 0, 10)
    stats = ExecutionStats()
    run_forward(c.compile_batch([tree]), params, stats=stats)
    assert stats["cell"] == 7 and stats["embed"] == 1


def test_gather_errors_carry_depth_and_op():
    emb = ops.Embedding("embed", 4, 2)
    c = Compiler(Scalar("int32") >> Function(emb))
    params = c.init_params()
    with pytest.raises(IndexError, match=r"depth 1, op embed"):
        run_forward(c.compile_batch([9]), params)


def test_threads_give_identical_results():
    c, params = tree_setup()
    trees = [gen_random_tree(n, "random", n, 10) for n in range(1, 30)]
    s = c.compile_batch(trees)
    one, _ = run_forward(s, params, threads=1)
    many, _ = run_forward(s, params, threads=4)
    for a, b in zip(one, many):
        assert a.tobytes() == b.tobytes()


def test_forward_is_deterministic():
    a, pa = tree_setup(seed=5)
    b, pb = tree_setup(seed=5)
    trees = [gen_random_tree(n, "random", 7 * n, 10) for n in range(1, 12)]
    ra, _ = run_forward(a.compile_batch(trees), pa)
    rb, _ = run_forward(b.compile_batch(trees), pb)
    assert all(x.tobytes() == y.tobytes() for x, y in zip(ra, rb))


def test_sum_over_empty_and_full_sequences():
    c = Compiler(Map(Tensor([2])) >> Sum())
    xs = [np.ones(2, np.float32), np.full(2, 2, np.float32)]
    results, _ = run_forward(c.compile_batch([[], xs]), ParameterStore())
    np.testing.assert_array_equal(results[0], [0, 0])
    np.testing.assert_array_equal(results[1], [3, 3])


# -- built-in operations ------------------------------------------------------------


def test_embedding_lookup():
    table = np.arange(15, dtype=np.float32).reshape(5, 3)
    emb = ops.Embedding("e", initializer=table)
    outs, _ = emb.forward({"e/table": table}, [np.array([2], np.int32)])
    np.testing.assert_array_equal(outs[0], [table[2]])


def test_fc_zero_weights_relu_gives_zeros():
    fc = ops.FC("fc", 4, "relu")
    params = {"fc/w": np.zeros((3, 4), np.float32), "fc/b": np.zeros(4, np.float32)}
    outs, _ = fc.forward(params, [np.ones((2, 3), np.float32)])
    assert outs[0].shape == (2, 4) and not outs[0].any()


def test_fc_gradients_match_finite_differences():
    fc = ops.FC("fc", 3, "sigmoid")
    c = Compiler(Map(Tensor([4], "float64") >> Function(fc)))
    params = c.init_params(9)
    rng = np.random.default_rng(9)
    s = c.compile_batch([[rng.standard_normal(4) for _ in range(3)]])
    assert gradient_check(s, params, rng) < 1e-6


def test_registry_resolves_names():
    reg = OperationRegistry()
    reg.register(ops.FC("proj", 2))
    with pytest.raises(ValueError):
        reg.register(ops.FC("proj", 2))
    c = Compiler(Tensor([3]) >> Function("proj"), registry=reg)
    assert [op.name for op in c.enumeration][:1] == ["proj"]
    with pytest.raises(KeyError, match="nope"):
        Compiler(Tensor([3]) >> Function("nope"), registry=reg)


# -- optimizers and checkpoints --------------------------------------------------------


def test_sgd_with_unit_rate_subtracts_the_gradient():
    p = ParameterStore(x=np.array([1.0, 2.0]))
    sgd_step(p, {"x": np.array([0.25, -1.0])}, 1.0)
    np.testing.assert_array_equal(p["x"], [0.75, 3.0])


@pytest.mark.parametrize("scale", [1e-4, 1.0, 1e4])
def test_adam_first_step_is_about_lr(scale):
    p = ParameterStore(x=np.array([1.0, -1.0]))
    adam_step(p, {"x": np.array([scale, -scale])}, lr=0.01)
    np.testing.assert_allclose(np.abs(p["x"] - [1.0, -1.0]), 0.01, rtol=1e-3)


def test_adam_on_a_quadratic():
    p = ParameterStore(x=np.array([1.0]))
    for _ in range(200):
        adam_step(p, {"x": 2 * p["x"]}, lr=0.1)
    assert abs(p["x"][0]) < 1e-3
    assert p.step == 200


def test_parameter_init_is_seeded():
    c, _ = tree_setup()
    a, b, other = c.init_params(3), c.init_params(3), c.init_params(4)
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    assert a["cell/w"].tobytes() != other["cell/w"].tobytes()
    assert not a["cell/b"].any()
    limit = np.sqrt(6.0 / (6 + 3))
    assert np.abs(a["cell/w"]).max() <= limit


def test_checkpoint_round_trip(tmp_path):
    params = ParameterStore({
        "a/w": np.arange(6, dtype=np.float32).reshape(2, 3),
        "b": np.array(3.5),
        "idx": np.array([1, -2], np.int32),
    })
    path = tmp_path / "ckpt.bin"
    save_checkpoint(path, params)
    back = load_checkpoint(path)
    assert sorted(back) == sorted(params)
    for k in params:
        assert back[k].dtype == params[k].dtype and back[k].shape == params[k].shape
        np.testing.assert_array_equal(back[k], params[k])
    assert path.read_bytes().startswith(b"DBCKPT1\n")


def test_checkpoint_rejects_foreign_files(tmp_path):
    path = tmp_path / "x.bin"
    path.write_bytes(b"hello")
    with pytest.raises(ValueError):
        load_checkpoint(path)


def test_blocked_inference_matches_single_kernel_calls(monkeypatch):
    from dynbatch import runtime

    c, params = tree_setup(dim=4, dtype="float64")
    trees = [gen_random_tree(40, "random", s, 10) for s in range(12)]
    sch = c.compile_batch(trees)
    assert max(g.count for level in sch.levels for g in level) > 7
    whole, _ = run_forward(sch, params, "train")  # train mode never blocks
    monkeypatch.setattr(runtime, "BLOCK_ROWS", 7)
    stats = ExecutionStats()
    blocked, _ = run_forward(sch, params, stats=stats, validate=True)
    assert max_rel_err(blocked, whole) < 1e-12
    assert stats["cell"] == sum(g.name == "cell" for level in sch.levels for g in level)
