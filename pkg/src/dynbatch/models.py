"""The four model families, built from blocks, plus dense reference math.

* text pipeline: sentence -> RNN fold -> logits -> cross-entropy
* feed-forward attention over a sequence of vectors
* binary Tree-LSTM over parse trees (and a plain tree RNN)
* the weave module for molecule graphs

Each builder returns fresh blocks. Operations carry the parameter names, so
two builds with the same names share one parameter store.

The ``*_reference`` functions evaluate the same math directly with numpy,
one example at a time, without blocks or schedules. They are the oracles the
batched runtime is tested against.
"""

from __future__ import annotations

from dataclasses import dataclass
from operator import itemgetter

import numpy as np

from . import operations as ops
from . import tensor_core as tc
from .blocks import (
    AllOf,
    Block,
    Broadcast,
    Composition,
    Concat,
    Fold,
    ForwardDeclaration,
    Function,
    GetItem,
    InputTransform,
    Map,
    OneOf,
    Optional,
    Record,
    Scalar,
    Sum,
    Tensor,
    Zeros,
    ZipWith,
)
from .operations import ParamSpec
from .type_system import TensorType, TupleType

# ---------------------------------------------------------------------------
# Text pipeline


def word2vec(embedding: ops.Embedding, word_idx: dict) -> Block:
    """Word -> vector. Unknown words map to ``None`` and then to index 0."""
    return InputTransform(word_idx.get) >> Optional(Scalar("int32")) >> Function(embedding)


@dataclass
class TextPipeline:
    loss: Block
    embedding: ops.Embedding
    rnn_cell: ops.FC
    output_layer: ops.FC
    cross_entropy: ops.CrossEntropy


def build_text_pipeline(word_matrix, word_idx: dict, d: int, n: int) -> TextPipeline:
    """Sentence classifier: embed words, fold an RNN cell over them starting
    from zeros, project to ``n`` logits, and score with cross-entropy.

    Host input: ``{"text": "some words", "label": int}``.
    """
    word_matrix = np.asarray(word_matrix)
    if word_idx and max(word_idx.values()) >= word_matrix.shape[0]:
        raise ValueError("word_matrix has fewer rows than the vocabulary")
    dtype = word_matrix.dtype.name
    embedding = ops.Embedding("word_embedding", initializer=word_matrix, dtype=dtype)
    cell = ops.FC("rnn_cell", d, activation="relu")
    out = ops.FC("logits", n)
    ce = ops.CrossEntropy("cross_entropy")

    split = InputTransform(str.split)
    # the cell sees (state, word vector), concatenated in that order
    rnn_cell = Concat() >> Function(cell)
    text2vec = split >> Map(word2vec(embedding, word_idx)) >> Fold(rnn_cell, Zeros(d, dtype=dtype))
    text2logits = text2vec >> Function(out)
    record = Record([("text", text2logits), ("label", Scalar("int32"))])
    return TextPipeline(record >> Function(ce), embedding, cell, out, ce)


def text_pipeline_reference(text: str, label: int, word_idx: dict, params: dict) -> float:
    table = params["word_embedding/table"]
    w, b = params["rnn_cell/w"], params["rnn_cell/b"]
    state = np.zeros(w.shape[1], dtype=w.dtype)
    for word in text.split():
        x = table[word_idx.get(word) or 0]
        state = np.maximum(np.concatenate([state, x]) @ w + b, 0)
    logits = state @ params["logits/w"] + params["logits/b"]
    shifted = logits - logits.max()
    return float(np.log(np.exp(shifted).sum()) - shifted[label])


# ---------------------------------------------------------------------------
# Attention


def attention_block(a: Block, d: int) -> Composition:
    """``seq<f[d]> -> f[d]``: ``c = sum_t alpha_t h_t`` with
    ``alpha = softmax(a(h_t))``.

    ``a`` maps ``f[d] -> f[1]``. Scaling ``h_t`` by the length-1 weight uses
    an explicit broadcast to ``[d]`` since kernels never broadcast implicitly.
    """
    scale = ZipWith(
        AllOf(GetItem(0) >> Function(ops.BroadcastTo(d)), GetItem(1)) >> Function(ops.Mul())
    )
    attention = Composition(name="attention")
    with attention.scope():
        h = attention.input
        exp_e = Map(a >> Function(ops.Exp())).reads(h)
        z = (Sum() >> Broadcast()).reads(exp_e)
        alpha = ZipWith(Function(ops.Div())).reads(exp_e, z)
        c = (scale >> Sum()).reads(alpha, h)
        attention.output.reads(c)
    return attention


@dataclass
class AttentionModel:
    block: Block
    score: ops.FC


def build_attention(d: int, dtype: str = "float32", name: str = "attention_score") -> AttentionModel:
    """Attention over a host list of ``d``-vectors, scored by one FC layer."""
    score = ops.FC(name, 1)
    block = Map(Tensor([d], dtype)) >> attention_block(Function(score), d)
    return AttentionModel(block, score)


def attention_reference(h, w, b) -> np.ndarray:
    """Softmax-weighted average of the rows of ``h`` with scores ``h w + b``."""
    h = np.asarray(h)
    if len(h) == 0:
        return np.zeros(w.shape[0], dtype=h.dtype)
    e = (h @ w + b)[:, 0]
    alpha = np.exp(e) / np.exp(e).sum()
    return alpha @ h


# ---------------------------------------------------------------------------
# Tree-LSTM


class TreeLSTMCell(ops.Operation):
    """Binary Tree-LSTM cell.

    Input ``(x, (h_L, c_L), (h_R, c_R))``, output ``(h, c)``. With
    ``input_dim=None`` there is no ``x`` and the input is just the two child
    states.

    Parameters are packed: ``W`` is ``[e, 4s]`` with column blocks
    ``i, f, o, u``; ``U`` is ``[2s, 5s]`` acting on ``[h_L; h_R]`` with column
    blocks ``i, f_L, f_R, o, u``; ``b`` is ``[4s]``. The input and bias terms
    of the forget gate are shared by both children.
    """

    label = "tree_lstm"

    def __init__(self, name: str, state_size: int, input_dim: int | None = None,
                 dtype: str = "float32"):
        super().__init__(name)
        self.state_size = state_size
        self.input_dim = input_dim
        self.dtype = dtype
        s = TensorType(dtype, (state_size,))
        pair = TupleType((s, s))
        self.state_type = pair
        if input_dim is None:
            self.input_type = TupleType((pair, pair))
        else:
            self.input_type = TupleType((TensorType(dtype, (input_dim,)), pair, pair))

    def output_type(self, in_type):
        return self.state_type

    def param_specs(self, inputs):
        s, n = self.state_size, self.name
        specs = []
        if self.input_dim is not None:
            specs.append(ParamSpec(f"{n}/W", (self.input_dim, 4 * s), self.dtype, "glorot",
                                   fans=(self.input_dim, s)))
        specs.append(ParamSpec(f"{n}/U", (2 * s, 5 * s), self.dtype, "glorot", fans=(s, s)))
        specs.append(ParamSpec(f"{n}/b", (4 * s,), self.dtype, "zeros"))
        return specs

    def _expand(self, m):
        # [.., 4s] blocks (i, f, o, u) -> [.., 5s] blocks (i, f, f, o, u)
        s = self.state_size
        return np.concatenate([m[..., :2 * s], m[..., s:]], axis=-1)

    def _fold(self, m):
        # adjoint of _expand
        s = self.state_size
        return np.concatenate([m[..., :s], m[..., s:2 * s] + m[..., 2 * s:3 * s], m[..., 3 * s:]],
                              axis=-1)

    def forward(self, params, inputs):
        s, n = self.state_size, self.name
        if self.input_dim is None:
            x = None
            hl, cl, hr, cr = inputs
        else:
            x, hl, cl, hr, cr = inputs
        hh = np.concatenate([hl, hr], axis=1)
        # pre-activations of i, f_L, f_R, o, u side by side
        z = tc.matmul(hh, params[f"{n}/U"])
        z += self._expand(params[f"{n}/b"])
        if x is not None:
            z += tc.matmul(x, self._expand(params[f"{n}/W"]))
        gates = tc.ew_unary("sigmoid", z[:, :4 * s])
        u = tc.ew_unary("tanh", z[:, 4 * s:])
        i, fl, fr, o = (gates[:, k * s:(k + 1) * s] for k in range(4))
        c = i * u + fl * cl + fr * cr
        tanh_c = tc.ew_unary("tanh", c)
        h = o * tanh_c
        return [h, c], (x, hh, cl, cr, gates, u, tanh_c)

    def backward(self, params, cache, grads):
        s, n = self.state_size, self.name
        x, hh, cl, cr, gates, u, tanh_c = cache
        i, fl, fr, o = (gates[:, k * s:(k + 1) * s] for k in range(4))
        gh, gc = grads
        dc = gc + gh * o * (1 - tanh_c * tanh_c)
        dz = np.empty((hh.shape[0], 5 * s), dtype=hh.dtype)
        dz[:, :s] = dc * u
        dz[:, s:2 * s] = dc * cl
        dz[:, 2 * s:3 * s] = dc * cr
        dz[:, 3 * s:4 * s] = gh * tanh_c
        dz[:, :4 * s] *= gates * (1 - gates)
        dz[:, 4 * s:] = dc * i * (1 - u * u)
        dhh, dU = tc.matmul_vjp(hh, params[f"{n}/U"], dz)
        pgrads = {f"{n}/U": dU, f"{n}/b": self._fold(dz.sum(axis=0))}
        state_grads = [dhh[:, :s], dc * fl, dhh[:, s:], dc * fr]
        if x is None:
            return state_grads, pgrads
        dx, dW5 = tc.matmul_vjp(x, self._expand(params[f"{n}/W"]), dz)
        pgrads[f"{n}/W"] = self._fold(dW5)
        return [dx] + state_grads, pgrads


@dataclass
class TreeLstmParams:
    """Unpacked per-gate weights of a :class:`TreeLSTMCell`.

    ``U_f[k][l]`` maps child ``l``'s hidden state into child ``k``'s forget
    gate, for ``k, l`` in ``L, R``.
    """

    W_i: np.ndarray | None
    W_f: np.ndarray | None
    W_o: np.ndarray | None
    W_u: np.ndarray | None
    U_i: tuple
    U_f: dict
    U_o: tuple
    U_u: tuple
    b_i: np.ndarray
    b_f: np.ndarray
    b_o: np.ndarray
    b_u: np.ndarray

    @classmethod
    def from_store(cls, params: dict, name: str) -> "TreeLstmParams":
        U, b = params[f"{name}/U"], params[f"{name}/b"]
        s = b.shape[0] // 4
        W = params.get(f"{name}/W")

        def cols(m, k):
            return m[:, k * s:(k + 1) * s]

        def rows(m):
            return m[:s], m[s:]

        ws = [None] * 4 if W is None else [cols(W, k) for k in range(4)]
        (u_i, u_fl, u_fr, u_o, u_u) = (rows(cols(U, k)) for k in range(5))
        u_f = {"L": {"L": u_fl[0], "R": u_fl[1]}, "R": {"L": u_fr[0], "R": u_fr[1]}}
        return cls(*ws, u_i, u_f, u_o, u_u, b[:s], b[s:2 * s], b[2 * s:3 * s], b[3 * s:])


def _sigmoid(z):
    return 1 / (1 + np.exp(-z))


def tree_lstm_cell(x, left, right, p: TreeLstmParams):
    """One Tree-LSTM step on unbatched vectors. ``x`` may be ``None`` when the
    cell has no input weights."""
    (hl, cl), (hr, cr) = left, right

    def wx(W):
        return 0 if W is None or x is None else x @ W

    i = _sigmoid(wx(p.W_i) + hl @ p.U_i[0] + hr @ p.U_i[1] + p.b_i)
    f_l = _sigmoid(wx(p.W_f) + hl @ p.U_f["L"]["L"] + hr @ p.U_f["L"]["R"] + p.b_f)
    f_r = _sigmoid(wx(p.W_f) + hl @ p.U_f["R"]["L"] + hr @ p.U_f["R"]["R"] + p.b_f)
    o = _sigmoid(wx(p.W_o) + hl @ p.U_o[0] + hr @ p.U_o[1] + p.b_o)
    u = np.tanh(wx(p.W_u) + hl @ p.U_u[0] + hr @ p.U_u[1] + p.b_u)
    c = i * u + f_l * cl + f_r * cr
    return o * np.tanh(c), c


def tree_arity(node) -> int:
    """1 for a leaf ``{"word": w}``, 2 for ``{"left": .., "right": ..}``;
    a ``"label"`` entry is ignored."""
    return 1 if "word" in node else 2


@dataclass
class TreeLSTMModel:
    loss: Block
    cell: TreeLSTMCell
    embedding: ops.Embedding
    head: ops.FC
    cross_entropy: ops.CrossEntropy
    state_size: int
    num_classes: int


def tree_lstm_encoder(embedding: ops.Embedding, cell: TreeLSTMCell, word_idx: dict) -> Block:
    """Recursive block: tree -> ``(h, c)`` at its root.

    Leaves run the cell on their word vector with zero child states;
    internal nodes run it on a zero input and the children's states.
    """
    d = TensorType(cell.dtype, (cell.state_size,))
    pair_t = TupleType((d, d))
    expr = ForwardDeclaration("tree")
    word = AllOf(
        InputTransform(itemgetter("word")) >> word2vec(embedding, word_idx),
        Zeros(pair_t),
        Zeros(pair_t),
    )
    pair = AllOf(
        Zeros(embedding.dim, dtype=cell.dtype),
        InputTransform(itemgetter("left")) >> expr(),
        InputTransform(itemgetter("right")) >> expr(),
    )
    expr.resolve_to(OneOf(tree_arity, [(1, word), (2, pair)]) >> Function(cell))
    return expr()


def _node_loss(head, ce) -> Block:
    """``((h, c), label) -> loss`` for one node."""
    return AllOf(GetItem(0) >> GetItem(0) >> Function(head), GetItem(1)) >> Function(ce)


def _all_node_encoder(embedding, cell, head, ce, word_idx) -> Block:
    """Recursive block: labelled tree -> ``((h, c), summed loss of the subtree)``."""
    d = TensorType(cell.dtype, (cell.state_size,))
    pair_t = TupleType((d, d))
    expr = ForwardDeclaration("labelled_tree")

    leaf = Composition(name="leaf")
    with leaf.scope():
        state = (AllOf(InputTransform(itemgetter("word")) >> word2vec(embedding, word_idx),
                       Zeros(pair_t), Zeros(pair_t)) >> Function(cell)).reads(leaf.input)
        label = (InputTransform(itemgetter("label")) >> Scalar("int32")).reads(leaf.input)
        leaf.output.reads(state, _node_loss(head, ce).reads(state, label))

    node = Composition(name="node")
    with node.scope():
        left = (InputTransform(itemgetter("left")) >> expr()).reads(node.input)
        right = (InputTransform(itemgetter("right")) >> expr()).reads(node.input)
        state = (AllOf(Zeros(embedding.dim, dtype=cell.dtype), GetItem(0), GetItem(1))
                 >> Function(cell)).reads(GetItem(0).reads(left), GetItem(0).reads(right))
        label = (InputTransform(itemgetter("label")) >> Scalar("int32")).reads(node.input)
        own = _node_loss(head, ce).reads(state, label)
        total = Sum().reads(own, GetItem(1).reads(left), GetItem(1).reads(right))
        node.output.reads(state, total)

    expr.resolve_to(OneOf(tree_arity, [(1, leaf), (2, node)]))
    return expr()


def build_tree_lstm(word_matrix, word_idx: dict, state_size: int, num_classes: int = 5,
                    all_nodes: bool = False, name: str = "tree_lstm") -> TreeLSTMModel:
    """Tree-LSTM sentiment classifier.

    Host input is a tree of dicts with a ``"label"`` at the root (and at every
    node when ``all_nodes``). The loss is the root cross-entropy, or the sum
    over all nodes when ``all_nodes`` is set.
    """
    word_matrix = np.asarray(word_matrix)
    if word_idx and max(word_idx.values()) >= word_matrix.shape[0]:
        raise ValueError("word_matrix has fewer rows than the vocabulary")
    dtype = word_matrix.dtype.name
    embedding = ops.Embedding(f"{name}/embedding", initializer=word_matrix, dtype=dtype)
    cell = TreeLSTMCell(f"{name}/cell", state_size, embedding.dim, dtype)
    head = ops.FC(f"{name}/head", num_classes)
    ce = ops.CrossEntropy(f"{name}/xent")
    if all_nodes:
        loss = _all_node_encoder(embedding, cell, head, ce, word_idx) >> GetItem(1)
    else:
        root = tree_lstm_encoder(embedding, cell, word_idx)
        label = InputTransform(itemgetter("label")) >> Scalar("int32")
        loss = AllOf(root >> GetItem(0) >> Function(head), label) >> Function(ce)
    return TreeLSTMModel(loss, cell, embedding, head, ce, state_size, num_classes)


def tree_lstm_logits(model: TreeLSTMModel, word_idx: dict) -> Block:
    """Root logits of the same model (shares its operations and parameters)."""
    return tree_lstm_encoder(model.embedding, model.cell, word_idx) >> GetItem(0) >> Function(model.head)


def tree_lstm_reference(tree, params: dict, word_idx: dict, name: str = "tree_lstm"):
    """Recursive evaluation of the root ``(h, c)`` straight from the parameters."""
    p = TreeLstmParams.from_store(params, f"{name}/cell")
    table = params[f"{name}/embedding/table"]
    s = p.b_i.shape[0]
    zero = (np.zeros(s, table.dtype), np.zeros(s, table.dtype))

    def walk(node):
        if "word" in node:
            return tree_lstm_cell(table[word_idx.get(node["word"]) or 0], zero, zero, p)
        x = np.zeros(table.shape[1], table.dtype)
        return tree_lstm_cell(x, walk(node["left"]), walk(node["right"]), p)

    return walk(tree)


def tree_lstm_loss_reference(tree, params: dict, word_idx: dict, name: str = "tree_lstm",
                             all_nodes: bool = False) -> float:
    p = TreeLstmParams.from_store(params, f"{name}/cell")
    table = params[f"{name}/embedding/table"]
    w, b = params[f"{name}/head/w"], params[f"{name}/head/b"]
    s = p.b_i.shape[0]
    zero = (np.zeros(s, table.dtype), np.zeros(s, table.dtype))

    def xent(h, label):
        z = h @ w + b
        z = z - z.max()
        return float(np.log(np.exp(z).sum()) - z[label])

    def walk(node):
        if "word" in node:
            state = tree_lstm_cell(table[word_idx.get(node["word"]) or 0], zero, zero, p)
            below = 0.0
        else:
            (sl, ll), (sr, lr) = walk(node["left"]), walk(node["right"])
            state = tree_lstm_cell(np.zeros(table.shape[1], table.dtype), sl, sr, p)
            below = ll + lr
        own = xent(state[0], node["label"]) if all_nodes else 0.0
        return state, own + below

    (h, _), total = walk(tree)
    return total if all_nodes else xent(h, tree["label"])


# ---------------------------------------------------------------------------
# Plain tree RNN and the benchmark tree model


class TreeRNNCell(ops.Operation):
    """``act([left; right] W + b)`` over two child vectors."""

    label = "tree_rnn"

    def __init__(self, name: str, state_size: int, activation: str | None = "tanh",
                 dtype: str = "float32"):
        super().__init__(name)
        self.state_size = state_size
        self.activation = activation
        self.dtype = dtype
        s = TensorType(dtype, (state_size,))
        self.input_type = TupleType((s, s))

    def output_type(self, in_type):
        return self.input_type.items[0]

    def param_specs(self, inputs):
        s = self.state_size
        return [ParamSpec(f"{self.name}/w", (2 * s, s), self.dtype, "glorot"),
                ParamSpec(f"{self.name}/b", (s,), self.dtype, "zeros")]

    def forward(self, params, inputs):
        x = np.concatenate(inputs, axis=1)
        pre = tc.matmul(x, params[f"{self.name}/w"]) + params[f"{self.name}/b"]
        y = pre if self.activation is None else tc.ew_unary(self.activation, pre)
        return [y], (x, pre, y)

    def backward(self, params, cache, grads):
        x, pre, y = cache
        g = grads[0]
        if self.activation is not None:
            g = tc.ew_unary_vjp(self.activation, pre, y, g)
        dx, dw = tc.matmul_vjp(x, params[f"{self.name}/w"], g)
        s = self.state_size
        return [dx[:, :s], dx[:, s:]], {f"{self.name}/w": dw, f"{self.name}/b": g.sum(axis=0)}


def is_leaf(tree) -> bool:
    """Host trees for the plain models: a leaf is a token, a node a pair."""
    return not isinstance(tree, (tuple, list))


def tree_rnn_block(embedding: ops.Operation, cell: ops.Operation) -> Block:
    """Token trees ``((w1, w3), w5)`` -> root vector. Tokens are ints."""
    expr = ForwardDeclaration("tree_rnn")
    leaf = Scalar("int32") >> Function(embedding)
    pair = Record([(0, expr()), (1, expr())]) >> Function(cell)
    expr.resolve_to(OneOf(lambda t: "leaf" if is_leaf(t) else "pair", {"leaf": leaf, "pair": pair}))
    return expr()


def tree_rnn_reference(tree, params: dict, embed_name: str, cell_name: str,
                       activation: str | None = "tanh"):
    table = params[f"{embed_name}/table"]
    w, b = params[f"{cell_name}/w"], params[f"{cell_name}/b"]

    def walk(t):
        if is_leaf(t):
            return table[int(t)]
        pre = np.concatenate([walk(t[0]), walk(t[1])]) @ w + b
        return pre if activation is None else tc.ew_unary(activation, pre)

    return walk(tree)


@dataclass
class BenchTreeModel:
    block: Block
    embedding: ops.Embedding
    cell: TreeLSTMCell
    state_size: int


def build_bench_tree(state_size: int, vocab_size: int = 64, dtype: str = "float32",
                     name: str = "bench") -> BenchTreeModel:
    """Tree model used by the benchmark: leaves look up their ``(h, c)``
    state in one table, internal nodes run the Tree-LSTM cell on their
    children. A tree with ``n`` leaves needs one lookup per leaf and
    ``n - 1`` cell applications."""
    embedding = ops.Embedding(f"{name}/leaf_state", vocab_size, state_size, dtype=dtype,
                              num_outputs=2)
    cell = TreeLSTMCell(f"{name}/cell", state_size, None, dtype)
    return BenchTreeModel(tree_rnn_block(embedding, cell), embedding, cell, state_size)


def bench_tree_reference(tree, params: dict, name: str = "bench"):
    p = TreeLstmParams.from_store(params, f"{name}/cell")
    table = params[f"{name}/leaf_state/table"]
    s = p.b_i.shape[0]

    def walk(t):
        if is_leaf(t):
            row = table[int(t)]
            return row[:s], row[s:]
        return tree_lstm_cell(None, walk(t[0]), walk(t[1]), p)

    return walk(tree)


# ---------------------------------------------------------------------------
# Weave module


@dataclass(frozen=True)
class WeaveConfig:
    """Feature widths of one weave module. ``atom_in``/``pair_in`` are ``n``
    and ``m``; every learnable function is an FC + relu layer."""

    atom_in: int
    pair_in: int
    atom_out: int
    pair_out: int
    hidden: int = 16
    dtype: str = "float32"


@dataclass
class WeaveParams:
    f_a: ops.FC
    f_p: ops.FC
    f_a_a: ops.FC
    f_a_p: ops.FC
    f_p_a: ops.FC
    f_p_p: ops.FC


def weave_params(cfg: WeaveConfig, prefix: str = "weave") -> WeaveParams:
    h = cfg.hidden
    return WeaveParams(
        f_a=ops.FC(f"{prefix}/f_a", cfg.atom_out, "relu"),
        f_p=ops.FC(f"{prefix}/f_p", cfg.pair_out, "relu"),
        f_a_a=ops.FC(f"{prefix}/f_a_a", h, "relu"),
        f_a_p=ops.FC(f"{prefix}/f_a_p", h, "relu"),
        f_p_a=ops.FC(f"{prefix}/f_p_a", h, "relu"),
        f_p_p=ops.FC(f"{prefix}/f_p_p", h, "relu"),
    )


def weave_module(p: WeaveParams) -> Composition:
    """``(seq<f[n]>, seq<seq<f[m]>>) -> (seq<f[n']>, seq<seq<f[m']>>)``.

    Atom ``i`` combines ``f_a_a(a_i)`` with the sum of ``f_p_a`` over its pair
    row; pair ``(i, j)`` combines ``f_a_p(a_i, a_j) + f_a_p(a_j, a_i)`` with
    ``f_p_p(p_ij)``.
    """
    a_i_to_p = Composition(name="a_i_to_p")
    with a_i_to_p.scope():
        a_x_i = Broadcast().reads(a_i_to_p.input[0])
        a_x = a_i_to_p.input[1]
        f_i_j = ZipWith(Concat() >> Function(p.f_a_p)).reads(a_x_i, a_x)
        f_j_i = ZipWith(Concat() >> Function(p.f_a_p)).reads(a_x, a_x_i)
        pairs = ZipWith(Sum()).reads(f_i_j, f_j_i)
        a_i_to_p.output.reads(pairs)

    weave = Composition(name="weave")
    with weave.scope():
        a_x = weave.input[0]
        p_x = weave.input[1]
        a_to_a = Map(Function(p.f_a_a)).reads(a_x)
        p_to_a = Map(Map(Function(p.f_p_a)) >> Sum()).reads(p_x)
        a_y = ZipWith(Concat() >> Function(p.f_a)).reads(a_to_a, p_to_a)
        a_to_p = ZipWith(a_i_to_p).reads(a_x, Broadcast().reads(a_x))
        p_to_p = Map(Map(Function(p.f_p_p))).reads(p_x)
        p_y = ZipWith(ZipWith(Concat() >> Function(p.f_p))).reads(a_to_p, p_to_p)
        weave.output.reads(a_y, p_y)
    return weave


def molecule_input(cfg: WeaveConfig) -> Block:
    """Host molecule ``{"atoms": [[..n]], "pairs": [[[..m]]]}`` -> weave input."""
    return Record([
        ("atoms", Map(Tensor([cfg.atom_in], cfg.dtype))),
        ("pairs", Map(Map(Tensor([cfg.pair_in], cfg.dtype)))),
    ])


def build_weave(cfgs: list[WeaveConfig], prefix: str = "weave") -> tuple[Block, list[WeaveParams]]:
    """Molecule reader followed by a stack of weave modules."""
    for a, b in zip(cfgs, cfgs[1:]):
        if (a.atom_out, a.pair_out) != (b.atom_in, b.pair_in):
            raise ValueError("stacked weave modules must agree on feature widths")
    params = [weave_params(c, f"{prefix}{k}") for k, c in enumerate(cfgs)]
    block = molecule_input(cfgs[0])
    for p in params:
        block = block >> weave_module(p)
    return block, params


def _fc_relu(params, name, x):
    return np.maximum(x @ params[f"{name}/w"] + params[f"{name}/b"], 0)


def weave_reference(atoms, pairs, params: dict, prefix: str = "weave0"):
    """Direct double loop over atoms; returns ``(a_y, p_y)`` as arrays of
    shape ``[N, n']`` and ``[N, N, m']``."""
    atoms = np.asarray(atoms)
    pairs = np.asarray(pairs)
    n_atoms = len(atoms)

    def f(name, x):
        return _fc_relu(params, f"{prefix}/{name}", x)

    a_y, p_y = [], []
    for i in range(n_atoms):
        pa = sum((f("f_p_a", pairs[i, j]) for j in range(n_atoms)), 0)
        a_y.append(f("f_a", np.concatenate([f("f_a_a", atoms[i]), pa])))
        row = []
        for j in range(n_atoms):
            ap = (f("f_a_p", np.concatenate([atoms[i], atoms[j]]))
                  + f("f_a_p", np.concatenate([atoms[j], atoms[i]])))
            row.append(f("f_p", np.concatenate([ap, f("f_p_p", pairs[i, j])])))
        p_y.append(row)
    return np.array(a_y), np.array(p_y)
