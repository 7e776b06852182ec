"""Command line: tree benchmark, model demos, and debug dumps.

    dynbatch bench --mode dynamic full-dynamic --batch-size 1 8 32 64 --out report.csv
    dynbatch check-report report.csv
    dynbatch demo treelstm --input trees.txt --train 50
    dynbatch demo weave --input molecules.jsonl --dump-schedule
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import bench
from .blocks import TraceError, format_block
from .data import ParseError, build_vocab, load_molecules, load_trees
from .dyn_batch import Compiler, ScheduleError
from .models import (
    WeaveConfig,
    build_attention,
    build_text_pipeline,
    build_tree_lstm,
    build_weave,
    tree_lstm_logits,
)
from .runtime import ExecutionError, adam_step, loss_and_grads, mean_loss, run_forward

DEMOS = ("pipeline", "attention", "treelstm", "weave")


def _add_dump_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dump-block", action="store_true",
                   help="print the block tree with inferred types")
    p.add_argument("--dump-schedule", action="store_true",
                   help="print the compiled schedule of the first batch")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dynbatch", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    b = sub.add_parser("bench", help="time manual, dynamic and full-dynamic tree batching")
    b.add_argument("--mode", nargs="+", default=["manual", "dynamic", "full-dynamic"],
                   help="one or more of manual, dynamic, full-dynamic")
    b.add_argument("--phase", nargs="+", default=["infer"], choices=bench.PHASES)
    b.add_argument("--batch-size", nargs="+", type=int, default=[1, 8, 32, 64, 256])
    b.add_argument("--tree-size", type=int, default=128, help="leaves per tree")
    b.add_argument("--state-size", type=int, default=64)
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--shape-mode", choices=("fixed", "random"), default=None,
                   help="override the tree shapes (default: random for full-dynamic only)")
    b.add_argument("--threads", type=int, default=1,
                   help="worker threads for the runtime and the BLAS library")
    b.add_argument("--include-compile", action="store_true",
                   help="count tracing and scheduling in the timed region")
    b.add_argument("--out", help="CSV report path")
    _add_dump_flags(b)

    c = sub.add_parser("check-report", help="validate a benchmark CSV")
    c.add_argument("path")

    d = sub.add_parser("demo", help="run a model over an input file")
    d.add_argument("model", choices=DEMOS)
    d.add_argument("--input", required=True, help="input file (format depends on the model)")
    d.add_argument("--train", type=int, default=0, metavar="EPOCHS",
                   help="Adam epochs over the whole file before reporting")
    d.add_argument("--lr", type=float, default=0.01)
    d.add_argument("--state-size", type=int, default=16)
    d.add_argument("--seed", type=int, default=0)
    _add_dump_flags(d)
    return parser


# ---------------------------------------------------------------------------
# bench


def cmd_bench(args, out) -> int:
    configs = [
        bench.BenchConfig(batch_size=bs, tree_size=args.tree_size, state_size=args.state_size,
                          mode=mode, phase=phase, repeats=args.repeats, seed=args.seed,
                          out=args.out, shape_mode=args.shape_mode, threads=args.threads,
                          include_compile=args.include_compile)
        for phase in args.phase for mode in args.mode for bs in args.batch_size
    ]
    if args.dump_block or args.dump_schedule:
        cfg = configs[0]
        model, compiler, _ = bench.make_model(cfg)
        if args.dump_block:
            print(format_block(model.block), file=out)
        if args.dump_schedule:
            print(compiler.compile_batch(bench.make_trees(cfg)).dump(), file=out)
    with threadpool_limits(limits=args.threads):
        report = bench.run_benchmark(configs)
    print(report.to_text(), file=out)
    if args.out:
        print(f"wrote {args.out}", file=out)
    return 0


def cmd_check_report(args, out) -> int:
    rows = bench.check_report(args.path)
    print(f"{args.path}: {len(rows)} rows ok", file=out)
    return 0


# ---------------------------------------------------------------------------
# demos


def _read_pipeline(path):
    """``label<TAB>sentence`` per line."""
    examples = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        label, sep, text = line.partition("\t")
        if not sep or not label.strip().isdigit():
            raise ValueError(f"{path}:{n}: expected 'label<TAB>text'")
        examples.append({"text": text, "label": int(label)})
    return examples


def _read_jsonl(path, key):
    rows = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rows.append(json.loads(line)[key])
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise ValueError(f"{path}:{n}: {e}") from None
    return rows


def _word_matrix(vocab, dim, seed):
    rng = np.random.default_rng(seed)
    return (0.1 * rng.standard_normal((len(vocab) + 1, dim))).astype("float32")


def _dump(args, block, compiler, inputs, out):
    if args.dump_block:
        print(format_block(block), file=out)
    if args.dump_schedule:
        print(compiler.compile_batch(inputs).dump(), file=out)


def _train(compiler, inputs, params, epochs, lr, out, every=None):
    schedule = compiler.compile_batch(inputs)
    every = every or max(1, epochs // 10)
    for epoch in range(1, epochs + 1):
        loss, grads = loss_and_grads(schedule, params)
        adam_step(params, grads, lr=lr)
        if epoch % every == 0 or epoch == epochs:
            print(f"epoch {epoch:4d} loss {loss:.6f}", file=out)


def demo_pipeline(args, out) -> int:
    examples = _read_pipeline(args.input)
    vocab = {}
    for ex in examples:
        for w in ex["text"].split():
            vocab.setdefault(w, len(vocab) + 1)
    n_classes = max(ex["label"] for ex in examples) + 1
    model = build_text_pipeline(_word_matrix(vocab, args.state_size, args.seed), vocab,
                                args.state_size, n_classes)
    compiler = Compiler(model.loss)
    params = compiler.init_params(args.seed)
    _dump(args, model.loss, compiler, examples, out)
    if args.train:
        _train(compiler, examples, params, args.train, args.lr, out)
    loss, losses, _ = mean_loss(compiler.compile_batch(examples), params, "infer")
    for ex, l in zip(examples, losses):
        print(f"{l:.6f}\t{ex['text']}", file=out)
    print(f"mean loss {loss:.6f}", file=out)
    return 0


def demo_attention(args, out) -> int:
    if args.train:
        raise ValueError("the attention demo has no labels to train on")
    seqs = _read_jsonl(args.input, "h")
    widths = {len(v) for s in seqs for v in s}
    if len(widths) != 1:
        raise ValueError("every vector in 'h' must have the same length")
    model = build_attention(widths.pop())
    compiler = Compiler(model.block)
    params = compiler.init_params(args.seed)
    _dump(args, model.block, compiler, seqs, out)
    results, _ = run_forward(compiler.compile_batch(seqs), params)
    for s, c in zip(seqs, results):
        print(f"T={len(s)}\t" + " ".join(f"{x:.6f}" for x in c), file=out)
    return 0


def demo_treelstm(args, out) -> int:
    trees = load_trees(args.input)
    if any(t.label is None for t in trees):
        raise ValueError("every tree needs a root label, e.g. 3:(a b)")
    vocab = build_vocab(trees)
    n_classes = max(max(n.label for n in t.nodes() if n.label is not None) for t in trees) + 1
    model = build_tree_lstm(_word_matrix(vocab, args.state_size, args.seed), vocab,
                            args.state_size, num_classes=max(n_classes, 2))
    compiler = Compiler(model.loss)
    params = compiler.init_params(args.seed)
    hosts = [t.to_host() for t in trees]
    _dump(args, model.loss, compiler, hosts, out)
    if args.train:
        _train(compiler, hosts, params, args.train, args.lr, out)
    logits_c = Compiler(tree_lstm_logits(model, vocab))
    logits, _ = run_forward(logits_c.compile_batch(hosts), params)
    correct = 0
    for t, z in zip(trees, logits):
        pred = int(np.argmax(z))
        correct += pred == t.label
        print(f"pred {pred} label {t.label}\t{t}", file=out)
    print(f"root accuracy {correct / len(trees):.4f}", file=out)
    return 0


def demo_weave(args, out) -> int:
    if args.train:
        raise ValueError("the weave demo has no labels to train on")
    mols = load_molecules(args.input)
    n, m = mols[0].atoms.shape[1], mols[0].pairs.shape[2]
    if any(x.atoms.shape[1] != n or x.pairs.shape[2] != m for x in mols):
        raise ValueError("all molecules must share atom and pair feature widths")
    cfg = WeaveConfig(n, m, args.state_size, args.state_size)
    block, _ = build_weave([cfg])
    compiler = Compiler(block)
    params = compiler.init_params(args.seed)
    hosts = [x.to_host() for x in mols]
    _dump(args, block, compiler, hosts, out)
    results, _ = run_forward(compiler.compile_batch(hosts), params)
    for k, (a_y, p_y) in enumerate(results):
        a_y, p_y = np.array(a_y), np.array(p_y)
        sym = np.abs(p_y - p_y.transpose(1, 0, 2)).max()
        print(f"molecule {k}: atoms {list(a_y.shape)} pairs {list(p_y.shape)} "
              f"mean atom feature {a_y.mean():.6f} pair asymmetry {sym:.2e}", file=out)
    return 0


_DEMO_FNS = {"pipeline": demo_pipeline, "attention": demo_attention,
             "treelstm": demo_treelstm, "weave": demo_weave}


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    args = build_parser().parse_args(argv)
    try:
        if args.command == "bench":
            return cmd_bench(args, out)
        if args.command == "check-report":
            return cmd_check_report(args, out)
        return _DEMO_FNS[args.model](args, out)
    except (bench.ConfigError, ParseError, TraceError, ScheduleError, ExecutionError,
            ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
