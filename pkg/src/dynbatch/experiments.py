"""Training runs shared by the acceptance suite and ``scripts/``."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import synthetic_sentiment
from .dyn_batch import Compiler
from .models import build_tree_lstm, tree_lstm_logits
from .runtime import adam_step, loss_and_grads, run_forward


@dataclass(frozen=True)
class OverfitConfig:
    n_trees: int = 32
    state_size: int = 32
    embed_dim: int = 16
    vocab_size: int = 20
    min_leaves: int = 2
    max_leaves: int = 8
    num_classes: int = 5
    max_epochs: int = 300
    lr: float = 0.01
    target_accuracy: float = 0.95
    seed: int = 0


@dataclass
class OverfitResult:
    epochs: int  # epochs run; equals max_epochs if the target was never reached
    accuracy: float
    reached: bool
    losses: list[float] = field(default_factory=list)
    accuracies: list[float] = field(default_factory=list)


def overfit_sentiment(cfg: OverfitConfig = OverfitConfig()) -> OverfitResult:
    """Full-batch Adam on synthetic labelled trees, one step per epoch,
    stopping once root accuracy on the training set reaches the target."""
    data = synthetic_sentiment(cfg.n_trees, cfg.vocab_size, cfg.min_leaves, cfg.max_leaves,
                               cfg.num_classes, cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    matrix = (0.1 * rng.standard_normal((cfg.vocab_size + 1, cfg.embed_dim))).astype("float32")
    model = build_tree_lstm(matrix, data.vocab, cfg.state_size, cfg.num_classes)
    hosts = [t.to_host() for t in data.trees]
    labels = np.array([t.label for t in data.trees])

    loss_c = Compiler(model.loss)
    params = loss_c.init_params(cfg.seed)
    loss_sched = loss_c.compile_batch(hosts)
    logit_sched = Compiler(tree_lstm_logits(model, data.vocab)).compile_batch(hosts)

    def accuracy() -> float:
        logits, _ = run_forward(logit_sched, params)
        return float(np.mean(np.argmax(np.stack(logits), axis=1) == labels))

    result = OverfitResult(0, accuracy(), False)
    for epoch in range(1, cfg.max_epochs + 1):
        loss, grads = loss_and_grads(loss_sched, params)
        adam_step(params, grads, lr=cfg.lr)
        result.epochs = epoch
        result.losses.append(loss)
        result.accuracy = accuracy()
        result.accuracies.append(result.accuracy)
        if result.accuracy >= cfg.target_accuracy:
            result.reached = True
            break
    return result
