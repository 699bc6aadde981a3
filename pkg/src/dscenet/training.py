"""Adam optimization over bags, epoch scheduling, and model selection.

One bag per optimizer step, bags reshuffled every epoch. The shuffle stream
and the per-bag grid streams are derived from independent spawns of the run
seed so that ablation arms sharing a seed see identical data order. The
parameters with the best validation macro-AUC are retained (earlier epoch
wins ties) and every epoch appends one JSON record to the history.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import metrics as mt
from . import numerics as nm
from .data import FeatureBag
from .errors import ContractError, NumericalError
from .model import ModelParams, Variant, forward, forward_loss_nodes, predict_proba
from .numerics import Matrix

_SHUFFLE_STREAM = 0x5348
_GRID_STREAM = 0x4752


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    epochs: int = 200
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    variant: Variant = field(default_factory=Variant)

    def __post_init__(self) -> None:
        if self.learning_rate < 0:
            raise ContractError("learning_rate must be nonnegative")
        if self.epochs < 1:
            raise ContractError("epochs must be at least 1")


@dataclass
class AdamState:
    """First/second moment accumulators mirroring the parameter shapes."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: ModelParams) -> "AdamState":
        shapes = {k: m.shape for k, m in params.to_dict().items()}
        return cls(
            m={k: np.zeros(s) for k, s in shapes.items()},
            v={k: np.zeros(s) for k, s in shapes.items()},
        )


def adam_step(
    params: ModelParams,
    grads: dict[str, Matrix],
    state: AdamState,
    cfg: TrainConfig,
) -> ModelParams:
    """One bias-corrected Adam update; returns params with new tensors."""
    tensors = params.to_dict()
    missing = set(tensors) - set(grads)
    if missing:
        raise ContractError(f"gradients missing for {sorted(missing)}")
    state.t += 1
    b1, b2, eps, lr = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.learning_rate
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    updated: dict[str, Matrix] = {}
    for name, theta in tensors.items():
        g = grads[name].data
        if g.shape != theta.shape:
            raise ContractError(f"gradient shape {g.shape} != parameter shape {theta.shape} for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        step = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        updated[name] = Matrix._wrap(theta.data - step)
    return params.with_values(updated)


def grid_rng(seed: int, epoch: int, case_id: str) -> np.random.Generator:
    """Grid stream for one (run, epoch, case); stable across processes."""
    tag = zlib.crc32(case_id.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([seed, _GRID_STREAM, epoch, tag]))


def bag_gradients(
    bag: FeatureBag,
    params: ModelParams,
    mode: str,
    rng: np.random.Generator | None,
) -> tuple[float, dict[str, Matrix]]:
    """Loss and per-parameter gradients for one bag (zeros where unused)."""
    root, leaves, _ = forward_loss_nodes(bag, params, mode, rng)
    value = float(root.value.data[0, 0])
    nm.backward(root)
    grads = {}
    for name, leaf in leaves.items():
        if leaf.grad is None:
            grads[name] = Matrix.zeros(*leaf.value.shape)
        else:
            grads[name] = Matrix._wrap(leaf.grad)
    return value, grads


def evaluate(params: ModelParams, dataset: list[FeatureBag], variant: Variant | None = None) -> mt.MetricsReport:
    """Deterministic eval-mode pass over a dataset, reduced to a report."""
    if not dataset:
        raise ContractError("cannot evaluate an empty dataset")
    labels = []
    probs = []
    for bag in dataset:
        logits, _ = forward(bag, params, variant=variant, mode="eval")
        probs.append(predict_proba(logits).data[0])
        labels.append(bag.label)
    return mt.report(labels, np.stack(probs))


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_accuracy: float
    val_macro_auc: float

    def to_json(self) -> str:
        return json.dumps(
            {
                "epoch": self.epoch,
                "train_loss": self.train_loss,
                "val_accuracy": self.val_accuracy,
                "val_macro_auc": self.val_macro_auc,
            }
        )


def history_to_jsonl(history: list[EpochRecord]) -> str:
    return "".join(rec.to_json() + "\n" for rec in history)


def train(
    train_set: list[FeatureBag],
    val_set: list[FeatureBag],
    params: ModelParams,
    cfg: TrainConfig,
) -> tuple[ModelParams, list[EpochRecord]]:
    """Run the optimization loop; returns (best-validation params, history)."""
    if not train_set:
        raise ContractError("empty training set")
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, _SHUFFLE_STREAM]))
    state = AdamState.for_params(params)
    history: list[EpochRecord] = []
    best = params.copy()
    best_auc = -math.inf

    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(len(train_set))
        losses = []
        for i in order:
            bag = train_set[int(i)]
            rng = grid_rng(cfg.seed, epoch, bag.case_id) if cfg.variant.use_ds else None
            value, grads = bag_gradients(bag, params, "train", rng)
            if not math.isfinite(value):
                raise NumericalError(
                    f"non-finite loss at epoch {epoch}, case {bag.case_id!r}"
                )
            params = adam_step(params, grads, state, cfg)
            losses.append(value)
        report = evaluate(params, val_set) if val_set else None
        val_acc = report.accuracy if report else 0.0
        val_auc = report.macro_auc if report else 0.0
        history.append(EpochRecord(epoch, math.fsum(losses) / len(losses), val_acc, val_auc))
        if val_auc > best_auc:
            best_auc = val_auc
            best = params.copy()
    return best, history
