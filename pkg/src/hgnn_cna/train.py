"""Adam, the early-stopping training loop, metrics and the gradient checker."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable, TextIO

import numpy as np

from .graph_data import DynamicGraph, SampleSet, SplitPlan, balanced_samples
from .model import (
    ModelParams,
    backward,
    causal_loss_and_grads,
    causal_predict,
    forward,
    objective,
    predict,
)
from .tensor_core import Transform

logger = logging.getLogger(__name__)

LR_GRID = (0.1, 0.01, 0.02, 0.05, 0.001, 0.002)
ALPHA_GRID = (0.01, 0.005, 0.001, 0.0005)

# salts for the sample streams derived from the run seed
_TRAIN_STREAM, _VAL_STREAM, _TEST_STREAM = 1, 2, 3


class TrainingDiverged(FloatingPointError):
    def __init__(self, iteration: int, value: float):
        super().__init__(f"loss became non-finite ({value}) at iteration {iteration}")
        self.iteration = iteration


@dataclass
class TrainConfig:
    lr: float = 0.01
    alpha: float = 0.001
    max_iters: int = 300
    patience: int = 10
    seed: int = 0
    threshold: float = 0.5
    lr_grid: tuple[float, ...] = LR_GRID
    alpha_grid: tuple[float, ...] = ALPHA_GRID

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    state.step += 1
    bc1 = 1.0 - beta1**state.step
    bc2 = 1.0 - beta2**state.step
    for name, x in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(x)
            state.v[name] = np.zeros_like(x)
        m, v = state.m[name], state.v[name]
        if m.shape != x.shape:
            raise ValueError(f"optimizer state for {name} has shape {m.shape}, parameter {x.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        x -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return state


@dataclass
class EvalReport:
    f1: float
    accuracy: float
    confusion: tuple[int, int, int, int]  # TP, FP, TN, FN
    loss_history: list[float] = field(default_factory=list)
    best_iter: int = -1
    per_slot: dict[int, tuple[float, float]] = field(default_factory=dict)

    @property
    def n_samples(self) -> int:
        return sum(self.confusion)

    def to_text(self) -> str:
        tp, fp, tn, fn = self.confusion
        lines = [
            f"f1 {self.f1:.6f}",
            f"accuracy {self.accuracy:.6f}",
            f"confusion tp={tp} fp={fp} tn={tn} fn={fn}",
            f"best_iter {self.best_iter}",
            f"iterations {len(self.loss_history)}",
        ]
        lines += [f"slot {t} f1 {f:.6f} accuracy {a:.6f}" for t, (f, a) in sorted(self.per_slot.items())]
        return "\n".join(lines) + "\n"


def classification_scores(y_true: np.ndarray, y_pred: np.ndarray) -> tuple[float, float, tuple[int, int, int, int]]:
    y_true = np.asarray(y_true).astype(bool)
    y_pred = np.asarray(y_pred).astype(bool)
    tp = int(np.sum(y_true & y_pred))
    fp = int(np.sum(~y_true & y_pred))
    tn = int(np.sum(~y_true & ~y_pred))
    fn = int(np.sum(y_true & ~y_pred))
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    acc = (tp + tn) / len(y_true)
    return f1, acc, (tp, fp, tn, fn)


def evaluate(probs: np.ndarray, samples: SampleSet, threshold: float = 0.5) -> EvalReport:
    """F1 and accuracy of thresholded link probabilities, overall and per slot."""
    if len(samples) == 0:
        raise ValueError("cannot evaluate an empty sample set")
    pred = np.asarray(probs) >= threshold
    f1, acc, conf = classification_scores(samples.y, pred)
    per_slot = {}
    for t in np.unique(samples.t).tolist():
        sel = samples.t == t
        pf, pa, _ = classification_scores(samples.y[sel], pred[sel])
        per_slot[t] = (pf, pa)
    return EvalReport(f1, acc, conf, per_slot=per_slot)


def evaluate_model(
    g: DynamicGraph, p: ModelParams, samples: SampleSet, tf: Transform, threshold: float = 0.5
) -> EvalReport:
    return evaluate(causal_predict(g, p, samples, tf), samples, threshold)


def target_slots(g: DynamicGraph, slots, lag: int) -> list[int]:
    """Slots that can be predicted: a preceding embedding slot exists and links are present."""
    return [t for t in slots if t >= lag and g.edges_per_slot[t]]


def fixed_samples(g: DynamicGraph, slots, lag: int, seed: int, stream: int) -> SampleSet:
    seq = np.random.SeedSequence([seed, stream])
    return balanced_samples(g, target_slots(g, slots, lag), int(seq.generate_state(1)[0]))


@dataclass
class TrainResult:
    params: ModelParams
    report: EvalReport
    records: list[dict]


def train_loop(
    g: DynamicGraph,
    split: SplitPlan,
    params: ModelParams,
    cfg: TrainConfig,
    tf: Transform | None = None,
    log: TextIO | None = None,
    on_iter: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Full-batch Adam with early stopping on validation F1.

    Each iteration scores the current parameters on the validation pairs,
    takes one gradient step on the training pairs (all positives plus an
    equal number of freshly drawn negatives) and stops after ``max_iters``
    or ``patience`` iterations without a strictly better validation F1.
    The parameters that achieved the best validation F1 are returned.

    Slot-mixing transforms score every target slot on a copy of the graph
    with that slot and all later ones hidden (see :func:`causal_predict`).
    """
    tf = tf or Transform.identity(g.n_slots)
    params.alpha = cfg.alpha
    train_t = target_slots(g, split.train_slots, params.lag)
    if not train_t:
        raise ValueError("no trainable target slots in the training split")
    val = fixed_samples(g, split.val_slots, params.lag, cfg.seed, _VAL_STREAM)
    if not len(val):
        raise ValueError("validation split has no links to score")

    state = AdamState()
    best_f1, best_iter, best = -1.0, -1, params.copy()
    best_report: EvalReport | None = None
    stale = 0
    losses: list[float] = []
    records: list[dict] = []
    for it in range(cfg.max_iters):
        seed_it = int(np.random.SeedSequence([cfg.seed, _TRAIN_STREAM, it]).generate_state(1)[0])
        batch = balanced_samples(g, train_t, seed_it)
        if tf.is_identity:
            tr = forward(g, params, tf)
            rep = evaluate(predict(tr.H, val, params), val, cfg.threshold)
            value, grads = backward(tr, batch, params)
        else:
            rep = evaluate(causal_predict(g, params, val, tf), val, cfg.threshold)
            value, grads = causal_loss_and_grads(g, params, batch, tf)
        if not np.isfinite(value) or not all(np.all(np.isfinite(v)) for v in grads.values()):
            raise TrainingDiverged(it, value)
        losses.append(value)
        rec = {"iter": it, "train_loss": value, "val_f1": rep.f1, "val_accuracy": rep.accuracy}
        records.append(rec)
        if log is not None:
            log.write(json.dumps(rec) + "\n")
        if on_iter is not None:
            on_iter(rec)

        if rep.f1 > best_f1:
            best_f1, best_iter, best, best_report, stale = rep.f1, it, params.copy(), rep, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
        adam_step(params.tensors(), grads, state, cfg.lr)
        params.touch()

    assert best_report is not None
    best_report.loss_history = losses
    best_report.best_iter = best_iter
    return TrainResult(best, best_report, records)


def held_out_report(g: DynamicGraph, split: SplitPlan, p: ModelParams, cfg: TrainConfig, tf: Transform | None = None) -> EvalReport:
    """Held-out metrics on the test slots with a seeded negative set."""
    tf = tf or Transform.identity(g.n_slots)
    samples = fixed_samples(g, split.test_slots, p.lag, cfg.seed, _TEST_STREAM)
    if not len(samples):
        raise ValueError("test split has no links to score")
    return evaluate_model(g, p, samples, tf, cfg.threshold)


# ---------------------------------------------------------------------------
# gradient checking

GROUPS = ("layer weights", "biases", "decoder", "g_edge", "g_node", "beta")


def param_group(name: str) -> str:
    if name.startswith("layer"):
        return "layer weights" if name.endswith(".W") else "biases"
    if name.startswith("dec."):
        return "decoder"
    if name.startswith("cna.edge"):
        return "g_edge"
    if name.startswith("cna.node"):
        return "g_node"
    if name == "cna.beta":
        return "beta"
    raise KeyError(name)


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    tol: float
    transform: str

    @property
    def max_error(self) -> float:
        return max(self.errors.values())

    @property
    def passed(self) -> bool:
        return self.max_error < self.tol

    def failing(self) -> dict[str, float]:
        return {k: v for k, v in self.errors.items() if not v < self.tol}


def grad_check(
    g: DynamicGraph,
    p: ModelParams,
    samples: SampleSet,
    tf: Transform,
    h: float = 1e-5,
    tol: float = 1e-4,
    corrupt: str | None = None,
) -> GradCheckReport:
    """Compare analytic gradients against central differences, per parameter group.

    The error of a group is ``max|analytic - numeric| / max(max|analytic|, max|numeric|)``
    over all of its entries.  ``corrupt`` names a tensor whose analytic
    gradient is doubled, to confirm the check can fail.
    """
    _, grads = backward(forward(g, p, tf), samples, p)
    if corrupt is not None:
        grads[corrupt] = grads[corrupt] * 2.0
    diff: dict[str, float] = {}
    scale: dict[str, float] = {}
    for name, arr in p.tensors().items():
        num = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + h
            up = objective(g, p, samples, tf)
            arr[idx] = orig - h
            down = objective(g, p, samples, tf)
            arr[idx] = orig
            num[idx] = (up - down) / (2 * h)
        grp = param_group(name)
        diff[grp] = max(diff.get(grp, 0.0), float(np.max(np.abs(num - grads[name]), initial=0.0)))
        scale[grp] = max(scale.get(grp, 0.0), float(np.max(np.abs(num), initial=0.0)), float(np.max(np.abs(grads[name]), initial=0.0)))
    errors = {k: (diff[k] / scale[k] if scale[k] > 0 else 0.0) for k in diff}
    return GradCheckReport(errors, tol, tf.kind)


def sweep(
    g: DynamicGraph,
    split: SplitPlan,
    make_params: Callable[[], ModelParams],
    cfg: TrainConfig,
    tf: Transform | None = None,
) -> tuple[TrainConfig, TrainResult, list[tuple[float, float, float]]]:
    """Train once per ``(lr, alpha)`` grid point; keep the best validation F1."""
    best = None
    table = []
    for lr in cfg.lr_grid:
        for alpha in cfg.alpha_grid:
            c = TrainConfig(lr, alpha, cfg.max_iters, cfg.patience, cfg.seed, cfg.threshold, cfg.lr_grid, cfg.alpha_grid)
            try:
                res = train_loop(g, split, make_params(), c, tf)
            except TrainingDiverged as exc:
                logger.warning("lr=%g alpha=%g diverged: %s", lr, alpha, exc)
                continue
            table.append((lr, alpha, res.report.f1))
            if best is None or res.report.f1 > best[1].report.f1:
                best = (c, res)
    if best is None:
        raise TrainingDiverged(-1, float("nan"))
    return best[0], best[1], table
