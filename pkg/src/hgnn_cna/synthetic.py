"""Synthetic dynamic graphs with planted common-neighbour structure."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .graph_data import DynamicGraph, init_features, split_temporal


def _symmetric(upper: np.ndarray) -> np.ndarray:
    a = np.triu(upper, k=1)
    return a + a.T


def triadic_closure_graph(
    n_nodes: int = 100,
    n_slots: int = 12,
    group_size: int = 10,
    p_group: float = 0.3,
    max_closures: int = 200,
    n_features: int = 32,
    regroup: bool = True,
    noise_edges: int = 0,
    seed: int = 0,
) -> DynamicGraph:
    """Snapshots in which links at ``t + 1`` close pairs that had two or more common neighbours at ``t``.

    Every slot has three edge sources:

    * activity: nodes are shuffled into fresh groups of ``group_size`` and
      each within-group pair links with probability ``p_group``;
    * noise: ``noise_edges`` pairs drawn uniformly from all pairs;
    * closure: up to ``max_closures`` pairs drawn uniformly from those with at
      least two common neighbours in the previous slot.

    With ``regroup`` the groups are redrawn each slot, so activity links
    carry no information about the next slot and the closure links are the
    predictable part.  Without it the groups persist as communities.
    """
    rng = np.random.default_rng(seed)
    n = n_nodes
    iu, ju = np.triu_indices(n, k=1)
    slices: list[np.ndarray] = []
    group = np.empty(n, dtype=np.int64)
    for t in range(n_slots):
        if regroup or t == 0:
            group[rng.permutation(n)] = np.arange(n) // group_size
        same = group[:, None] == group[None, :]
        a = _symmetric((same & (rng.random((n, n)) < p_group)).astype(float))
        if noise_edges:
            pick = rng.choice(len(iu), size=noise_edges, replace=False)
            a[iu[pick], ju[pick]] = 1.0
            a[ju[pick], iu[pick]] = 1.0
        if slices:
            prev = slices[-1]
            cand = np.nonzero((prev @ prev)[iu, ju] >= 2)[0]
            pick = rng.choice(cand, size=min(max_closures, len(cand)), replace=False)
            a[iu[pick], ju[pick]] = 1.0
            a[ju[pick], iu[pick]] = 1.0
        slices.append(a)
    g = DynamicGraph(np.stack(slices))
    return g.with_features(init_features(g, n_features, "degree", seed=seed + 1))


@dataclass
class AblationResult:
    with_cna: list[float]
    without_cna: list[float]
    seconds: float

    @property
    def gap(self) -> float:
        return float(np.mean(self.with_cna) - np.mean(self.without_cna))


def directional_ablation(
    seeds=range(10),
    n_nodes: int = 100,
    n_slots: int = 12,
    lr: float = 0.001,
    alpha: float = 0.0005,
    activation: str = "tanh",
    transform: str = "dft",
    log=None,
) -> AblationResult:
    """Test F1 of the full model and of the ``r_c = 0`` variant on persistent-community graphs."""
    from .model import ModelParams
    from .tensor_core import Transform
    from .train import TrainConfig, held_out_report, train_loop

    start = time.perf_counter()
    scores: dict[float, list[float]] = {0.5: [], 0.0: []}
    for seed in seeds:
        g = triadic_closure_graph(n_nodes, n_slots, regroup=False, seed=seed)
        split = split_temporal(g.n_slots)
        tf = Transform.make(transform, g.n_slots)
        cfg = TrainConfig(lr=lr, alpha=alpha, seed=seed)
        for r_c in scores:
            p = ModelParams.init(
                g.n_slots, g.n_features, r_c=r_c, activation=activation, transform=transform, seed=seed
            )
            res = train_loop(g, split, p, cfg, tf)
            f1 = held_out_report(g, split, res.params, cfg, tf).f1
            scores[r_c].append(f1)
            if log:
                log(f"seed={seed} r_c={r_c} test_f1={f1:.4f} iters={len(res.records)}")
    return AblationResult(scores[0.5], scores[0.0], time.perf_counter() - start)
