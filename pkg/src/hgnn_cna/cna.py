"""Common-neighbour awareness: structural features, multi-hop mixing, correlation scores.

Pipeline per slot ``t`` (all slices ``N x N``)::

    s_t  = g_node(sum_{j in N(i)} g_edge(a_ijt))      structural feature per node
    Z_t  = sum_k beta_k A_t^k diag(s_t)
    Ch_t = Z_t Z_t^T                                   raw common-neighbour scores
    C_t  = row softmax of Ch_t over N(i) + {i}
    O_t  = r_c C_t + r_a Ahat_t                        refined aggregation weights

``A`` is the raw (unnormalized) adjacency so that ``Ch`` counts common
neighbours weighted by their squared structural feature.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor_core import ShapeError, as_tensor3, diagonal, facewise_product, slice_powers

ACTIVATIONS = ("tanh", "linear")


def _act(x: np.ndarray, kind: str) -> np.ndarray:
    return np.tanh(x) if kind == "tanh" else x


def _act_grad(out: np.ndarray, kind: str) -> np.ndarray:
    # derivative expressed through the activation output
    return 1.0 - out * out if kind == "tanh" else np.ones_like(out)


@dataclass
class CnaParams:
    """Weights of the structural feature generator plus hop and fusion weights.

    ``g_edge(a) = act(a * edge_w + edge_b)`` maps an edge value to an
    ``h_s``-vector; ``g_node(v) = act(v @ node_W + node_b) @ node_w + node_c``
    maps the summed vector to a scalar.
    """

    edge_w: np.ndarray
    edge_b: np.ndarray
    node_W: np.ndarray
    node_b: np.ndarray
    node_w: np.ndarray
    node_c: np.ndarray
    beta: np.ndarray
    r_c: float = 0.5
    r_a: float = 0.5
    activation: str = "tanh"
    learn_beta: bool = True

    def __post_init__(self):
        if self.beta.ndim != 1 or len(self.beta) < 1:
            raise ValueError("beta must hold one weight per hop, K >= 1")
        if self.r_c < 0 or self.r_a < 0:
            raise ValueError("fusion weights must be non-negative")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def K(self) -> int:
        return len(self.beta)

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        K: int = 2,
        hidden: int = 8,
        node_hidden: int = 8,
        r_c: float = 0.5,
        r_a: float = 0.5,
        learn_beta: bool = True,
    ) -> "CnaParams":
        if K < 1:
            raise ValueError("K must be >= 1")
        return cls(
            edge_w=glorot(rng, (hidden,), 1, hidden),
            edge_b=np.zeros(hidden),
            node_W=glorot(rng, (hidden, node_hidden), hidden, node_hidden),
            node_b=np.zeros(node_hidden),
            node_w=glorot(rng, (node_hidden,), node_hidden, 1),
            node_c=np.zeros(1),
            beta=1.0 / np.arange(1, K + 1),
            r_c=r_c,
            r_a=r_a,
            learn_beta=learn_beta,
        )

    def tensors(self) -> dict[str, np.ndarray]:
        out = {
            "cna.edge_w": self.edge_w,
            "cna.edge_b": self.edge_b,
            "cna.node_W": self.node_W,
            "cna.node_b": self.node_b,
            "cna.node_w": self.node_w,
            "cna.node_c": self.node_c,
        }
        if self.learn_beta:
            out["cna.beta"] = self.beta
        return out


def glorot(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape)


@dataclass
class CnaTrace:
    s: np.ndarray  # (T, N, 1)
    S_diag: np.ndarray
    Z: np.ndarray
    C_hat: np.ndarray
    C: np.ndarray
    O: np.ndarray
    cache: dict = field(default_factory=dict, repr=False)


def _struct_forward(a: np.ndarray, p: CnaParams) -> tuple[np.ndarray, dict]:
    t_idx, i_idx, j_idx = np.nonzero(a)
    vals = a[t_idx, i_idx, j_idx]
    hid = _act(vals[:, None] * p.edge_w + p.edge_b, p.activation)
    T, N, _ = a.shape
    pooled = np.zeros((T, N, len(p.edge_w)))
    np.add.at(pooled, (t_idx, i_idx), hid)
    node_h = _act(pooled @ p.node_W + p.node_b, p.activation)
    s = node_h @ p.node_w + p.node_c[0]
    cache = dict(t_idx=t_idx, i_idx=i_idx, vals=vals, hid=hid, pooled=pooled, node_h=node_h)
    return s, cache


def struct_features(a: np.ndarray, p: CnaParams) -> np.ndarray:
    """Structural feature tensor ``(T, N, 1)`` from the raw adjacency."""
    a = as_tensor3(a, "adjacency")
    s, _ = _struct_forward(a, p)
    return s[:, :, None]


def diag_embed(s: np.ndarray) -> np.ndarray:
    """``(T, N)`` or ``(T, N, 1)`` values to ``(T, N, N)`` diagonal slices."""
    s = np.asarray(s)
    if s.ndim == 3:
        if s.shape[2] != 1:
            raise ShapeError(f"expected a column tensor, got {s.shape}")
        s = s[:, :, 0]
    T, N = s.shape
    out = np.zeros((T, N, N))
    idx = np.arange(N)
    out[:, idx, idx] = s
    return out


def hop_mix(a: np.ndarray, s_diag: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """``Z_t = sum_k beta_k A_t^k S_t`` slice by slice."""
    beta = np.asarray(beta, dtype=float)
    if beta.ndim != 1 or len(beta) == 0:
        raise ValueError("need at least one hop weight (K >= 1)")
    powers = slice_powers(a, len(beta))
    mixed = sum(b * pk for b, pk in zip(beta, powers))
    return facewise_product(mixed, s_diag)


def cn_scores(z: np.ndarray) -> np.ndarray:
    """Gram slices ``Z_t Z_t^T``."""
    z = as_tensor3(z)
    return np.matmul(z, z.transpose(0, 2, 1))


def cn_oracle(a_t: np.ndarray, s_t: np.ndarray, i: int, j: int) -> float:
    """Sum of squared structural features over the shared neighbours of ``i`` and ``j``."""
    n_i = {k for k in range(len(a_t)) if a_t[i][k] != 0}
    n_j = {k for k in range(len(a_t)) if a_t[j][k] != 0}
    return float(sum(float(s_t[k]) ** 2 for k in n_i & n_j))


def neighbor_mask(a: np.ndarray) -> np.ndarray:
    """Boolean softmax support: neighbours of ``i`` plus ``i`` itself."""
    mask = np.asarray(a) != 0
    idx = np.arange(mask.shape[1])
    mask[:, idx, idx] = True
    return mask


def normalize_scores(c_hat: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Row softmax of the scores restricted to each node's neighbours and itself."""
    mask = neighbor_mask(a)
    masked = np.where(mask, c_hat, -np.inf)
    shifted = masked - masked.max(axis=2, keepdims=True)
    e = np.where(mask, np.exp(shifted), 0.0)
    return e / e.sum(axis=2, keepdims=True)


def fuse_weights(c: np.ndarray, a_hat: np.ndarray, r_c: float, r_a: float) -> np.ndarray:
    if np.shape(c) != np.shape(a_hat):
        raise ShapeError(f"cannot fuse {np.shape(c)} with {np.shape(a_hat)}")
    return r_c * c + r_a * a_hat


def cna_forward(a: np.ndarray, a_hat: np.ndarray, p: CnaParams) -> CnaTrace:
    a = as_tensor3(a, "adjacency")
    s, cache = _struct_forward(a, p)
    s_diag = diag_embed(s)
    powers = slice_powers(a, p.K)
    mixed = sum(b * pk for b, pk in zip(p.beta, powers))
    z = mixed * s[:, None, :]  # right-multiplying by a diagonal scales columns
    c_hat = cn_scores(z)
    c = normalize_scores(c_hat, a)
    o = fuse_weights(c, a_hat, p.r_c, p.r_a)
    cache.update(powers=powers, mixed=mixed, s=s)
    return CnaTrace(s[:, :, None], s_diag, z, c_hat, c, o, cache)


def cna_backward(tr: CnaTrace, d_o: np.ndarray, p: CnaParams) -> dict[str, np.ndarray]:
    """Gradients of the CNA weights given ``dL/dO``."""
    ca = tr.cache
    d_c = p.r_c * d_o
    # softmax Jacobian row-wise; entries outside the mask have C = 0 and drop out
    d_chat = tr.C * (d_c - np.sum(tr.C * d_c, axis=2, keepdims=True))
    d_z = np.matmul(d_chat + d_chat.transpose(0, 2, 1), tr.Z)
    s = ca["s"]
    d_mixed = d_z * s[:, None, :]
    d_s = np.einsum("tik,tik->tk", d_z, ca["mixed"])
    grads = {}
    if p.learn_beta:
        grads["cna.beta"] = np.array([np.sum(d_mixed * pk) for pk in ca["powers"]])

    node_h = ca["node_h"]
    grads["cna.node_w"] = np.einsum("tnh,tn->h", node_h, d_s)
    grads["cna.node_c"] = np.array([d_s.sum()])
    d_pre = d_s[:, :, None] * p.node_w * _act_grad(node_h, p.activation)
    grads["cna.node_W"] = np.einsum("tnh,tng->hg", ca["pooled"], d_pre)
    grads["cna.node_b"] = d_pre.sum(axis=(0, 1))
    d_pooled = d_pre @ p.node_W.T
    d_hid = d_pooled[ca["t_idx"], ca["i_idx"]] * _act_grad(ca["hid"], p.activation)
    grads["cna.edge_w"] = ca["vals"] @ d_hid
    grads["cna.edge_b"] = d_hid.sum(axis=0)
    return grads


__all__ = [
    "CnaParams",
    "CnaTrace",
    "cn_oracle",
    "cn_scores",
    "cna_backward",
    "cna_forward",
    "diag_embed",
    "diagonal",
    "fuse_weights",
    "hop_mix",
    "neighbor_mask",
    "normalize_scores",
    "struct_features",
]
