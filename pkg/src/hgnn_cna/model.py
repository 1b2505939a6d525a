"""High-order GNN with common-neighbour-refined aggregation, link decoder and loss.

Layer ``l`` computes ``H_l = act(O * H_{l-1} * W_l + b_l)`` where ``*`` is the
t-product and ``O`` the refined aggregation tensor from :mod:`hgnn_cna.cna`.
A pair ``(i, j)`` labelled at slot ``t`` is scored from the embeddings of
slot ``t - lag`` by a one-hidden-layer MLP with a terminal sigmoid.

Gradients are derived by hand; :func:`hgnn_cna.train.grad_check` verifies
them against central differences.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cna import CnaParams, CnaTrace, cna_backward, cna_forward, glorot
from .graph_data import DynamicGraph, SampleSet, normalize_adjacency
from .tensor_core import Transform, sigmoid, t_product, t_product_backward

CHECKPOINT_MAGIC = b"HCNA"
CHECKPOINT_VERSION = 1
LAYER_ACTIVATIONS = ("sigmoid", "tanh")


class StaleTraceError(RuntimeError):
    """The trace was produced with parameters that have since been updated."""


def _layer_act(x: np.ndarray, kind: str) -> np.ndarray:
    return sigmoid(x) if kind == "sigmoid" else np.tanh(x)


def _layer_act_grad(h: np.ndarray, kind: str) -> np.ndarray:
    return h * (1.0 - h) if kind == "sigmoid" else 1.0 - h * h


@dataclass
class ModelParams:
    """The full learnable parameter set plus the settings that shape it."""

    weights: list[np.ndarray]  # each (T, F_in, F_out)
    biases: list[np.ndarray] | None  # each (T, F_out), None in strict mode
    dec_W: np.ndarray  # (2F, h_d)
    dec_b: np.ndarray  # (h_d,)
    dec_w: np.ndarray  # (h_d,)
    dec_c: np.ndarray  # (1,)
    cna: CnaParams
    alpha: float = 0.0
    activation: str = "sigmoid"
    lag: int = 1
    version: int = field(default=0, compare=False)

    def __post_init__(self):
        if not self.weights:
            raise ValueError("need at least one layer")
        for a, b in zip(self.weights, self.weights[1:]):
            if a.shape[2] != b.shape[1] or a.shape[0] != b.shape[0]:
                raise ValueError(f"layer shapes do not chain: {a.shape} -> {b.shape}")
        if self.biases is not None and len(self.biases) != len(self.weights):
            raise ValueError("one bias per layer required")
        if self.dec_W.shape[0] != 2 * self.weights[-1].shape[2]:
            raise ValueError("decoder input must be twice the embedding width")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.activation not in LAYER_ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.lag < 0:
            raise ValueError("lag must be >= 0")

    @classmethod
    def init(
        cls,
        n_slots: int,
        in_features: int,
        hidden: int = 32,
        n_layers: int = 2,
        decoder_hidden: int = 32,
        K: int = 2,
        r_c: float = 0.5,
        r_a: float = 0.5,
        alpha: float = 0.0,
        bias: bool = True,
        learn_beta: bool = True,
        activation: str = "sigmoid",
        lag: int = 1,
        transform: str = "identity",
        seed: int = 0,
    ) -> "ModelParams":
        """Glorot-uniform weights drawn per slice from a seeded generator.

        A slot-mixing ``transform`` sums ``T`` slice products per output slice,
        so the layer weights are shrunk by ``sqrt(T)`` to keep the
        pre-activations in range.
        """
        if n_layers < 1:
            raise ValueError("need at least one layer")
        rng = np.random.default_rng(seed)
        dims = [in_features] + [hidden] * n_layers
        gain = 1.0 if transform == "identity" else 1.0 / np.sqrt(n_slots)
        weights = [gain * glorot(rng, (n_slots, fi, fo), fi, fo) for fi, fo in zip(dims, dims[1:])]
        biases = [np.zeros((n_slots, fo)) for fo in dims[1:]] if bias else None
        cna = CnaParams.init(rng, K=K, r_c=r_c, r_a=r_a, learn_beta=learn_beta)
        return cls(
            weights=weights,
            biases=biases,
            dec_W=glorot(rng, (2 * hidden, decoder_hidden), 2 * hidden, decoder_hidden),
            dec_b=np.zeros(decoder_hidden),
            dec_w=glorot(rng, (decoder_hidden,), decoder_hidden, 1),
            dec_c=np.zeros(1),
            cna=cna,
            alpha=alpha,
            activation=activation,
            lag=lag,
        )

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def n_slots(self) -> int:
        return self.weights[0].shape[0]

    @property
    def cna_active(self) -> bool:
        return self.cna.r_c != 0

    def tensors(self) -> dict[str, np.ndarray]:
        """Learnable arrays by name; updating them in place updates the model."""
        out = {}
        for k, w in enumerate(self.weights):
            out[f"layer{k}.W"] = w
            if self.biases is not None:
                out[f"layer{k}.b"] = self.biases[k]
        out.update({"dec.W": self.dec_W, "dec.b": self.dec_b, "dec.w": self.dec_w, "dec.c": self.dec_c})
        out.update(self.cna.tensors())
        return out

    def touch(self) -> None:
        """Mark the parameters as changed so older traces are rejected."""
        self.version += 1

    def config(self) -> dict:
        return {
            "layers": [list(w.shape) for w in self.weights],
            "bias": self.biases is not None,
            "decoder_hidden": int(self.dec_W.shape[1]),
            "K": self.cna.K,
            "cna_hidden": int(self.cna.edge_w.shape[0]),
            "cna_node_hidden": int(self.cna.node_W.shape[1]),
            "cna_activation": self.cna.activation,
            "r_c": self.cna.r_c,
            "r_a": self.cna.r_a,
            "learn_beta": self.cna.learn_beta,
            "alpha": self.alpha,
            "activation": self.activation,
            "lag": self.lag,
        }

    def copy(self) -> "ModelParams":
        c = self.cna
        cna = CnaParams(
            c.edge_w.copy(), c.edge_b.copy(), c.node_W.copy(), c.node_b.copy(), c.node_w.copy(),
            c.node_c.copy(), c.beta.copy(), c.r_c, c.r_a, c.activation, c.learn_beta,
        )
        return ModelParams(
            weights=[w.copy() for w in self.weights],
            biases=None if self.biases is None else [b.copy() for b in self.biases],
            dec_W=self.dec_W.copy(),
            dec_b=self.dec_b.copy(),
            dec_w=self.dec_w.copy(),
            dec_c=self.dec_c.copy(),
            cna=cna,
            alpha=self.alpha,
            activation=self.activation,
            lag=self.lag,
        )


@dataclass
class ForwardTrace:
    H: np.ndarray
    layer_inputs: list[np.ndarray]
    aggregated: list[np.ndarray]  # O * H_{l-1}, reused for dW
    outputs: list[np.ndarray]
    cna: CnaTrace
    transform: Transform
    version: int
    O: np.ndarray | None = None  # aggregation tensor the layers saw, defaults to cna.O

    def __post_init__(self):
        if self.O is None:
            self.O = self.cna.O


def _check_inputs(g: DynamicGraph, p: ModelParams) -> None:
    if g.features is None:
        raise ValueError("graph has no node features")
    if g.features.shape[2] != p.weights[0].shape[1]:
        raise ValueError(f"features have width {g.features.shape[2]}, layer 1 expects {p.weights[0].shape[1]}")
    if g.n_slots != p.n_slots:
        raise ValueError(f"graph has {g.n_slots} slots, parameters {p.n_slots}")


def _layer_stack(o: np.ndarray, x: np.ndarray, p: ModelParams, tf: Transform):
    h = x
    inputs, aggregated, outputs = [], [], []
    for k, w in enumerate(p.weights):
        inputs.append(h)
        q = t_product(o, h, tf)
        pre = t_product(q, w, tf)
        if p.biases is not None:
            pre = pre + p.biases[k][:, None, :]
        h = _layer_act(pre, p.activation)
        aggregated.append(q)
        outputs.append(h)
    return h, inputs, aggregated, outputs


def forward(g: DynamicGraph, p: ModelParams, tf: Transform) -> ForwardTrace:
    """Embeddings for every node and slot, with everything backward needs."""
    _check_inputs(g, p)
    a_hat = normalize_adjacency(g.adjacency)
    ctr = cna_forward(g.adjacency, a_hat, p.cna)
    h, inputs, aggregated, outputs = _layer_stack(ctr.O, g.features, p, tf)
    return ForwardTrace(h, inputs, aggregated, outputs, ctr, tf, p.version)


def _masked_trace(g: DynamicGraph, ctr: CnaTrace, p: ModelParams, tf: Transform, last: int) -> ForwardTrace:
    """Layer pass as if every slot after ``last`` were empty.

    An empty slot has ``C = I`` and ``Ahat = I``, so its aggregation slice is
    ``(r_c + r_a) I`` whatever the CNA weights; the visible slices are those
    of the full graph because the CNA stage works slot by slot.
    """
    o = ctr.O.copy()
    x = g.features.copy()
    o[last + 1:] = (p.cna.r_c + p.cna.r_a) * np.eye(o.shape[1])
    x[last + 1:] = 0.0
    h, inputs, aggregated, outputs = _layer_stack(o, x, p, tf)
    return ForwardTrace(h, inputs, aggregated, outputs, ctr, tf, p.version, O=o)


def _embedding_slots(samples: SampleSet, p: ModelParams) -> np.ndarray:
    src = samples.t - p.lag
    if np.any(src < 0):
        raise IndexError(f"samples at slot < {p.lag} have no preceding embedding slot")
    return src


def _decode(h: np.ndarray, samples: SampleSet, p: ModelParams):
    ts = _embedding_slots(samples, p)
    n_slots, n_nodes = h.shape[:2]
    for arr in (samples.i, samples.j):
        if len(arr) and (arr.min() < 0 or arr.max() >= n_nodes):
            raise IndexError("node index out of range")
    if len(ts) and ts.max() >= n_slots:
        raise IndexError("slot index out of range")
    e = np.concatenate([h[ts, samples.i], h[ts, samples.j]], axis=1)
    hid = np.tanh(e @ p.dec_W + p.dec_b)
    logit = hid @ p.dec_w + p.dec_c[0]
    return logit, (ts, e, hid)


def predict(h: np.ndarray, samples: SampleSet, p: ModelParams) -> np.ndarray:
    """Link probabilities for every sample."""
    logit, _ = _decode(h, samples, p)
    return sigmoid(logit)


def decode_link(h: np.ndarray, i: int, j: int, t: int, p: ModelParams) -> float:
    """Probability of link ``(i, j)`` from the embeddings at slot ``t``.

    The concatenation is ordered, so ``decode_link(h, i, j, ...)`` and
    ``decode_link(h, j, i, ...)`` generally differ.
    """
    one = SampleSet(np.array([i]), np.array([j]), np.array([t + p.lag]), np.zeros(1))
    return float(predict(h, one, p)[0])


def l2_penalty(p: ModelParams) -> float:
    return p.alpha * sum(float(np.sum(v * v)) for v in p.tensors().values())


def loss(samples: SampleSet, preds: np.ndarray, p: ModelParams) -> float:
    """Mean binary cross-entropy plus ``alpha`` times the squared L2 norm of all parameters."""
    if len(samples) == 0:
        raise ValueError("empty sample set")
    preds = np.asarray(preds, dtype=float)
    y = samples.y
    bce = -np.mean(y * np.log(preds) + (1 - y) * np.log1p(-preds))
    return float(bce) + l2_penalty(p)


def _bce_from_logits(logit: np.ndarray, y: np.ndarray) -> float:
    # log(1 + e^z) - y z, stable for large |z|
    return float(np.mean(np.logaddexp(0.0, logit) - y * logit))


def objective(g: DynamicGraph, p: ModelParams, samples: SampleSet, tf: Transform) -> float:
    tr = forward(g, p, tf)
    logit, _ = _decode(tr.H, samples, p)
    return _bce_from_logits(logit, samples.y) + l2_penalty(p)


def _decoder_backward(h: np.ndarray, samples: SampleSet, p: ModelParams, n: int):
    """Summed cross-entropy over ``n``, decoder grads and ``dL/dH``."""
    logit, (ts, e, hid) = _decode(h, samples, p)
    value = float(np.sum(np.logaddexp(0.0, logit) - samples.y * logit)) / n
    grads: dict[str, np.ndarray] = {}
    d_logit = (sigmoid(logit) - samples.y) / n
    grads["dec.w"] = hid.T @ d_logit
    grads["dec.c"] = np.array([d_logit.sum()])
    d_pre = np.outer(d_logit, p.dec_w) * (1.0 - hid * hid)
    grads["dec.W"] = e.T @ d_pre
    grads["dec.b"] = d_pre.sum(axis=0)
    d_e = d_pre @ p.dec_W.T
    f = h.shape[2]
    d_h = np.zeros_like(h)
    np.add.at(d_h, (ts, samples.i), d_e[:, :f])
    np.add.at(d_h, (ts, samples.j), d_e[:, f:])
    return value, grads, d_h


def _stack_backward(tr: ForwardTrace, d_h: np.ndarray, p: ModelParams, grads: dict) -> np.ndarray:
    """Layer grads into ``grads``; returns ``dL/dO``."""
    tf = tr.transform
    d_o = np.zeros_like(tr.O)
    for k in reversed(range(p.n_layers)):
        d_pre_l = d_h * _layer_act_grad(tr.outputs[k], p.activation)
        if p.biases is not None:
            grads[f"layer{k}.b"] = d_pre_l.sum(axis=1)
        d_q, grads[f"layer{k}.W"] = t_product_backward(tr.aggregated[k], p.weights[k], d_pre_l, tf)
        d_o_k, d_h = t_product_backward(tr.O, tr.layer_inputs[k], d_q, tf)
        d_o += d_o_k
    return d_o


def _finish(grads: dict, d_o: np.ndarray, ctr: CnaTrace, p: ModelParams, penalty: bool) -> None:
    if p.cna.r_c != 0:
        grads.update(cna_backward(ctr, d_o, p.cna))
    else:
        grads.update({k: np.zeros_like(v) for k, v in p.cna.tensors().items()})
    if penalty and p.alpha:
        for k, v in p.tensors().items():
            grads[k] = grads[k] + 2.0 * p.alpha * v


def backward(
    tr: ForwardTrace,
    samples: SampleSet,
    p: ModelParams,
    denominator: int | None = None,
    penalty: bool = True,
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss value and its gradient w.r.t. every array in ``p.tensors()``.

    ``denominator`` replaces ``len(samples)`` in the cross-entropy mean, so
    partial sums over sample subsets can be accumulated.
    """
    if tr.version != p.version:
        raise StaleTraceError(f"trace from parameter version {tr.version}, parameters at {p.version}")
    if len(samples) == 0:
        raise ValueError("empty sample set")
    value, grads, d_h = _decoder_backward(tr.H, samples, p, denominator or len(samples))
    if penalty:
        value += l2_penalty(p)
    d_o = _stack_backward(tr, d_h, p, grads)
    _finish(grads, d_o, tr.cna, p, penalty)
    return value, grads


def loss_and_grads(g: DynamicGraph, p: ModelParams, samples: SampleSet, tf: Transform):
    return backward(forward(g, p, tf), samples, p)


def _by_target(samples: SampleSet):
    for t in np.unique(samples.t).tolist():
        yield t, samples.subset(samples.t == t)


def causal_predict(g: DynamicGraph, p: ModelParams, samples: SampleSet, tf: Transform) -> np.ndarray:
    """Link probabilities where slot ``t`` is scored without seeing slot ``t`` or later.

    Slot-mixing transforms need one layer pass per target slot with the later
    slots hidden; the identity transform needs just one.
    """
    if tf.is_identity:
        return predict(forward(g, p, tf).H, samples, p)
    _check_inputs(g, p)
    ctr = cna_forward(g.adjacency, normalize_adjacency(g.adjacency), p.cna)
    out = np.empty(len(samples))
    for t, sub in _by_target(samples):
        h = _masked_trace(g, ctr, p, tf, t - p.lag).H
        out[samples.t == t] = predict(h, sub, p)
    return out


def causal_loss_and_grads(
    g: DynamicGraph, p: ModelParams, samples: SampleSet, tf: Transform
) -> tuple[float, dict[str, np.ndarray]]:
    """:func:`loss_and_grads` with the same no-look-ahead rule as :func:`causal_predict`."""
    if tf.is_identity:
        return loss_and_grads(g, p, samples, tf)
    if len(samples) == 0:
        raise ValueError("empty sample set")
    _check_inputs(g, p)
    ctr = cna_forward(g.adjacency, normalize_adjacency(g.adjacency), p.cna)
    total = l2_penalty(p)
    grads: dict[str, np.ndarray] = {}
    d_o = np.zeros_like(ctr.O)
    for t, sub in _by_target(samples):
        last = t - p.lag
        tr = _masked_trace(g, ctr, p, tf, last)
        v, gr, d_h = _decoder_backward(tr.H, sub, p, len(samples))
        d_o_t = _stack_backward(tr, d_h, p, gr)
        d_o[: last + 1] += d_o_t[: last + 1]  # hidden slices do not depend on the weights
        total += v
        for k, arr in gr.items():
            grads[k] = grads[k] + arr if k in grads else arr
    _finish(grads, d_o, ctr, p, penalty=True)
    return total, grads


# ---------------------------------------------------------------------------
# checkpoints

def _write_array(buf: io.BytesIO, name: str, arr: np.ndarray) -> None:
    raw = name.encode()
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<B", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def checkpoint_bytes(p: ModelParams, extra: dict | None = None) -> bytes:
    """``HCNA`` + u32 version + length-prefixed JSON config + named float64 tensors."""
    cfg = {"model": p.config(), "run": extra or {}}
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    tensors = p.tensors()
    if not p.cna.learn_beta:
        tensors["cna.beta"] = p.cna.beta
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        _write_array(buf, name, tensors[name])
    return buf.getvalue()


def save_checkpoint(path: str | Path, p: ModelParams, extra: dict | None = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(p, extra))


def parse_checkpoint(raw: bytes) -> tuple[ModelParams, dict]:
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError("not a model checkpoint (bad magic)")
    version, n_cfg = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 12
    cfg = json.loads(raw[off:off + n_cfg])
    off += n_cfg
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    arrays = {}
    for _ in range(count):
        (n_name,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off:off + n_name].decode()
        off += n_name
        (ndim,) = struct.unpack_from("<B", raw, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        size = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=size, offset=off).reshape(shape).astype(float)
        off += 8 * size
    if off != len(raw):
        raise ValueError("trailing bytes in checkpoint")

    m = cfg["model"]
    L = len(m["layers"])
    cna = CnaParams(
        arrays["cna.edge_w"], arrays["cna.edge_b"], arrays["cna.node_W"], arrays["cna.node_b"],
        arrays["cna.node_w"], arrays["cna.node_c"], arrays["cna.beta"],
        r_c=m["r_c"], r_a=m["r_a"], activation=m["cna_activation"], learn_beta=m["learn_beta"],
    )
    p = ModelParams(
        weights=[arrays[f"layer{k}.W"] for k in range(L)],
        biases=[arrays[f"layer{k}.b"] for k in range(L)] if m["bias"] else None,
        dec_W=arrays["dec.W"],
        dec_b=arrays["dec.b"],
        dec_w=arrays["dec.w"],
        dec_c=arrays["dec.c"],
        cna=cna,
        alpha=m["alpha"],
        activation=m["activation"],
        lag=m["lag"],
    )
    return p, cfg.get("run", {})


def load_checkpoint(path: str | Path) -> tuple[ModelParams, dict]:
    return parse_checkpoint(Path(path).read_bytes())
