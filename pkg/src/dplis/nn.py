"""Dense MLP engine with exact per-sample gradients.

Parameters live in one flat float64 vector. ``shape_map`` records how the
vector splits into per-layer weight matrices ``W[l]`` of shape (out, in)
and bias vectors ``b[l]``; a layer computes ``z = h @ W.T + b``.

A *filter* is one row of a weight matrix together with its bias entry,
i.e. everything feeding one output unit. Filter-normalized slices use it.

ReLU uses subgradient 0 at a pre-activation of exactly 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .rng import Purpose, stream


class DimensionError(ValueError):
    pass


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden: tuple[int, ...]
    output_dim: int
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.input_dim < 1 or self.output_dim < 1 or any(h < 1 for h in self.hidden):
            raise ValueError(f"layer sizes must be positive: {self}")
        if self.activation not in ("relu", "tanh"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        """(fan_out, fan_in) per layer."""
        sizes = [self.input_dim, *self.hidden, self.output_dim]
        return [(sizes[i + 1], sizes[i]) for i in range(len(sizes) - 1)]

    @property
    def n_params(self) -> int:
        return sum(o * i + o for o, i in self.layer_dims)


@dataclass(frozen=True)
class Partition:
    layer_id: int
    kind: str  # "weight" or "bias"
    rows: int
    cols: int  # 1 for biases
    offset: int

    @property
    def size(self) -> int:
        return self.rows * self.cols


def build_shape_map(spec: MlpSpec) -> tuple[Partition, ...]:
    parts = []
    offset = 0
    for l, (o, i) in enumerate(spec.layer_dims):
        parts.append(Partition(l, "weight", o, i, offset))
        offset += o * i
        parts.append(Partition(l, "bias", o, 1, offset))
        offset += o
    return tuple(parts)


@dataclass
class ParamVector:
    values: np.ndarray
    shape_map: tuple[Partition, ...]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise DimensionError("parameter vector must be 1-D")
        pos = 0
        for p in self.shape_map:
            if p.offset != pos:
                raise DimensionError(f"partition {p} does not start at {pos}")
            pos += p.size
        if pos != self.values.size:
            raise DimensionError(f"partitions cover {pos} entries, vector has {self.values.size}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("parameter vector contains non-finite values")

    @classmethod
    def from_flat(cls, values: np.ndarray, spec: MlpSpec) -> "ParamVector":
        return cls(np.array(values, dtype=np.float64), build_shape_map(spec))

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(values, self.shape_map)

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """(W, b) views into ``values``, one pair per layer."""
        return layer_views(self.values, self.shape_map)

    def filter_ids(self) -> np.ndarray:
        return filter_ids(self.shape_map)


def layer_views(values: np.ndarray, shape_map: Sequence[Partition]):
    out = []
    for w, b in zip(shape_map[0::2], shape_map[1::2]):
        W = values[w.offset : w.offset + w.size].reshape(w.rows, w.cols)
        bias = values[b.offset : b.offset + b.size]
        out.append((W, bias))
    return out


def filter_ids(shape_map: Sequence[Partition]) -> np.ndarray:
    """Filter index of every parameter (weight row k and bias entry k share one)."""
    ids = np.empty(sum(p.size for p in shape_map), dtype=np.int64)
    base = 0
    for w, b in zip(shape_map[0::2], shape_map[1::2]):
        rows = np.arange(w.rows)
        ids[w.offset : w.offset + w.size] = base + np.repeat(rows, w.cols)
        ids[b.offset : b.offset + b.size] = base + rows
        base += w.rows
    return ids


@dataclass
class Batch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=np.float64))
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise DimensionError(
                f"{self.inputs.shape[0]} input rows but {self.labels.shape[0]} labels"
            )
        if not np.all(np.isfinite(self.inputs)):
            raise ValueError("batch inputs contain non-finite values")

    def __len__(self) -> int:
        return self.labels.shape[0]

    def subset(self, idx) -> "Batch":
        return Batch(self.inputs[idx], self.labels[idx])


def init_params(spec: MlpSpec, seed: int) -> ParamVector:
    """Glorot-uniform weights, zero biases."""
    rng = stream(seed, Purpose.INIT)
    shape_map = build_shape_map(spec)
    values = np.zeros(spec.n_params)
    for p in shape_map:
        if p.kind == "weight":
            bound = np.sqrt(6.0 / (p.rows + p.cols))
            values[p.offset : p.offset + p.size] = rng.uniform(-bound, bound, p.size)
    return ParamVector(values, shape_map)


def _check(params: ParamVector, spec: MlpSpec, batch: Batch) -> None:
    if params.values.size != spec.n_params:
        raise DimensionError(f"params have {params.values.size} entries, spec needs {spec.n_params}")
    if batch.inputs.shape[1] != spec.input_dim:
        raise DimensionError(f"inputs have dim {batch.inputs.shape[1]}, spec expects {spec.input_dim}")
    if batch.labels.size and (batch.labels.min() < 0 or batch.labels.max() >= spec.output_dim):
        raise DimensionError("label out of range")


def activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def activate_grad(z: np.ndarray, h: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return (z > 0).astype(np.float64)
    return 1.0 - h * h


def log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def forward(layers, x: np.ndarray, kind: str):
    """Return pre-activations ``zs`` and layer inputs ``hs`` (``hs[0] = x``)."""
    hs = [x]
    zs = []
    h = x
    for l, (W, b) in enumerate(layers):
        z = h @ W.T + b
        zs.append(z)
        if l < len(layers) - 1:
            h = activate(z, kind)
            hs.append(h)
    return zs, hs


def output_deltas(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """d(cross-entropy)/d(logits) = softmax - onehot, per row."""
    p = np.exp(log_softmax(logits))
    p[np.arange(labels.size), labels] -= 1.0
    return p


def backprop(layers, zs, hs, labels, kind: str) -> list[np.ndarray]:
    """Per-sample deltas d loss_i / d z_l for every layer."""
    deltas = [None] * len(layers)
    d = output_deltas(zs[-1], labels)
    deltas[-1] = d
    for l in range(len(layers) - 1, 0, -1):
        d = (d @ layers[l][0]) * activate_grad(zs[l - 1], hs[l], kind)
        deltas[l - 1] = d
    return deltas


def forward_loss(params: ParamVector, spec: MlpSpec, batch: Batch) -> np.ndarray:
    """Per-sample softmax cross-entropy."""
    _check(params, spec, batch)
    zs, _ = forward(params.layers(), batch.inputs, spec.activation)
    return -log_softmax(zs[-1])[np.arange(len(batch)), batch.labels]


def per_sample_gradients(params: ParamVector, spec: MlpSpec, batch: Batch) -> np.ndarray:
    """Matrix whose row i is the gradient of sample i's loss."""
    _check(params, spec, batch)
    layers = params.layers()
    zs, hs = forward(layers, batch.inputs, spec.activation)
    deltas = backprop(layers, zs, hs, batch.labels, spec.activation)
    out = np.empty((len(batch), params.values.size))
    for l, (w, b) in enumerate(zip(params.shape_map[0::2], params.shape_map[1::2])):
        gw = np.einsum("no,ni->noi", deltas[l], hs[l])
        out[:, w.offset : w.offset + w.size] = gw.reshape(len(batch), -1)
        out[:, b.offset : b.offset + b.size] = deltas[l]
    return out


def loss_and_grad(params: ParamVector, spec: MlpSpec, batch: Batch) -> tuple[float, np.ndarray]:
    """Mean loss and its gradient in a single batched pass."""
    _check(params, spec, batch)
    layers = params.layers()
    zs, hs = forward(layers, batch.inputs, spec.activation)
    n = len(batch)
    loss = float(np.mean(-log_softmax(zs[-1])[np.arange(n), batch.labels]))
    deltas = backprop(layers, zs, hs, batch.labels, spec.activation)
    grad = np.empty_like(params.values)
    for l, (w, b) in enumerate(zip(params.shape_map[0::2], params.shape_map[1::2])):
        grad[w.offset : w.offset + w.size] = (deltas[l].T @ hs[l]).ravel() / n
        grad[b.offset : b.offset + b.size] = deltas[l].sum(axis=0) / n
    return loss, grad


def predict_logits(params: ParamVector, spec: MlpSpec, inputs: np.ndarray) -> np.ndarray:
    zs, _ = forward(params.layers(), np.asarray(inputs, dtype=np.float64), spec.activation)
    return zs[-1]


def evaluate(params: ParamVector, spec: MlpSpec, dataset: Batch) -> tuple[float, float]:
    """(accuracy, mean loss). Argmax ties go to the lowest class index."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    _check(params, spec, dataset)
    logits = predict_logits(params, spec, dataset.inputs)
    losses = -log_softmax(logits)[np.arange(len(dataset)), dataset.labels]
    acc = float(np.mean(np.argmax(logits, axis=1) == dataset.labels))
    return acc, float(np.mean(losses))


# --- batched clipped-gradient engines used by DP-SGD -------------------------


@dataclass
class ClippedSum:
    total: np.ndarray  # sum of clipped per-sample gradients, flat
    norms: np.ndarray  # pre-clip per-sample gradient norms
    factors: np.ndarray  # per-sample clip factors
    extras: dict = field(default_factory=dict)

    @property
    def clipped_norms(self) -> np.ndarray:
        return self.norms * self.factors


# Shrinks the clip factor by a few ulps so that a clipped gradient measured
# directly never exceeds C after rounding.
CLIP_SAFETY = 1.0 - 1e-12


def clip_factors(norms: np.ndarray, clip: float) -> np.ndarray:
    with np.errstate(divide="ignore"):
        f = np.where(norms > clip, clip / np.where(norms > 0, norms, 1.0) * CLIP_SAFETY, 1.0)
    return f


def _rowdot(a: np.ndarray) -> np.ndarray:
    return np.einsum("...i,...i->...", a, a)


def clipped_gradient_sum(params: ParamVector, spec: MlpSpec, batch: Batch, clip: float) -> ClippedSum:
    """Sum of per-sample gradients each clipped to norm ``clip``.

    Per-sample norms come from the outer-product identity
    ``||d h^T||^2 = ||d||^2 ||h||^2`` so the per-sample gradient matrix is
    never materialized.
    """
    _check(params, spec, batch)
    total = np.zeros_like(params.values)
    n = len(batch)
    if n == 0:
        return ClippedSum(total, np.zeros(0), np.zeros(0))
    layers = params.layers()
    zs, hs = forward(layers, batch.inputs, spec.activation)
    deltas = backprop(layers, zs, hs, batch.labels, spec.activation)
    sq = np.zeros(n)
    for l in range(len(layers)):
        sq += _rowdot(deltas[l]) * (_rowdot(hs[l]) + 1.0)
    norms = np.sqrt(sq)
    if not np.all(np.isfinite(norms)):
        raise FloatingPointError("non-finite per-sample gradient")
    f = clip_factors(norms, clip)
    for l, (w, b) in enumerate(zip(params.shape_map[0::2], params.shape_map[1::2])):
        dc = deltas[l] * f[:, None]
        total[w.offset : w.offset + w.size] = (dc.T @ hs[l]).ravel()
        total[b.offset : b.offset + b.size] = f @ deltas[l]
    return ClippedSum(total, norms, f)


def smoothed_clipped_gradient_sum(
    params: ParamVector,
    spec: MlpSpec,
    batch: Batch,
    clip: float,
    noise_std: float,
    fwd_noise: np.ndarray,
    bwd_noise: np.ndarray,
) -> ClippedSum:
    """Clipped sum of per-sample gradients averaged over K parameter perturbations.

    Sample i, draw j is evaluated at ``theta + noise_std * nu_ij`` with
    ``nu_ij ~ N(0, I)`` over every weight and bias. A layer's perturbation
    only enters the computation through ``N h~`` on the forward pass and
    ``N^T d`` on the backward pass (``h~ = [h, 1]`` absorbs the bias). Both
    are sampled exactly from their joint Gaussian law instead of drawing
    ``N`` itself:

        N h~   = noise_std * ||h~|| * zf
        N^T d  = h~ (N h~ . d) / ||h~||^2 + P_perp(noise_std * ||d|| * zb)

    where ``P_perp`` projects out ``h~``. The resulting per-sample gradients
    have the same distribution as with dense perturbations.

    ``fwd_noise`` has shape (n, K, sum of fan_outs); ``bwd_noise`` has shape
    (n, K, sum over layers >= 1 of fan_in + 1). Both are standard normal.
    """
    _check(params, spec, batch)
    n = len(batch)
    total = np.zeros_like(params.values)
    if n == 0:
        return ClippedSum(total, np.zeros(0), np.zeros(0))
    K = fwd_noise.shape[1]
    M = n * K
    layers = params.layers()
    dims = spec.layer_dims
    kind = spec.activation
    fo = np.cumsum([0] + [o for o, _ in dims])
    bo = np.cumsum([0] + [i + 1 for _, i in dims[1:]])
    zf = fwd_noise.reshape(M, -1)
    zb = bwd_noise.reshape(M, -1)

    x = batch.inputs
    W0, b0 = layers[0]
    xsq = _rowdot(x) + 1.0
    z = np.repeat(x @ W0.T + b0, K, axis=0)
    u = (noise_std * np.repeat(np.sqrt(xsq), K))[:, None] * zf[:, fo[0] : fo[1]]
    zs = [z + u]
    us = [u]
    hs = [None]  # layer 0 input kept as x (shared over K)
    hsq = [None]
    for l in range(1, len(layers)):
        h = activate(zs[-1], kind)
        W, b = layers[l]
        hs.append(h)
        sq = _rowdot(h) + 1.0
        hsq.append(sq)
        u = (noise_std * np.sqrt(sq))[:, None] * zf[:, fo[l] : fo[l + 1]]
        us.append(u)
        zs.append(h @ W.T + b + u)

    labels = np.repeat(batch.labels, K)
    d = output_deltas(zs[-1], labels)
    deltas = [None] * len(layers)
    deltas[-1] = d
    for l in range(len(layers) - 1, 0, -1):
        W, _ = layers[l]
        h = hs[l]
        g = (noise_std * np.sqrt(_rowdot(d)))[:, None] * zb[:, bo[l - 1] : bo[l]]
        # N^T d restricted to the weight block (the trailing bias coordinate is unused)
        coef = np.einsum("mo,mo->m", us[l], d) / hsq[l]
        proj = (np.einsum("mi,mi->m", h, g[:, :-1]) + g[:, -1]) / hsq[l]
        dh = d @ W + h * (coef - proj)[:, None] + g[:, :-1]
        d = dh * activate_grad(zs[l - 1], h, kind)
        deltas[l - 1] = d

    # squared norm of (1/K) sum_j d_j h~_j^T, via Gram matrices over j
    sq = np.zeros(n)
    if K == 1:
        sq += _rowdot(deltas[0]) * xsq
        for l in range(1, len(layers)):
            sq += _rowdot(deltas[l]) * hsq[l]
    else:
        d0 = deltas[0].reshape(n, K, -1).sum(axis=1)
        sq += _rowdot(d0) * xsq / (K * K)
        for l in range(1, len(layers)):
            dl = deltas[l].reshape(n, K, -1)
            hl = hs[l].reshape(n, K, -1)
            gd = np.einsum("njo,nko->njk", dl, dl)
            gh = np.einsum("nji,nki->njk", hl, hl) + 1.0
            sq += (gd * gh).sum(axis=(1, 2)) / (K * K)
    norms = np.sqrt(sq)
    if not np.all(np.isfinite(norms)):
        raise FloatingPointError("non-finite per-sample gradient")
    f = clip_factors(norms, clip)
    w = np.repeat(f / K, K) if K > 1 else f

    shape_pairs = list(zip(params.shape_map[0::2], params.shape_map[1::2]))
    pw, pb = shape_pairs[0]
    if K == 1:
        d0w = deltas[0] * f[:, None]
        d0b = f @ deltas[0]
    else:
        d0w = deltas[0].reshape(n, K, -1).sum(axis=1) * (f / K)[:, None]
        d0b = w @ deltas[0]
    total[pw.offset : pw.offset + pw.size] = (d0w.T @ x).ravel()
    total[pb.offset : pb.offset + pb.size] = d0b
    for l in range(1, len(layers)):
        pw, pb = shape_pairs[l]
        dc = deltas[l] * w[:, None]
        total[pw.offset : pw.offset + pw.size] = (dc.T @ hs[l]).ravel()
        total[pb.offset : pb.offset + pb.size] = w @ deltas[l]
    return ClippedSum(total, norms, f)


def implicit_noise_sizes(spec: MlpSpec) -> tuple[int, int]:
    """Standard normals needed per (sample, draw) by the smoothed engine."""
    dims = spec.layer_dims
    return sum(o for o, _ in dims), sum(i + 1 for _, i in dims[1:])
