"""Minimal feedforward network substrate.

Parameters of a network live in one flat float64 vector; a :class:`NetLayout`
describes how that vector is carved into per-layer weights and biases. Keeping
the parameters flat makes federated averaging a plain vector operation.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

ACTIVATIONS = ("relu", "sigmoid", "identity")
LOSSES = ("mse", "bce")
BCE_EPS = 1e-7


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    d_in: int
    d_out: int
    activation: str = "relu"

    def __post_init__(self):
        if self.d_in < 1 or self.d_out < 1:
            raise ShapeError(f"layer dimensions must be positive, got {self.d_in}x{self.d_out}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def n_params(self) -> int:
        return self.d_in * self.d_out + self.d_out


@dataclass(frozen=True)
class NetLayout:
    """Layout descriptor: an ordered chain of dense layers."""

    layers: tuple[LayerSpec, ...]

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("a network needs at least one layer")
        for i, (a, b) in enumerate(zip(self.layers, self.layers[1:])):
            if a.d_out != b.d_in:
                raise ShapeError(f"layer {i} outputs {a.d_out} but layer {i + 1} expects {b.d_in}")

    @classmethod
    def chain(cls, widths: Sequence[int], activations: Sequence[str]) -> "NetLayout":
        if len(activations) != len(widths) - 1:
            raise ShapeError("need one activation per layer")
        return cls(tuple(LayerSpec(a, b, act) for a, b, act in zip(widths, widths[1:], activations)))

    @property
    def d_in(self) -> int:
        return self.layers[0].d_in

    @property
    def d_out(self) -> int:
        return self.layers[-1].d_out

    @property
    def n_params(self) -> int:
        return sum(layer.n_params for layer in self.layers)

    def unpack(self, flat: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        """Return (weight, bias) views into ``flat``; no copies are made."""
        if flat.shape != (self.n_params,):
            raise ShapeError(f"expected {self.n_params} parameters, got shape {flat.shape}")
        out = []
        pos = 0
        for layer in self.layers:
            n_w = layer.d_in * layer.d_out
            w = flat[pos:pos + n_w].reshape(layer.d_in, layer.d_out)
            pos += n_w
            b = flat[pos:pos + layer.d_out]
            pos += layer.d_out
            out.append((w, b))
        return out

    def init(self, rng: np.random.Generator) -> np.ndarray:
        """Glorot-uniform weights, zero biases."""
        flat = np.zeros(self.n_params)
        for layer, (w, _) in zip(self.layers, self.unpack(flat)):
            limit = np.sqrt(6.0 / (layer.d_in + layer.d_out))
            w[...] = rng.uniform(-limit, limit, size=w.shape)
        return flat

    def to_dict(self) -> dict:
        return {"layers": [[l.d_in, l.d_out, l.activation] for l in self.layers]}

    @classmethod
    def from_dict(cls, d: dict) -> "NetLayout":
        return cls(tuple(LayerSpec(int(a), int(b), str(act)) for a, b, act in d["layers"]))


@dataclass
class DenseNet:
    layout: NetLayout
    params: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=np.float64)
        self.layout.unpack(self.params)  # validates length

    @classmethod
    def create(cls, layout: NetLayout, rng: np.random.Generator) -> "DenseNet":
        return cls(layout, layout.init(rng))

    @property
    def layers(self):
        return [(w, b, spec.activation) for (w, b), spec in zip(self.layout.unpack(self.params), self.layout.layers)]


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "sigmoid":
        # split by sign so exp never overflows
        out = np.empty_like(z)
        pos = z >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        ez = np.exp(z[~pos])
        out[~pos] = ez / (1.0 + ez)
        return out
    return z


def _activation_grad(a: np.ndarray, kind: str) -> np.ndarray:
    # derivative expressed through the activation output
    if kind == "relu":
        return (a > 0).astype(a.dtype)
    if kind == "sigmoid":
        return a * (1.0 - a)
    return np.ones_like(a)


def forward(net: DenseNet, batch: np.ndarray, n_layers: int | None = None) -> list[np.ndarray]:
    """Run ``batch`` through the net and return every activation.

    The returned list starts with the input itself, so ``acts[-1]`` is the
    network output and ``acts[i]`` is the output of layer ``i - 1``.
    ``n_layers`` truncates the pass (used to read an encoder bottleneck).
    """
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.layout.d_in:
        raise ShapeError(f"batch shape {x.shape} does not match input width {net.layout.d_in}")
    acts = [x]
    for w, b, act in net.layers[:n_layers]:
        acts.append(_activate(acts[-1] @ w + b, act))
    return acts


def backprop(net: DenseNet, activations: list[np.ndarray], delta: np.ndarray,
             delta_is_preactivation: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Backpropagate an upstream gradient through the whole net.

    ``delta`` is dL/d(output), or dL/d(last pre-activation) when
    ``delta_is_preactivation`` is set. Returns the flat parameter gradient and
    dL/d(input).
    """
    layers = net.layers
    if len(activations) != len(layers) + 1:
        raise ShapeError("activations do not come from a full forward pass of this net")
    grad = np.empty_like(net.params)  # every slot is written below
    grad_views = net.layout.unpack(grad)
    g = delta
    if not delta_is_preactivation:
        g = g * _activation_grad(activations[-1], layers[-1][2])
    for i in range(len(layers) - 1, -1, -1):
        w, _, _ = layers[i]
        gw, gb = grad_views[i]
        a_prev = activations[i]
        gw[...] = a_prev.T @ g
        gb[...] = g.sum(axis=0)
        g = g @ w.T
        if i > 0:
            g = g * _activation_grad(a_prev, layers[i - 1][2])
    return grad, g


def loss_value(pred: np.ndarray, target: np.ndarray, loss: str) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction shape {pred.shape} != target shape {target.shape}")
    if loss == "mse":
        return float(np.mean((pred - target) ** 2))
    if loss == "bce":
        p = np.clip(pred, BCE_EPS, 1.0 - BCE_EPS)
        per_sample = -(target * np.log(p) + (1.0 - target) * np.log1p(-p))
        per_sample = per_sample.reshape(len(pred), -1).sum(axis=1)
        return float(per_sample.mean())
    raise ValueError(f"unknown loss {loss!r}")


def output_delta(pred: np.ndarray, target: np.ndarray, loss: str, final_activation: str) -> tuple[np.ndarray, bool]:
    """Gradient of the mean batch loss at the output layer.

    Returns ``(delta, is_preactivation)``. BCE is only defined on a sigmoid
    output, where the fused gradient ``(p - y) / n`` w.r.t. the logit is used.
    """
    if pred.shape != target.shape:
        raise ShapeError(f"prediction shape {pred.shape} != target shape {target.shape}")
    if loss == "mse":
        return 2.0 * (pred - target) / pred.size, False
    if loss == "bce":
        if final_activation != "sigmoid":
            raise ValueError("bce requires a sigmoid output layer")
        return (pred - target) / len(pred), True
    raise ValueError(f"unknown loss {loss!r}")


def backward(net: DenseNet, activations: list[np.ndarray], targets: np.ndarray, loss: str) -> np.ndarray:
    """Flat gradient of the mean batch loss w.r.t. every parameter."""
    targets = np.asarray(targets, dtype=np.float64)
    delta, pre = output_delta(activations[-1], targets, loss, net.layout.layers[-1].activation)
    grad, _ = backprop(net, activations, delta, delta_is_preactivation=pre)
    return grad


@dataclass
class AdamState:
    n_params: int
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray = field(default=None, repr=False)
    v: np.ndarray = field(default=None, repr=False)
    scratch: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.scratch = np.empty(self.n_params)
        if self.m is None:
            self.m = np.zeros(self.n_params)
        if self.v is None:
            self.v = np.zeros(self.n_params)
        if self.m.shape != (self.n_params,) or self.v.shape != (self.n_params,):
            raise ShapeError("Adam accumulators must match the parameter vector")


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray,
              blocks: Sequence[tuple[str, slice]] | None = None) -> np.ndarray:
    """Apply one bias-corrected Adam update in place and return ``params``.

    ``blocks`` optionally names slices of the vector so a non-finite gradient
    can be reported against the parameter block it came from.
    """
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ShapeError("parameter, gradient and optimizer shapes differ")
    if not np.isfinite(np.dot(grads, grads)) and not np.all(np.isfinite(grads)):
        bad = int(np.flatnonzero(~np.isfinite(grads))[0])
        name = f"index {bad}"
        for label, sl in blocks or ():
            if sl.start <= bad < sl.stop:
                name = label
                break
        raise NumericError(f"non-finite gradient in parameter block {name}")
    state.step += 1
    buf = state.scratch
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    np.multiply(grads, 1.0 - b1, out=buf)
    state.m += buf
    state.v *= b2
    np.multiply(grads, grads, out=buf)
    buf *= 1.0 - b2
    state.v += buf
    # lr * m_hat / (sqrt(v_hat) + eps) with the bias corrections folded into scalars
    c1 = 1.0 - b1 ** state.step
    c2 = np.sqrt(1.0 - b2 ** state.step)
    np.sqrt(state.v, out=buf)
    buf += state.eps * c2
    np.divide(state.m, buf, out=buf)
    buf *= state.lr * c2 / c1
    params -= buf
    return params


def layer_blocks(layout: NetLayout, prefix: str = "") -> list[tuple[str, slice]]:
    out = []
    pos = 0
    for i, layer in enumerate(layout.layers):
        n_w = layer.d_in * layer.d_out
        out.append((f"{prefix}layer{i}.weight", slice(pos, pos + n_w)))
        out.append((f"{prefix}layer{i}.bias", slice(pos + n_w, pos + n_w + layer.d_out)))
        pos += n_w + layer.d_out
    return out


class Sequential:
    """A single-input DenseNet paired with its training loss.

    Exposes the model interface the federation loop relies on: ``n_params``,
    ``init``, ``loss_and_grad`` and ``predict``, all over flat vectors.
    """

    def __init__(self, layout: NetLayout, loss: str):
        if loss not in LOSSES:
            raise ValueError(f"unknown loss {loss!r}")
        self.layout = layout
        self.loss = loss

    @property
    def n_params(self) -> int:
        return self.layout.n_params

    def init(self, rng: np.random.Generator) -> np.ndarray:
        return self.layout.init(rng)

    def loss_and_grad(self, params, inputs, targets):
        net = DenseNet(self.layout, params)
        acts = forward(net, inputs[0])
        return loss_value(acts[-1], targets, self.loss), backward(net, acts, targets, self.loss)

    def predict(self, params, inputs):
        return forward(DenseNet(self.layout, params), inputs[0])[-1]


# -- snapshots -------------------------------------------------------------------

SNAPSHOT_MAGIC = b"PCBFLNET"
SNAPSHOT_VERSION = 1


class SnapshotError(ValueError):
    pass


@dataclass
class Snapshot:
    """Layout descriptors (one per sub-network, in parameter order), the flat
    parameter vector and free-form metadata."""

    layouts: list
    params: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=np.float64)
        expected = sum(l.n_params for l in self.layouts)
        if self.params.shape != (expected,):
            raise SnapshotError(f"layouts need {expected} parameters, got shape {self.params.shape}")

    def _header(self) -> dict:
        return {"version": SNAPSHOT_VERSION, "layouts": [l.to_dict() for l in self.layouts], "meta": self.meta}

    def save(self, path):
        """Binary form; round-trips bit-exactly."""
        head = json.dumps(self._header(), sort_keys=True).encode()
        with open(path, "wb") as fh:
            fh.write(SNAPSHOT_MAGIC + struct.pack("<IQ", SNAPSHOT_VERSION, len(head)))
            fh.write(head)
            fh.write(np.ascontiguousarray(self.params, dtype="<f8").tobytes())

    def save_json(self, path):
        # repr of a float64 round-trips, so this form is exact as well
        Path(path).write_text(json.dumps({**self._header(), "params": [float(v) for v in self.params]},
                                         sort_keys=True))

    @classmethod
    def _from_header(cls, head: dict, params) -> "Snapshot":
        if head.get("version") != SNAPSHOT_VERSION:
            raise SnapshotError(f"unsupported snapshot version {head.get('version')}")
        return cls([NetLayout.from_dict(d) for d in head["layouts"]], params, head.get("meta", {}))

    @classmethod
    def load(cls, path) -> "Snapshot":
        raw = Path(path).read_bytes()
        if raw[:len(SNAPSHOT_MAGIC)] == SNAPSHOT_MAGIC:
            off = len(SNAPSHOT_MAGIC)
            version, n_head = struct.unpack("<IQ", raw[off:off + 12])
            if version != SNAPSHOT_VERSION:
                raise SnapshotError(f"unsupported snapshot version {version}")
            head = json.loads(raw[off + 12:off + 12 + n_head])
            body = raw[off + 12 + n_head:]
            if len(body) % 8:
                raise SnapshotError(f"{path} is truncated")
            return cls._from_header(head, np.frombuffer(body, dtype="<f8").astype(np.float64))
        try:
            doc = json.loads(raw)
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise SnapshotError(f"{path} is neither a binary nor a JSON snapshot") from exc
        return cls._from_header(doc, np.array(doc["params"], dtype=np.float64))
