"""Dense layers, the MLP feature extractor, the linear camera discriminator,
plain SGD and a central-difference gradient checker.

Matrices are 2-D float64 numpy arrays. Forward functions are pure; parameter
updates go through :func:`sgd_step` / :meth:`Network.apply_sgd`.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

MODEL_FORMAT_VERSION = 1


class DimensionError(ValueError):
    """Raised when array shapes do not line up."""


class StaleCacheError(RuntimeError):
    """Raised when a forward cache is used after the parameters changed."""


def _shape(a) -> str:
    return "x".join(str(s) for s in np.shape(a))


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {_shape(m)}")
    return m


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {_shape(a)} by {_shape(b)}")
    return a @ b


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=(fan_out, fan_in))


@dataclass
class LinearLayer:
    """``y = x @ weight.T + bias`` with ``weight`` of shape (out, in)."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weight = as_matrix(self.weight, "weight")
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if self.bias.shape[0] != self.weight.shape[0]:
            raise DimensionError(
                f"bias length {self.bias.shape[0]} does not match weight {_shape(self.weight)}"
            )

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    @classmethod
    def init(cls, rng: np.random.Generator, fan_in: int, fan_out: int) -> "LinearLayer":
        return cls(glorot_uniform(rng, fan_in, fan_out), np.zeros(fan_out))

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape[1] != self.in_features:
            raise DimensionError(
                f"layer expects {self.in_features} inputs, got batch of shape {_shape(x)}"
            )
        return x @ self.weight.T + self.bias

    def backward(self, x: np.ndarray, grad_out: np.ndarray):
        """Return ``(grad_weight, grad_bias, grad_input)``."""
        return grad_out.T @ x, grad_out.sum(axis=0), grad_out @ self.weight

    def copy(self) -> "LinearLayer":
        return LinearLayer(self.weight.copy(), self.bias.copy())


@dataclass
class ExtractorCache:
    inputs: list  # input to every layer
    preacts: list  # pre-activation output of every layer
    version: int
    owner: int


@dataclass
class Network:
    """MLP feature extractor followed by a linear C-way camera discriminator."""

    extractor: list
    discriminator: LinearLayer
    seed: int | None = None
    scheme: str = "none"
    version: int = field(default=0, compare=False)

    def __post_init__(self):
        if not self.extractor:
            raise DimensionError("extractor needs at least one layer")
        for prev, nxt in zip(self.extractor, self.extractor[1:]):
            if prev.out_features != nxt.in_features:
                raise DimensionError(
                    f"extractor layers do not chain: {_shape(prev.weight)} -> {_shape(nxt.weight)}"
                )
        if self.discriminator.in_features != self.embedding_dim:
            raise DimensionError(
                f"discriminator input {self.discriminator.in_features} != embedding_dim {self.embedding_dim}"
            )
        if self.num_cameras < 2:
            raise DimensionError("discriminator needs at least 2 camera classes")

    @property
    def input_dim(self) -> int:
        return self.extractor[0].in_features

    @property
    def embedding_dim(self) -> int:
        return self.extractor[-1].out_features

    @property
    def num_cameras(self) -> int:
        return self.discriminator.out_features

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        input_dim: int,
        num_cameras: int,
        hidden: Sequence[int] = (64, 64),
        embedding_dim: int = 128,
        seed: int | None = None,
        scheme: str = "none",
    ) -> "Network":
        widths = [input_dim, *hidden, embedding_dim]
        layers = [LinearLayer.init(rng, a, b) for a, b in zip(widths, widths[1:])]
        disc = LinearLayer.init(rng, embedding_dim, num_cameras)
        return cls(layers, disc, seed=seed, scheme=scheme)

    def extractor_params(self) -> list:
        out = []
        for layer in self.extractor:
            out += [layer.weight, layer.bias]
        return out

    def discriminator_params(self) -> list:
        return [self.discriminator.weight, self.discriminator.bias]

    def apply_sgd(self, part: str, grads: Sequence[np.ndarray], learning_rate: float) -> None:
        params = self.extractor_params() if part == "extractor" else self.discriminator_params()
        sgd_step(params, grads, learning_rate)
        self.version += 1

    def copy(self) -> "Network":
        return Network(
            [layer.copy() for layer in self.extractor],
            self.discriminator.copy(),
            seed=self.seed,
            scheme=self.scheme,
        )

    # -- persistence -------------------------------------------------------

    def to_dict(self) -> dict:
        def layer_doc(layer):
            return {
                "rows": layer.out_features,
                "cols": layer.in_features,
                "weights": layer.weight.reshape(-1).tolist(),
                "bias": layer.bias.tolist(),
            }

        return {
            "version": MODEL_FORMAT_VERSION,
            "embedding_dim": self.embedding_dim,
            "num_cameras": self.num_cameras,
            "layers": [layer_doc(l) for l in self.extractor],
            "discriminator": layer_doc(self.discriminator),
            "seed": self.seed,
            "scheme": self.scheme,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Network":
        if doc.get("version", MODEL_FORMAT_VERSION) != MODEL_FORMAT_VERSION:
            raise ValueError(f"unsupported model format version {doc.get('version')!r}")

        def layer_from(d):
            w = np.asarray(d["weights"], dtype=np.float64)
            if w.size != d["rows"] * d["cols"]:
                raise DimensionError(f"layer declares {d['rows']}x{d['cols']} but has {w.size} weights")
            return LinearLayer(w.reshape(d["rows"], d["cols"]), d["bias"])

        try:
            net = cls(
                [layer_from(d) for d in doc["layers"]],
                layer_from(doc["discriminator"]),
                seed=doc.get("seed"),
                scheme=doc.get("scheme", "none"),
            )
        except KeyError as exc:
            raise ValueError(f"model document is missing field {exc}") from None
        if net.embedding_dim != doc["embedding_dim"] or net.num_cameras != doc["num_cameras"]:
            raise DimensionError("declared embedding_dim/num_cameras disagree with layer shapes")
        return net


def dumps_model(net: Network) -> str:
    return json.dumps(net.to_dict(), indent=None, separators=(",", ":")) + "\n"


def loads_model(text: str) -> Network:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValueError(f"cannot parse model file: {exc}") from None
    return Network.from_dict(doc)


def save_model(net: Network, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_model(net))


def load_model(path) -> Network:
    with open(path, encoding="utf-8") as fh:
        return loads_model(fh.read())


# -- forward / backward -------------------------------------------------------

def forward_extractor(net: Network, batch) -> tuple[np.ndarray, ExtractorCache]:
    x = as_matrix(batch, "batch")
    if x.shape[1] != net.input_dim:
        raise DimensionError(f"network expects {net.input_dim} input features, got {x.shape[1]}")
    inputs, preacts = [], []
    h = x
    last = len(net.extractor) - 1
    for i, layer in enumerate(net.extractor):
        inputs.append(h)
        z = layer.forward(h)
        preacts.append(z)
        h = np.maximum(z, 0.0) if i < last else z
    return h, ExtractorCache(inputs, preacts, net.version, id(net))


def backward_extractor(net: Network, cache: ExtractorCache, grad_output) -> tuple[list, np.ndarray]:
    """Backpropagate ``grad_output`` (dL/d embeddings).

    Returns the parameter gradients in :meth:`Network.extractor_params` order
    and dL/d input.
    """
    if cache.owner != id(net) or cache.version != net.version:
        raise StaleCacheError("cache does not belong to the current network parameters")
    g = as_matrix(grad_output, "grad_output")
    if g.shape != cache.preacts[-1].shape:
        raise DimensionError(f"gradient shape {_shape(g)} != output shape {_shape(cache.preacts[-1])}")
    grads = [None] * (2 * len(net.extractor))
    last = len(net.extractor) - 1
    for i in range(last, -1, -1):
        if i < last:
            # subgradient of ReLU at exactly 0 is 0
            g = g * (cache.preacts[i] > 0.0)
        gw, gb, g = net.extractor[i].backward(cache.inputs[i], g)
        grads[2 * i], grads[2 * i + 1] = gw, gb
    return grads, g


def forward_discriminator(net: Network, embeddings) -> tuple[np.ndarray, np.ndarray]:
    e = as_matrix(embeddings, "embeddings")
    if e.shape[1] != net.embedding_dim:
        raise DimensionError(f"discriminator expects {net.embedding_dim} features, got {e.shape[1]}")
    logits = net.discriminator.forward(e)
    return logits, softmax(logits)


def backward_discriminator(net: Network, embeddings, grad_logits) -> tuple[list, np.ndarray]:
    """Return ``([grad_weight, grad_bias], grad_embeddings)``."""
    gw, gb, ge = net.discriminator.backward(as_matrix(embeddings), as_matrix(grad_logits))
    return [gw, gb], ge


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], learning_rate: float):
    """In-place ``theta -= lr * g`` for each parameter array; returns ``params``."""
    if learning_rate <= 0:
        raise ValueError(f"learning rate must be positive, got {learning_rate}")
    if len(params) != len(grads):
        raise DimensionError(f"{len(params)} parameters but {len(grads)} gradients")
    for p, g in zip(params, grads):
        if p.shape != np.shape(g):
            raise DimensionError(f"parameter {_shape(p)} vs gradient {_shape(g)}")
    for p, g in zip(params, grads):
        p -= learning_rate * g
    return params


# -- gradient checking --------------------------------------------------------

@dataclass
class GradCheckReport:
    op_name: str
    max_relative_error: float
    step: float
    tolerance: float
    passed: bool

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{self.op_name:<28} max_rel_err={self.max_relative_error:.3e}  tol={self.tolerance:.0e}  {status}"


def relative_error(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def numerical_gradient(f: Callable[[np.ndarray], float], point, step: float = 1e-5) -> np.ndarray:
    x = np.array(point, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(x)
        flat[i] = orig - step
        fm = f(x)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value probing coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad


def finite_difference_check(
    f: Callable[[np.ndarray], float],
    analytic_grad,
    point,
    step: float = 1e-5,
    tolerance: float = 1e-4,
    op_name: str = "op",
) -> GradCheckReport:
    numeric = numerical_gradient(f, point, step)
    analytic = np.asarray(analytic_grad, dtype=np.float64).reshape(numeric.shape)
    err = float(relative_error(numeric, analytic).max()) if numeric.size else 0.0
    return GradCheckReport(op_name, err, step, tolerance, err <= tolerance)
