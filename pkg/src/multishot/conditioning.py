"""Camera conditioning encoders and additive token injection.

Two branches turn camera data into per-token offsets:

* :class:`MlpBranch` maps the flattened 3x4 extrinsic matrix through a
  two-layer GELU perceptron. Its last layer (the transfer layer) starts at
  exactly zero, so a fresh branch contributes nothing until trained.
* :class:`ConvBranch` patchifies a Plücker ray map with a kernel=stride
  convolution, one output token per patch, optionally followed by 1x1 layers.

Both expose ``forward`` returning ``(output, cache)`` and ``backward`` taking
that cache and the upstream gradient.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import erf

from . import tensorio
from .camera import CameraExtrinsics, PluckerMap
from .errors import DomainError, LoadError

EXTRINSIC_WIDTH = 12
PLUCKER_CHANNELS = 6

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    return cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


@dataclass
class MlpBranch:
    w1: np.ndarray  # (hidden, 12)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (d_model, hidden) -- transfer layer
    b2: np.ndarray  # (d_model,)

    def __post_init__(self):
        h = self.w1.shape[0]
        if self.w1.shape != (h, EXTRINSIC_WIDTH):
            raise DomainError(f"first layer must take {EXTRINSIC_WIDTH} inputs, got {self.w1.shape}")
        if self.b1.shape != (h,) or self.w2.ndim != 2 or self.w2.shape[1] != h:
            raise DomainError("inconsistent MLP branch shapes")
        if self.b2.shape != (self.w2.shape[0],):
            raise DomainError("transfer bias does not match output width")

    @classmethod
    def init(cls, d_model: int, hidden: int | None = None, *, seed: int, dtype=np.float64):
        """Uniform(+-1/sqrt(fan_in)) first layer, all-zero transfer layer."""
        hidden = 4 * d_model if hidden is None else hidden
        rng = np.random.default_rng(seed)
        return cls(
            w1=_uniform(rng, (hidden, EXTRINSIC_WIDTH), EXTRINSIC_WIDTH, dtype),
            b1=_uniform(rng, (hidden,), EXTRINSIC_WIDTH, dtype),
            w2=np.zeros((d_model, hidden), dtype=dtype),
            b2=np.zeros(d_model, dtype=dtype),
        )

    @property
    def d_model(self) -> int:
        return self.w2.shape[0]

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def forward(self, x: np.ndarray):
        """``x``: (..., 12) flattened extrinsics."""
        x = np.asarray(x, dtype=self.w1.dtype)
        if x.shape[-1] != EXTRINSIC_WIDTH:
            raise DomainError(f"expected trailing width {EXTRINSIC_WIDTH}, got {x.shape}")
        pre = x @ self.w1.T + self.b1
        act = gelu(pre)
        return act @ self.w2.T + self.b2, (x, pre, act)

    def backward(self, cache, grad_out: np.ndarray) -> dict[str, np.ndarray]:
        x, pre, act = cache
        g = np.asarray(grad_out).reshape(-1, self.d_model)
        a = act.reshape(-1, self.hidden)
        gw2 = g.T @ a
        gb2 = g.sum(axis=0)
        gpre = (g @ self.w2) * gelu_grad(pre.reshape(-1, self.hidden))
        gw1 = gpre.T @ x.reshape(-1, EXTRINSIC_WIDTH)
        gb1 = gpre.sum(axis=0)
        return {"w1": gw1, "b1": gb1, "w2": gw2, "b2": gb2}

    def to_tensors(self) -> list[np.ndarray]:
        return [self.w1, self.b1, self.w2, self.b2]

    @classmethod
    def from_tensors(cls, tensors: Sequence[np.ndarray]) -> "MlpBranch":
        if len(tensors) != 4:
            raise LoadError(f"MLP branch needs 4 tensors, got {len(tensors)}")
        return cls(*tensors)


@dataclass
class ConvBranch:
    """Patchify convolution over a Plücker map plus optional 1x1 layers.

    ``weights[0]`` has shape (d_model, 6, k, k); later weights are
    (d_model, d_model) pointwise layers separated by GELU.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.weights or len(self.weights) != len(self.biases):
            raise DomainError("conv branch needs matching, nonempty weight and bias lists")
        w0 = self.weights[0]
        if w0.ndim != 4 or w0.shape[1] != PLUCKER_CHANNELS or w0.shape[2] != w0.shape[3]:
            raise DomainError(f"first conv weight must be (d, 6, k, k), got {w0.shape}")
        d = w0.shape[0]
        for w in self.weights[1:]:
            if w.shape != (d, d):
                raise DomainError(f"pointwise layer must be ({d}, {d}), got {w.shape}")
        for b in self.biases:
            if b.shape != (d,):
                raise DomainError(f"conv bias must be ({d},), got {b.shape}")

    @classmethod
    def init(cls, d_model: int, kernel: int, *, seed: int, depth: int = 1, dtype=np.float64):
        if kernel < 1 or depth < 1:
            raise DomainError("kernel and depth must be positive")
        rng = np.random.default_rng(seed)
        fan0 = PLUCKER_CHANNELS * kernel * kernel
        weights = [_uniform(rng, (d_model, PLUCKER_CHANNELS, kernel, kernel), fan0, dtype)]
        biases = [_uniform(rng, (d_model,), fan0, dtype)]
        for _ in range(depth - 1):
            weights.append(_uniform(rng, (d_model, d_model), d_model, dtype))
            biases.append(_uniform(rng, (d_model,), d_model, dtype))
        return cls(weights, biases)

    @classmethod
    def zeros(cls, d_model: int, kernel: int, depth: int = 1, dtype=np.float64):
        weights = [np.zeros((d_model, PLUCKER_CHANNELS, kernel, kernel), dtype=dtype)]
        weights += [np.zeros((d_model, d_model), dtype=dtype) for _ in range(depth - 1)]
        return cls(weights, [np.zeros(d_model, dtype=dtype) for _ in range(depth)])

    @property
    def kernel(self) -> int:
        return self.weights[0].shape[2]

    @property
    def d_model(self) -> int:
        return self.weights[0].shape[0]

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"w{i}"] = w
            out[f"b{i}"] = b
        return out

    def _patches(self, x: np.ndarray) -> np.ndarray:
        k = self.kernel
        F, h, w, c = x.shape
        if h % k or w % k:
            raise DomainError(f"Plücker map {h}x{w} not divisible by kernel k={k}")
        return x.reshape(F, h // k, k, w // k, k, c)

    def forward(self, x):
        """``x``: PluckerMap, (h, w, 6) or (F, h, w, 6). Returns (..., h/k, w/k, d)."""
        if isinstance(x, PluckerMap):
            x = x.data
        x = np.asarray(x, dtype=self.weights[0].dtype)
        single = x.ndim == 3
        if single:
            x = x[None]
        if x.ndim != 4 or x.shape[-1] != PLUCKER_CHANNELS:
            raise DomainError(f"expected (F, h, w, 6) input, got {x.shape}")
        p = self._patches(x)
        y = np.einsum("fiajbc,ocab->fijo", p, self.weights[0]) + self.biases[0]
        pre = [y]
        for w, b in zip(self.weights[1:], self.biases[1:]):
            y = gelu(y) @ w.T + b
            pre.append(y)
        return (y[0] if single else y), (p, pre, single)

    def backward(self, cache, grad_out: np.ndarray) -> dict[str, np.ndarray]:
        p, pre, single = cache
        g = np.asarray(grad_out)
        if single:
            g = g[None]
        grads = {}
        for i in range(len(self.weights) - 1, 0, -1):
            a = gelu(pre[i - 1])
            d = self.d_model
            grads[f"w{i}"] = g.reshape(-1, d).T @ a.reshape(-1, d)
            grads[f"b{i}"] = g.reshape(-1, d).sum(axis=0)
            g = (g @ self.weights[i]) * gelu_grad(pre[i - 1])
        grads["w0"] = np.einsum("fiajbc,fijo->ocab", p, g)
        grads["b0"] = g.reshape(-1, self.d_model).sum(axis=0)
        return {k: grads[k] for k in self.params()}

    def to_tensors(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @classmethod
    def from_tensors(cls, tensors: Sequence[np.ndarray]) -> "ConvBranch":
        if len(tensors) < 2 or len(tensors) % 2:
            raise LoadError(f"conv branch needs an even, nonzero tensor count, got {len(tensors)}")
        return cls(list(tensors[0::2]), list(tensors[1::2]))


def encode_extrinsic(branch: MlpBranch, extrinsics) -> np.ndarray:
    """Branch output for one pose (shape (d,)) or a sequence of poses ((F, d))."""
    if isinstance(extrinsics, CameraExtrinsics):
        return branch.forward(extrinsics.flatten())[0]
    flat = np.stack([e.flatten() for e in extrinsics])
    return branch.forward(flat)[0]


def encode_plucker(branch: ConvBranch, pmap) -> np.ndarray:
    return branch.forward(pmap)[0]


def inject(z: np.ndarray, c_ext: np.ndarray, c_plk: np.ndarray) -> np.ndarray:
    """``z + c_ext + c_plk`` with ``c_ext`` broadcast over tokens."""
    z = np.asarray(z)
    c_ext = np.asarray(c_ext)
    c_plk = np.asarray(c_plk)
    if z.ndim != 2:
        raise DomainError(f"tokens must be (n, d), got {z.shape}")
    if c_ext.shape not in ((z.shape[1],), z.shape):
        raise DomainError(f"extrinsic features {c_ext.shape} do not broadcast to {z.shape}")
    if c_plk.shape != z.shape:
        raise DomainError(f"Plücker features {c_plk.shape} do not match tokens {z.shape}")
    return z + c_ext + c_plk


def save_branch(path: str | os.PathLike, branch: MlpBranch | ConvBranch) -> None:
    tensorio.save(path, branch.to_tensors())


def load_mlp_branch(path: str | os.PathLike) -> MlpBranch:
    return MlpBranch.from_tensors(tensorio.load(path))


def load_conv_branch(path: str | os.PathLike) -> ConvBranch:
    return ConvBranch.from_tensors(tensorio.load(path))
