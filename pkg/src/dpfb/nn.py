"""Fully connected networks, a GRU cell and Gaussian heads on autodiff nodes.

Parameters live in flat ``name -> array`` dictionaries.  Every spec carries a
``name`` that prefixes its parameter keys, so one dictionary can hold a whole
model.  Apply functions accept either arrays or :class:`~dpfb.autodiff.Node`
objects as parameters; passing nodes makes the result differentiable with
respect to them.

GRU convention (gate order reset, update, candidate; biases on both paths)::

    r  = sigmoid(x W_ir + b_ir + h W_hr + b_hr)
    u  = sigmoid(x W_iu + b_iu + h W_hu + b_hu)
    c  = tanh(x W_ic + b_ic + r * (h W_hc + b_hc))
    h' = (1 - u) * c + u * h
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError

SIGMA_FLOOR = 1e-4
ACTIVATIONS = {"leaky_relu": ad.leaky_relu, "tanh": ad.tanh, "softplus": ad.softplus}


@dataclass(frozen=True)
class FcnnSpec:
    """Layer widths ``(input, hidden..., output)``.

    Hidden layers use ``activation`` (leaky ReLU by default).  The output
    layer is linear unless ``activate_output`` is set (used for trunks
    feeding further maps).
    """

    widths: tuple[int, ...]
    name: str = "fcnn"
    activate_output: bool = False
    activation: str = "leaky_relu"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 2:
            raise ValueError("an FCNN needs at least one layer (two widths)")
        if min(self.widths) < 1:
            raise ValueError(f"layer widths must be >= 1, got {self.widths}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}; choose from {sorted(ACTIVATIONS)}")

    @property
    def in_width(self) -> int:
        return self.widths[0]

    @property
    def out_width(self) -> int:
        return self.widths[-1]

    def param_names(self) -> list[str]:
        names = []
        for i in range(len(self.widths) - 1):
            names += [f"{self.name}.{i}.W", f"{self.name}.{i}.b"]
        return names


@dataclass(frozen=True)
class GruSpec:
    input_width: int
    hidden_width: int
    name: str = "gru"

    def __post_init__(self):
        if self.input_width < 1 or self.hidden_width < 1:
            raise ValueError("GRU widths must be >= 1")

    def param_names(self) -> list[str]:
        return [f"{self.name}.W_i", f"{self.name}.b_i", f"{self.name}.W_h", f"{self.name}.b_h"]


@dataclass(frozen=True)
class GaussianHead:
    """Shared leaky-ReLU trunk followed by separate mean and scale maps."""

    in_width: int
    hidden: tuple[int, ...]
    out_width: int
    name: str = "head"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(w) for w in self.hidden))

    @property
    def trunk(self) -> FcnnSpec | None:
        if not self.hidden:
            return None
        return FcnnSpec((self.in_width, *self.hidden), f"{self.name}.trunk", activate_output=True)

    @property
    def feature_width(self) -> int:
        return self.hidden[-1] if self.hidden else self.in_width

    def param_names(self) -> list[str]:
        names = self.trunk.param_names() if self.trunk else []
        return names + [f"{self.name}.mu.W", f"{self.name}.mu.b",
                        f"{self.name}.sigma.W", f"{self.name}.sigma.b"]

    def mean_branch(self) -> FcnnSpec:
        return FcnnSpec((self.in_width, *self.hidden, self.out_width), f"{self.name}.mean_branch")

    def mean_branch_params(self, params: Mapping) -> dict:
        """Rename trunk + mean parameters so ``mean_branch()`` can consume them."""
        out = {}
        n = len(self.hidden)
        for i in range(n):
            for p in ("W", "b"):
                out[f"{self.name}.mean_branch.{i}.{p}"] = params[f"{self.name}.trunk.{i}.{p}"]
        out[f"{self.name}.mean_branch.{n}.W"] = params[f"{self.name}.mu.W"]
        out[f"{self.name}.mean_branch.{n}.b"] = params[f"{self.name}.mu.b"]
        return out


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_fcnn(spec: FcnnSpec, rng: np.random.Generator) -> dict[str, np.ndarray]:
    params = {}
    for i, (a, b) in enumerate(zip(spec.widths[:-1], spec.widths[1:])):
        params[f"{spec.name}.{i}.W"] = _uniform(rng, a, (a, b))
        params[f"{spec.name}.{i}.b"] = _uniform(rng, a, (b,))
    return params


def init_gru(spec: GruSpec, rng: np.random.Generator) -> dict[str, np.ndarray]:
    n, m = spec.hidden_width, spec.input_width
    return {
        f"{spec.name}.W_i": _uniform(rng, m, (m, 3 * n)),
        f"{spec.name}.b_i": _uniform(rng, m, (3 * n,)),
        f"{spec.name}.W_h": _uniform(rng, n, (n, 3 * n)),
        f"{spec.name}.b_h": _uniform(rng, n, (3 * n,)),
    }


def init_head(head: GaussianHead, rng: np.random.Generator) -> dict[str, np.ndarray]:
    params = init_fcnn(head.trunk, rng) if head.trunk else {}
    f, o = head.feature_width, head.out_width
    for branch in ("mu", "sigma"):
        params[f"{head.name}.{branch}.W"] = _uniform(rng, f, (f, o))
        params[f"{head.name}.{branch}.b"] = _uniform(rng, f, (o,))
    return params


def _check_width(x, width: int, what: str):
    got = x.shape[-1] if len(x.shape) else None
    if got != width:
        raise ShapeError(f"{what}: expected input width {width}, got shape {tuple(x.shape)}")


def fcnn_apply(spec: FcnnSpec, params: Mapping, x) -> ad.Node:
    x = ad.as_node(x)
    _check_width(x, spec.in_width, spec.name)
    act = ACTIVATIONS[spec.activation]
    n_layers = len(spec.widths) - 1
    for i in range(n_layers):
        x = ad.matmul(x, params[f"{spec.name}.{i}.W"]) + params[f"{spec.name}.{i}.b"]
        if i < n_layers - 1 or spec.activate_output:
            x = act(x)
    return x


def gru_step(spec: GruSpec, params: Mapping, x, h_prev) -> ad.Node:
    x, h_prev = ad.as_node(x), ad.as_node(h_prev)
    _check_width(x, spec.input_width, f"{spec.name} input")
    _check_width(h_prev, spec.hidden_width, f"{spec.name} state")
    n = spec.hidden_width
    gi = ad.matmul(x, params[f"{spec.name}.W_i"]) + params[f"{spec.name}.b_i"]
    gh = ad.matmul(h_prev, params[f"{spec.name}.W_h"]) + params[f"{spec.name}.b_h"]
    reset = ad.sigmoid(gi[:, :n] + gh[:, :n])
    update = ad.sigmoid(gi[:, n:2 * n] + gh[:, n:2 * n])
    cand = ad.tanh(gi[:, 2 * n:] + reset * gh[:, 2 * n:])
    return cand + update * (h_prev - cand)


def gaussian_head_apply(head: GaussianHead, params: Mapping, x) -> tuple[ad.Node, ad.Node]:
    """Return ``(mu, sigma)`` with ``sigma = softplus(raw) + 1e-4``."""
    x = ad.as_node(x)
    _check_width(x, head.in_width, head.name)
    feat = fcnn_apply(head.trunk, params, x) if head.trunk else x
    mu = ad.matmul(feat, params[f"{head.name}.mu.W"]) + params[f"{head.name}.mu.b"]
    raw = ad.matmul(feat, params[f"{head.name}.sigma.W"]) + params[f"{head.name}.sigma.b"]
    sigma = ad.softplus(raw) + SIGMA_FLOOR
    return mu, sigma


def reparameterize(mu, sigma, noise) -> ad.Node:
    mu, sigma = ad.as_node(mu), ad.as_node(sigma)
    if mu.shape != sigma.shape or mu.shape != np.shape(ad.value_of(noise)):
        raise ShapeError(f"reparameterize: shapes {mu.shape}, {sigma.shape}, "
                         f"{np.shape(ad.value_of(noise))} differ")
    return mu + sigma * noise


def as_leaves(params: Mapping[str, np.ndarray], requires_grad: bool = True) -> dict[str, ad.Node]:
    """Wrap a parameter dictionary as named autodiff leaves."""
    return {k: ad.leaf(v, name=k, requires_grad=requires_grad) for k, v in params.items()}
