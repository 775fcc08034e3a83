"""Potential-driven particle flow and its training objective.

The flow moves every particle ``(z, h)`` along the gradient of a learned
scalar potential ``phi(enc(x), z, h)``.  ``phi`` is fitted by minimising

    0.5 * E[|grad phi|^2] + 0.5 * Cov[phi, nis]

over the prior ensemble, whose stationary point is the weak form of
``div(q grad phi) = 0.5 * q * (nis - E[nis])``.  Because the objective
contains ``grad phi``, its gradient with respect to the potential parameters
is a gradient of a gradient; the flow field is therefore built with
``autodiff.grad(..., create_graph=True)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError
from .generative import ParticleEnsemble, expand_rows
from .nn import FcnnSpec, fcnn_apply, init_fcnn


class FlowError(FloatingPointError):
    """Raised when the flow produces non-finite particles."""


@dataclass(frozen=True)
class FlowConfig:
    step_size: float = 1.0
    num_steps: int = 1

    def __post_init__(self):
        if self.num_steps < 1 or self.step_size <= 0:
            raise ValueError("flow needs num_steps >= 1 and step_size > 0")
        if abs(self.num_steps * self.step_size - 1.0) > 1e-12:
            raise ValueError(f"num_steps * step_size must equal 1, got "
                             f"{self.num_steps} * {self.step_size}")

    @classmethod
    def with_steps(cls, num_steps: int) -> "FlowConfig":
        return cls(1.0 / num_steps, num_steps)


@dataclass(frozen=True)
class PotentialSpec:
    n_x: int
    n_z: int
    n_h: int
    encoder_hidden: tuple[int, ...] = (128,)
    encoder_features: int = 128
    hidden: tuple[int, ...] = (512, 256, 128)
    activation: str = "leaky_relu"

    @property
    def measurement_encoder(self) -> FcnnSpec:
        return FcnnSpec((self.n_x, *self.encoder_hidden, self.encoder_features), "meas_enc")

    @property
    def net(self) -> FcnnSpec:
        return FcnnSpec((self.encoder_features + self.n_z + self.n_h, *self.hidden, 1), "potential",
                        activation=self.activation)

    def init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        params = init_fcnn(self.measurement_encoder, rng)
        params.update(init_fcnn(self.net, rng))
        return params

    def param_names(self) -> list[str]:
        return self.measurement_encoder.param_names() + self.net.param_names()


@dataclass
class VelocityPotential:
    spec: PotentialSpec
    params: dict = field(repr=False)

    @classmethod
    def create(cls, spec: PotentialSpec, seed: int = 0) -> "VelocityPotential":
        return cls(spec, spec.init_params(np.random.default_rng(seed)))

    @classmethod
    def zeros(cls, spec: PotentialSpec) -> "VelocityPotential":
        params = spec.init_params(np.random.default_rng(0))
        return cls(spec, {k: np.zeros_like(v) for k, v in params.items()})

    # Subclasses may override these two to supply hand-built potentials.
    def encode(self, x_rows) -> ad.Node:
        return fcnn_apply(self.spec.measurement_encoder, self.params, x_rows)

    def raw(self, x_feat, z, h) -> ad.Node:
        """Uncentred potential, one value per row."""
        inp = ad.concat([x_feat, z, h], axis=1)
        return ad.reshape(fcnn_apply(self.spec.net, self.params, inp), (z.shape[0],))


def _x_rows(x, ensemble: ParticleEnsemble) -> np.ndarray:
    x = np.atleast_2d(np.asarray(ad.value_of(x), dtype=np.float64))
    if x.shape[0] == ensemble.rows:
        return x
    if x.shape[0] != ensemble.groups:
        raise ShapeError(f"x has {x.shape[0]} rows; expected {ensemble.groups} groups "
                         f"or {ensemble.rows} particles")
    return expand_rows(x, ensemble.particles)


def encode_measurement(potential: VelocityPotential, x, ensemble: ParticleEnsemble) -> ad.Node:
    return potential.encode(_x_rows(x, ensemble))


def raw_potential(potential: VelocityPotential, x, ensemble: ParticleEnsemble,
                  x_feat: ad.Node | None = None) -> ad.Node:
    """Potential per particle without the ensemble-mean subtraction."""
    if x_feat is None:
        x_feat = encode_measurement(potential, x, ensemble)
    return potential.raw(x_feat, ensemble.z, ensemble.h)


def _center(values: ad.Node, groups: int) -> ad.Node:
    rows = values.shape[0]
    grid = ad.reshape(values, (groups, rows // groups))
    return ad.reshape(grid - ad.mean(grid, axis=1, keepdims=True), (rows,))


def nis(x, mu_dec, sigma_dec):
    """Normalised innovation squared per particle: sum_k ((x_k - mu_k) / sigma_k)^2."""
    x = np.asarray(ad.value_of(x), dtype=np.float64)
    mu = np.asarray(ad.value_of(mu_dec), dtype=np.float64)
    sigma = np.asarray(ad.value_of(sigma_dec), dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[0] != mu.shape[0]:
        x = np.broadcast_to(x, mu.shape) if x.shape[0] == 1 else expand_rows(x, mu.shape[0] // x.shape[0])
    return np.sum(((x - mu) / sigma) ** 2, axis=1)


def potential_eval(potential: VelocityPotential, x, ensemble: ParticleEnsemble,
                   x_feat: ad.Node | None = None) -> ad.Node:
    """Mean-subtracted potential per particle (zero mean within each group)."""
    if x_feat is None:
        x_feat = encode_measurement(potential, x, ensemble)
    return _center(potential.raw(x_feat, ensemble.z, ensemble.h), ensemble.groups)


def flow_gradient(potential: VelocityPotential, x, ensemble: ParticleEnsemble,
                  x_feat: ad.Node | None = None) -> tuple[ad.Node, ad.Node]:
    """Per-particle ``(d phi / d z, d phi / d h)`` as differentiable nodes.

    The gradient is taken of the raw potential: subtracting the ensemble mean
    is a constant shift of the field and does not change it.
    """
    if x_feat is None:
        x_feat = encode_measurement(potential, x, ensemble)
    z, h = ensemble.z, ensemble.h
    if z.op is not None or z.kind == "const":
        z = ad.add(z, 0.0)  # fresh handle: partials treat z and h as independent inputs
    if h.op is not None or h.kind == "const":
        h = ad.add(h, 0.0)
    gz, gh = ad.grad(ad.sum(potential.raw(x_feat, z, h)), [z, h], create_graph=True)
    return gz, gh


def flow_transform(potential: VelocityPotential, config: FlowConfig, x,
                   ensemble: ParticleEnsemble, x_feat: ad.Node | None = None) -> ParticleEnsemble:
    """Forward-Euler transport of every particle along ``grad phi``."""
    if x_feat is None:
        x_feat = encode_measurement(potential, x, ensemble)
    current = ensemble
    for k in range(config.num_steps):
        gz, gh = flow_gradient(potential, x, current, x_feat)
        z = current.z + config.step_size * gz
        h = current.h + config.step_size * gh
        if not (np.all(np.isfinite(z.value)) and np.all(np.isfinite(h.value))):
            raise FlowError(f"non-finite particles after flow step {k + 1} of {config.num_steps}")
        current = ParticleEnsemble(z, h, ensemble.groups)
    return current


def flow_objective(potential: VelocityPotential, x, ensemble: ParticleEnsemble, gamma,
                   x_feat: ad.Node | None = None) -> ad.Node:
    """``0.5 * mean |grad phi|^2 + 0.5 * Cov(phi, nis)``, averaged over groups.

    ``gamma`` is treated as a constant.  The covariance uses the population
    (1/P) normaliser within each group.
    """
    if ensemble.particles < 2:
        raise ValueError("flow objective needs at least 2 particles per group")
    if x_feat is None:
        x_feat = encode_measurement(potential, x, ensemble)
    gamma = np.asarray(ad.value_of(gamma), dtype=np.float64).reshape(-1)
    if gamma.shape[0] != ensemble.rows:
        raise ShapeError(f"gamma has {gamma.shape[0]} entries for {ensemble.rows} particles")
    gz, gh = flow_gradient(potential, x, ensemble, x_feat)
    sq = ad.sum(ad.square(gz)) + ad.sum(ad.square(gh))
    phi = potential_eval(potential, x, ensemble, x_feat)
    grid = gamma.reshape(ensemble.groups, -1)
    gamma_c = (grid - grid.mean(axis=1, keepdims=True)).reshape(-1)
    cov = ad.sum(phi * gamma_c)
    return (0.5 / ensemble.rows) * (sq + cov)


def covariance_term(potential: VelocityPotential, x, ensemble: ParticleEnsemble, gamma) -> float:
    """The ``0.5 * Cov(phi, nis)`` part alone (diagnostics and tests)."""
    phi = potential_eval(potential, x, ensemble).value.reshape(ensemble.groups, -1)
    g = np.asarray(gamma, dtype=np.float64).reshape(ensemble.groups, -1)
    cov = np.mean((phi - phi.mean(axis=1, keepdims=True)) * (g - g.mean(axis=1, keepdims=True)), axis=1)
    return float(0.5 * cov.mean())
