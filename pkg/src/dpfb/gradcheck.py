"""Finite-difference checks of every parameterised operation.

Each case builds a scalar from random inputs, differentiates it with the
autodiff engine and compares every parameter tensor (and, where relevant,
input tensor) against central differences.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Mapping

import numpy as np

from . import autodiff as ad
from .flow import PotentialSpec, VelocityPotential, flow_gradient, flow_objective, potential_eval, raw_potential
from .generative import GenerativeModel, GenerativeSpec, ParticleEnsemble
from .nn import (FcnnSpec, GaussianHead, GruSpec, as_leaves, fcnn_apply, gaussian_head_apply,
                 gru_step, init_fcnn, init_gru, init_head)
from .objective import window_loss
from .oracle import finite_diff_grad, relative_error

OP_TOL = 1e-5
LOSS_TOL = 1e-4
EPS = 1e-5
# gradients whose norm is below this are compared in absolute terms
NORM_FLOOR = 1e-7


@dataclass(frozen=True)
class CheckResult:
    case: str
    tensor: str
    error: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.error < self.tol

    def line(self) -> str:
        status = "ok  " if self.passed else "FAIL"
        return f"{status} {self.case:<14} {self.tensor:<24} rel.err {self.error:.2e} (tol {self.tol:.0e})"


def _rel(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale < NORM_FLOOR:
        return float(np.linalg.norm(a - b) / NORM_FLOOR)
    return relative_error(a, b)


def check_tensors(case: str, scalar: Callable[[Mapping[str, np.ndarray]], ad.Node],
                  tensors: Mapping[str, np.ndarray], tol: float, eps: float = EPS) -> list[CheckResult]:
    """Compare autodiff gradients of ``scalar(tensors)`` with central differences."""
    leaves = as_leaves(tensors)
    out = scalar(leaves)
    grads = ad.backward(ad.Graph.of(out))
    results = []
    for name, value in tensors.items():
        def f(v, name=name):
            # recording stays on: the flow field itself is a gradient
            return float(scalar({**tensors, name: v}).value)
        fd = finite_diff_grad(f, value, eps)
        g = grads.get(leaves[name], np.zeros_like(value))  # absent leaves do not reach the scalar
        results.append(CheckResult(case, name, _rel(g, fd), tol))
    return results


def _weights(rng, shape):
    return rng.normal(size=shape)


def fcnn_case(rng) -> list[CheckResult]:
    spec = FcnnSpec((3, 5, 4, 2), "net")
    params = init_fcnn(spec, rng)
    params["x"] = rng.normal(size=(4, 3))
    R = _weights(rng, (4, 2))
    return check_tensors("fcnn", lambda t: ad.sum(fcnn_apply(spec, t, t["x"]) * R), params, OP_TOL)


def gru_case(rng) -> list[CheckResult]:
    spec = GruSpec(3, 4)
    params = init_gru(spec, rng)
    params["x"] = rng.normal(size=(5, 3))
    params["h"] = np.tanh(rng.normal(size=(5, 4)))
    R = _weights(rng, (5, 4))
    return check_tensors("gru", lambda t: ad.sum(gru_step(spec, t, t["x"], t["h"]) * R), params, OP_TOL)


def head_case(rng) -> list[CheckResult]:
    head = GaussianHead(3, (5,), 2, "head")
    params = init_head(head, rng)
    params["x"] = rng.normal(size=(4, 3))
    R1, R2 = _weights(rng, (4, 2)), _weights(rng, (4, 2))

    def scalar(t):
        mu, sigma = gaussian_head_apply(head, t, t["x"])
        return ad.sum(mu * R1) + ad.sum(sigma * R2)
    return check_tensors("gaussian_head", scalar, params, OP_TOL)


def _toy_potential_spec() -> PotentialSpec:
    return PotentialSpec(3, 2, 8, encoder_hidden=(4,), encoder_features=3, hidden=(6, 5))


def potential_case(rng) -> list[CheckResult]:
    spec = _toy_potential_spec()
    params = spec.init_params(rng)
    x = rng.normal(size=(1, 3))
    params["z"] = rng.normal(size=(4, 2))
    params["h"] = np.tanh(rng.normal(size=(4, 8)))
    R = _weights(rng, (4,))

    def phi(t):
        ens = ParticleEnsemble(t["z"], t["h"])
        return ad.sum(potential_eval(VelocityPotential(spec, t), x, ens) * R)
    results = check_tensors("potential", phi, params, OP_TOL)

    # flow field against differences of the raw potential
    pot = VelocityPotential(spec, {k: v for k, v in params.items() if k not in ("z", "h")})
    ens = ParticleEnsemble(ad.leaf(params["z"]), ad.leaf(params["h"]))
    gz, gh = flow_gradient(pot, x, ens)

    def total(zh):
        e = ParticleEnsemble(ad.constant(zh[:, :2]), ad.constant(zh[:, 2:]))
        # the centred potential sums to zero; difference the raw one instead
        return float(ad.sum(raw_potential(pot, x, e)).value)
    fd = finite_diff_grad(total, np.hstack([params["z"], params["h"]]))
    results.append(CheckResult("flow_gradient", "(z, h)", _rel(np.hstack([gz.value, gh.value]), fd), OP_TOL))
    return results


def toy_specs() -> tuple[GenerativeSpec, PotentialSpec]:
    gen = GenerativeSpec(3, 2, 8, latent_hidden=(4,), latent_features=3, prior_hidden=(5,),
                         decoder_hidden=(5,))
    return gen, _toy_potential_spec()


def window_case(rng) -> list[CheckResult]:
    """Full window loss: n_z = 2, n_h = 8, P = 4, five steps, two sequences.

    ``loss_theta`` is differenced with respect to both parameter sets.  The
    flow objectives see detached particles and a constant NIS, so their
    gradient is differenced with those recorded inputs held fixed.
    """
    gen, pot = toy_specs()
    theta = gen.init_params(rng)
    phi = pot.init_params(rng)
    groups, T, P = 2, 5, 4
    x = rng.normal(size=(groups, T, 3))
    y = rng.normal(size=(groups, T, 2))
    mask = np.array([[True, True, False, False, True], [False, True, True, False, False]])
    noise = rng.normal(size=(T, groups * P, 2))

    def run_window(t):
        return window_loss(GenerativeModel(gen, {k: t[k] for k in theta}),
                           VelocityPotential(pot, {k: t[k] for k in phi}), x, y, mask, noise)

    both = {**theta, **phi}
    results = check_tensors("window_theta", lambda t: run_window(t).loss_theta, both, LOSS_TOL)
    results = [replace(r, case="window_theta" if r.tensor in theta else "window_theta/phi")
               for r in results]

    recorded = run_window(both).steps

    def frozen_flow(t):
        params = VelocityPotential(pot, {k: t[k] for k in phi})
        terms = [flow_objective(params, s.x_rows, s.prior.detached(), s.gamma) for s in recorded]
        return sum(terms[1:], terms[0])

    leaves = as_leaves(both)
    auto = ad.backward(ad.Graph.of(run_window(leaves).loss_phi))
    for name in phi:
        fd = finite_diff_grad(lambda v, name=name: float(frozen_flow({**both, name: v}).value), phi[name])
        g = auto.get(leaves[name], np.zeros_like(phi[name]))
        results.append(CheckResult("window_phi", name, _rel(g, fd), LOSS_TOL))
    return results


def grad_of_grad_case(rng) -> list[CheckResult]:
    """d/d(params) of 0.5 * mean |grad phi|^2 on a {8, 16, 8} potential."""
    spec = PotentialSpec(2, 2, 3, encoder_hidden=(4,), encoder_features=3, hidden=(8, 16, 8))
    params = spec.init_params(rng)
    x = rng.normal(size=(1, 2))
    z = rng.normal(size=(16, 2))
    h = np.tanh(rng.normal(size=(16, 3)))

    def energy(t):
        ens = ParticleEnsemble(ad.constant(z), ad.constant(h))
        gz, gh = flow_gradient(VelocityPotential(spec, t), x, ens)
        return (0.5 / z.shape[0]) * (ad.sum(ad.square(gz)) + ad.sum(ad.square(gh)))
    return check_tensors("grad_of_grad", energy, params, LOSS_TOL)


CASES = {
    "fcnn": fcnn_case,
    "gru": gru_case,
    "gaussian_head": head_case,
    "potential": potential_case,
    "window_loss": window_case,
    "grad_of_grad": grad_of_grad_case,
}


def run(seed: int = 0, cases=None) -> list[CheckResult]:
    results = []
    for name in cases or CASES:
        results += CASES[name](np.random.default_rng([seed, list(CASES).index(name)]))
    return results
