"""Per-step and per-window losses of the particle-flow sequence model.

A step runs: prior sampling -> NIS at the prior particles -> flow objective
-> flow transport -> reconstruction at the transported particles, plus the
label term on source-domain steps.  The window loss splits into

* ``loss_theta`` = sum of reconstruction and label terms.  Its gradient reaches
  the generative parameters and, through the transport, the potential.
* ``loss_phi`` = sum of flow objectives, evaluated on detached particles with
  a constant NIS, so only the potential parameters receive its gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .flow import FlowConfig, VelocityPotential, encode_measurement, flow_objective, flow_transform, nis
from .generative import (GenerativeModel, ParticleEnsemble, data_log_likelihood, decode,
                         expand_rows, initial_ensemble, label_log_likelihood, prior_step)


@dataclass
class StepLoss:
    recon: ad.Node
    label: ad.Node
    flow: ad.Node

    def values(self) -> tuple[float, float, float]:
        return float(self.recon.value), float(self.label.value), float(self.flow.value)


@dataclass
class StepResult:
    loss: StepLoss
    ensemble: ParticleEnsemble  # transported particles, input to the next step
    prior: ParticleEnsemble
    mu_prior: ad.Node
    sigma_prior: ad.Node
    gamma: np.ndarray           # NIS at the prior particles (constant)
    x_rows: np.ndarray


def step_loss(model: GenerativeModel, potential: VelocityPotential, x_n, y_n, mask_n,
              prev: ParticleEnsemble, noise, flow_config: FlowConfig = FlowConfig()) -> StepResult:
    """Loss terms of one time step.

    ``x_n`` and ``y_n`` hold one row per group; ``mask_n`` is True on source
    (labelled) steps, one flag per group.
    """
    groups, particles = prev.groups, prev.particles
    x_n = np.atleast_2d(np.asarray(x_n, dtype=np.float64))
    mask_n = np.atleast_1d(np.asarray(mask_n, dtype=bool))
    if x_n.shape[0] != groups or mask_n.shape[0] != groups:
        raise ValueError(f"expected {groups} groups of data and mask, got {x_n.shape[0]} and {mask_n.shape[0]}")
    x_rows = expand_rows(x_n, particles)

    prior, mu_p, sigma_p = prior_step(model, prev, noise)

    with ad.no_grad():
        mu_d0, sigma_d0 = decode(model, prior)
    gamma = nis(x_rows, mu_d0.value, sigma_d0.value)

    x_feat = encode_measurement(potential, x_rows, prior)
    flow_loss = flow_objective(potential, x_rows, prior.detached(), gamma, x_feat)
    moved = flow_transform(potential, flow_config, x_rows, prior, x_feat)

    mu_d, sigma_d = decode(model, moved)
    recon = -ad.mean(data_log_likelihood(mu_d, sigma_d, x_rows))

    if mask_n.any():
        y_rows = expand_rows(y_n, particles)
        weights = expand_rows(mask_n.astype(np.float64)[:, None], particles).reshape(-1)
        label = -ad.sum(label_log_likelihood(mu_p, sigma_p, y_rows) * weights) * (1.0 / prev.rows)
    else:
        label = ad.constant(0.0)
    return StepResult(StepLoss(recon, label, flow_loss), moved, prior, mu_p, sigma_p, gamma, x_rows)


@dataclass
class WindowLoss:
    loss_theta: ad.Node
    loss_phi: ad.Node
    steps: list[StepResult]
    final: ParticleEnsemble

    @property
    def total(self) -> ad.Node:
        return self.loss_theta + self.loss_phi


def window_loss(model: GenerativeModel, potential: VelocityPotential, x, y, mask, noise,
                initial: ParticleEnsemble | None = None, particles: int | None = None,
                flow_config: FlowConfig = FlowConfig()) -> WindowLoss:
    """Summed step losses over a batch of windows.

    ``x``: (groups, T, n_x); ``y``: (groups, T, n_y); ``mask``: (groups, T);
    ``noise``: (T, groups * P, n_z).  2-D ``x``/``y`` and 1-D ``mask`` are read
    as a single window.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if x.ndim == 2:
        x, y, mask = x[None], y[None], mask[None]
    groups, length = x.shape[0], x.shape[1]
    if length < 1:
        raise ValueError("window must contain at least one step")
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape[0] != length:
        raise ValueError(f"noise has {noise.shape[0]} steps for a window of {length}")
    if initial is None:
        if particles is None:
            particles = noise.shape[1] // groups
        initial = initial_ensemble(particles, model.spec.n_z, model.spec.n_h, groups)

    ens = initial
    steps = []
    theta_terms, phi_terms = [], []
    for n in range(length):
        res = step_loss(model, potential, x[:, n], y[:, n], mask[:, n], ens, noise[n], flow_config)
        steps.append(res)
        theta_terms += [res.loss.recon, res.loss.label]
        phi_terms.append(res.loss.flow)
        ens = res.ensemble
    return WindowLoss(_sum_nodes(theta_terms), _sum_nodes(phi_terms), steps, ens)


def _sum_nodes(nodes):
    total = nodes[0]
    for n in nodes[1:]:
        total = total + n
    return total
