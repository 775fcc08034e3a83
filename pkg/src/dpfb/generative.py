"""Stochastic RNN generative model operating on particle ensembles.

Particles are stored row-wise.  A batch of ``groups`` independent sequences
with ``P`` particles each is flattened to ``groups * P`` rows, group-major, so
every per-particle network runs as one batched matrix product.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError
from .nn import (FcnnSpec, GaussianHead, GruSpec, fcnn_apply, gaussian_head_apply,
                 gru_step, init_fcnn, init_gru, init_head, reparameterize)

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class ParticleEnsemble:
    """Latent states ``z`` (rows x n_z) and hidden states ``h`` (rows x n_h)."""

    z: ad.Node
    h: ad.Node
    groups: int = 1

    def __post_init__(self):
        self.z, self.h = ad.as_node(self.z), ad.as_node(self.h)
        if self.z.shape[0] != self.h.shape[0]:
            raise ShapeError(f"z has {self.z.shape[0]} particles but h has {self.h.shape[0]}")
        if self.z.shape[0] % self.groups:
            raise ShapeError(f"{self.z.shape[0]} rows do not split into {self.groups} groups")

    @property
    def rows(self) -> int:
        return self.z.shape[0]

    @property
    def particles(self) -> int:
        return self.rows // self.groups

    def detached(self) -> "ParticleEnsemble":
        return ParticleEnsemble(ad.stop_gradient(self.z), ad.stop_gradient(self.h), self.groups)

    def values(self) -> tuple[np.ndarray, np.ndarray]:
        return self.z.value, self.h.value


def initial_ensemble(particles: int, n_z: int, n_h: int, groups: int = 1) -> ParticleEnsemble:
    rows = particles * groups
    return ParticleEnsemble(ad.constant(np.zeros((rows, n_z))),
                            ad.constant(np.zeros((rows, n_h))), groups)


@dataclass(frozen=True)
class GenerativeSpec:
    """Architecture of the stochastic RNN.

    ``n_z`` doubles as the label width because the latent prior and the label
    likelihood share their Gaussian statistics.
    """

    n_x: int
    n_z: int
    n_h: int
    latent_hidden: tuple[int, ...] = (256,)
    latent_features: int = 128
    prior_hidden: tuple[int, ...] = (256, 128)
    decoder_hidden: tuple[int, ...] = (512, 256, 128)

    @property
    def n_y(self) -> int:
        return self.n_z

    @property
    def latent_encoder(self) -> FcnnSpec:
        return FcnnSpec((self.n_z, *self.latent_hidden, self.latent_features), "latent_enc")

    @property
    def gru(self) -> GruSpec:
        return GruSpec(self.latent_features, self.n_h, "gru")

    @property
    def prior_head(self) -> GaussianHead:
        return GaussianHead(self.n_h, tuple(self.prior_hidden), self.n_z, "prior")

    @property
    def decoder_head(self) -> GaussianHead:
        return GaussianHead(self.latent_features + self.n_h, tuple(self.decoder_hidden),
                            self.n_x, "decoder")

    def init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        params = init_fcnn(self.latent_encoder, rng)
        params.update(init_gru(self.gru, rng))
        params.update(init_head(self.prior_head, rng))
        params.update(init_head(self.decoder_head, rng))
        return params

    def param_names(self) -> list[str]:
        return (self.latent_encoder.param_names() + self.gru.param_names()
                + self.prior_head.param_names() + self.decoder_head.param_names())


@dataclass
class GenerativeModel:
    spec: GenerativeSpec
    params: dict = field(repr=False)

    @classmethod
    def create(cls, spec: GenerativeSpec, seed: int = 0) -> "GenerativeModel":
        return cls(spec, spec.init_params(np.random.default_rng(seed)))


def prior_step(model: GenerativeModel, prev: ParticleEnsemble, noise):
    """Advance transformed particles of step n-1 to prior particles of step n.

    Returns ``(ensemble, mu_prior, sigma_prior)``.
    """
    spec, params = model.spec, model.params
    noise = np.asarray(ad.value_of(noise))
    if noise.shape != (prev.rows, spec.n_z):
        raise ShapeError(f"noise shape {noise.shape} does not match {prev.rows} particles x n_z={spec.n_z}")
    feat = fcnn_apply(spec.latent_encoder, params, prev.z)
    h = gru_step(spec.gru, params, feat, prev.h)
    mu, sigma = gaussian_head_apply(spec.prior_head, params, h)
    z = reparameterize(mu, sigma, noise)
    return ParticleEnsemble(z, h, prev.groups), mu, sigma


def decode(model: GenerativeModel, ensemble: ParticleEnsemble):
    spec, params = model.spec, model.params
    feat = fcnn_apply(spec.latent_encoder, params, ensemble.z)
    return gaussian_head_apply(spec.decoder_head, params, ad.concat([feat, ensemble.h], axis=1))


def gaussian_log_likelihood(mu, sigma, target) -> ad.Node:
    """Per-row diagonal Gaussian log-density of ``target``."""
    mu, sigma = ad.as_node(mu), ad.as_node(sigma)
    target = ad.as_node(target)
    if target.shape[-1] != mu.shape[-1]:
        raise ShapeError(f"target width {target.shape[-1]} != distribution width {mu.shape[-1]}")
    width = mu.shape[-1]
    resid = (target - mu) / sigma
    quad = ad.sum(ad.square(resid), axis=1)
    logdet = ad.sum(ad.log(sigma), axis=1)
    return -0.5 * quad - logdet - 0.5 * width * LOG_2PI


def label_log_likelihood(mu_prior, sigma_prior, y) -> ad.Node:
    return gaussian_log_likelihood(mu_prior, sigma_prior, y)


def data_log_likelihood(mu_dec, sigma_dec, x) -> ad.Node:
    return gaussian_log_likelihood(mu_dec, sigma_dec, x)


def expand_rows(values: np.ndarray, particles: int) -> np.ndarray:
    """Repeat per-group rows ``particles`` times (group-major)."""
    return np.repeat(np.atleast_2d(np.asarray(values, dtype=np.float64)), particles, axis=0)
