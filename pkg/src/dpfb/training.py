"""Adam optimisation, the training loop, checkpoints and inference."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .data import NormStats, TimeSeriesDataset, window
from .flow import FlowConfig, PotentialSpec, VelocityPotential, flow_transform
from .generative import GenerativeModel, GenerativeSpec, ParticleEnsemble, prior_step
from .nn import as_leaves
from .objective import window_loss

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "dpfb-checkpoint"
CHECKPOINT_VERSION = 1
LOG_HEADER = ("epoch", "loss_theta", "loss_phi", "lr", "seconds")


class TrainingError(FloatingPointError):
    """Non-finite loss during training."""


@dataclass(frozen=True)
class ModelConfig:
    """Network widths shared by the generative model and the potential."""

    n_h: int = 512
    latent_hidden: tuple[int, ...] = (256,)
    latent_features: int = 128
    prior_hidden: tuple[int, ...] = (256, 128)
    decoder_hidden: tuple[int, ...] = (512, 256, 128)
    encoder_hidden: tuple[int, ...] = (128,)
    encoder_features: int = 128
    potential_hidden: tuple[int, ...] = (512, 256, 128)

    def generative_spec(self, n_x: int, n_y: int) -> GenerativeSpec:
        return GenerativeSpec(n_x, n_y, self.n_h, self.latent_hidden, self.latent_features,
                              self.prior_hidden, self.decoder_hidden)

    def potential_spec(self, n_x: int, n_y: int) -> PotentialSpec:
        return PotentialSpec(n_x, n_y, self.n_h, self.encoder_hidden, self.encoder_features,
                             self.potential_hidden)


SMALL_MODEL = ModelConfig(n_h=32, latent_hidden=(32,), latent_features=16, prior_hidden=(32,),
                          decoder_hidden=(32,), encoder_hidden=(16,), encoder_features=16,
                          potential_hidden=(32, 32))


@dataclass(frozen=True)
class TrainConfig:
    window_length: int = 100
    particles: int = 8
    batch_size: int = 16
    initial_lr: float = 1e-4
    epochs: int = 300
    l2: float = 0.01
    lr_decay: float = 0.99
    seed: int = 0
    checkpoint_every: int = 25
    clip_norm: float = 0.0  # global gradient-norm cap per parameter set; 0 disables

    def __post_init__(self):
        for name in ("window_length", "particles", "batch_size", "epochs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.initial_lr <= 0 or self.lr_decay <= 0 or self.l2 < 0:
            raise ValueError("learning rate and decay must be positive, l2 non-negative")
        if self.clip_norm < 0:
            raise ValueError("clip_norm must be non-negative")


def build_models(model_config: ModelConfig, n_x: int, n_y: int, seed: int = 0,
                 ablation: bool = False) -> tuple[GenerativeModel, VelocityPotential]:
    """Freshly initialised model pair; ``ablation`` gives an all-zero potential."""
    gen = GenerativeModel.create(model_config.generative_spec(n_x, n_y), seed)
    spec = model_config.potential_spec(n_x, n_y)
    pot = VelocityPotential.zeros(spec) if ablation else VelocityPotential.create(spec, seed + 1)
    return gen, pot


# ---------------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(state: AdamState, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              lr: float, l2: float = 0.0) -> dict[str, np.ndarray]:
    """One Adam update with decoupled weight decay.

    Parameters are first shrunk by ``(1 - lr * l2)``, then moved by the
    bias-corrected Adam direction.  ``state`` is updated in place.
    """
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    out = {}
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        out[name] = p * (1.0 - lr * l2) - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return out


def clip_by_global_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    """Rescale ``grads`` so their joint Euclidean norm is at most ``max_norm`` (0: unchanged)."""
    if max_norm <= 0:
        return dict(grads)
    total = float(np.sqrt(sum(np.sum(g * g) for g in grads.values())))
    if total <= max_norm:
        return dict(grads)
    scale = max_norm / total
    return {k: g * scale for k, g in grads.items()}


# ---------------------------------------------------------------------------
# checkpoints

@dataclass
class Checkpoint:
    gen_spec: GenerativeSpec
    pot_spec: PotentialSpec
    flow: FlowConfig
    theta: dict[str, np.ndarray]
    phi: dict[str, np.ndarray]
    x_stats: NormStats | None = None
    y_stats: NormStats | None = None
    train_config: TrainConfig | None = None
    seed: int = 0
    epoch: int = 0
    x_names: tuple[str, ...] = ()
    y_names: tuple[str, ...] = ()

    @property
    def model(self) -> GenerativeModel:
        return GenerativeModel(self.gen_spec, self.theta)

    @property
    def potential(self) -> VelocityPotential:
        return VelocityPotential(self.pot_spec, self.phi)

    def to_dict(self) -> dict:
        def tensors(params):
            return {k: {"shape": list(v.shape), "data": [float(a) for a in v.reshape(-1)]}
                    for k, v in params.items()}
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "seed": self.seed,
            "epoch": self.epoch,
            "generative": asdict(self.gen_spec),
            "potential": asdict(self.pot_spec),
            "flow": asdict(self.flow),
            "train": asdict(self.train_config) if self.train_config else None,
            "x_names": list(self.x_names),
            "y_names": list(self.y_names),
            "x_stats": self.x_stats.to_dict() if self.x_stats else None,
            "y_stats": self.y_stats.to_dict() if self.y_stats else None,
            "theta": tensors(self.theta),
            "phi": tensors(self.phi),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Checkpoint":
        if d.get("format") != CHECKPOINT_FORMAT:
            raise ValueError("not a dpfb checkpoint")
        if d.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {d.get('version')}")

        def tensors(block):
            return {k: np.asarray(t["data"], dtype=np.float64).reshape(t["shape"]) for k, t in block.items()}

        def spec(kind, block):
            return kind(**{k: tuple(v) if isinstance(v, list) else v for k, v in block.items()})

        return cls(
            gen_spec=spec(GenerativeSpec, d["generative"]),
            pot_spec=spec(PotentialSpec, d["potential"]),
            flow=FlowConfig(**d["flow"]),
            theta=tensors(d["theta"]),
            phi=tensors(d["phi"]),
            x_stats=NormStats.from_dict(d["x_stats"]) if d.get("x_stats") else None,
            y_stats=NormStats.from_dict(d["y_stats"]) if d.get("y_stats") else None,
            train_config=TrainConfig(**d["train"]) if d.get("train") else None,
            seed=d.get("seed", 0),
            epoch=d.get("epoch", 0),
            x_names=tuple(d.get("x_names", ())),
            y_names=tuple(d.get("y_names", ())),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# training

@dataclass
class EpochRecord:
    epoch: int
    loss_theta: float
    loss_phi: float
    lr: float
    seconds: float

    def row(self) -> list:
        return [self.epoch, repr(self.loss_theta), repr(self.loss_phi), repr(self.lr), f"{self.seconds:.3f}"]


@dataclass
class BatchGradients:
    loss_theta: float
    loss_phi: float
    theta: dict[str, np.ndarray]
    phi: dict[str, np.ndarray]
    final: tuple[np.ndarray, np.ndarray]


def batch_gradients(model: GenerativeModel, potential: VelocityPotential, x, y, mask, noise,
                    initial: ParticleEnsemble, flow_config: FlowConfig = FlowConfig(),
                    train_potential: bool = True) -> BatchGradients:
    """Window loss of a batch and its gradients.

    The generative parameters get d loss_theta; the potential gets
    d (loss_theta + loss_phi), since reconstruction reaches it through the
    transport while loss_phi is detached from the generative parameters.
    """
    theta = as_leaves(model.params)
    phi = as_leaves(potential.params, requires_grad=train_potential)
    wl = window_loss(GenerativeModel(model.spec, theta), VelocityPotential(potential.spec, phi),
                     x, y, mask, noise, initial=initial, flow_config=flow_config)
    total = wl.total
    if not np.isfinite(total.value):
        raise TrainingError("non-finite window loss")
    grads = ad.backward(ad.Graph.of(total))
    return BatchGradients(
        float(wl.loss_theta.value), float(wl.loss_phi.value),
        {k: grads[n] for k, n in theta.items()},
        {k: grads[n] for k, n in phi.items()},
        (wl.final.z.value.copy(), wl.final.h.value.copy()),
    )


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[EpochRecord]


def write_loss_log(history: list[EpochRecord], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_HEADER)
        for rec in history:
            writer.writerow(rec.row())


def train(config: TrainConfig, dataset: TimeSeriesDataset, model: GenerativeModel,
          potential: VelocityPotential, flow_config: FlowConfig = FlowConfig(),
          checkpoint_path: str | Path | None = None, log_path: str | Path | None = None,
          train_potential: bool = True) -> TrainResult:
    """Fit generative and potential parameters on windows of ``dataset``.

    ``dataset`` should already be normalised; its stats are copied into the
    checkpoint.  With ``train_potential=False`` the potential stays fixed
    (a zero potential gives the prior-only ablation).

    Windows are visited in a seeded random order.  The transported ensemble
    at the end of each window is cached (detached) and used as the starting
    ensemble of the following window the next time it is visited.
    """
    rng = np.random.default_rng(config.seed)
    windows = window(dataset, config.window_length)
    spec = model.spec
    theta = {k: np.array(v, dtype=np.float64) for k, v in model.params.items()}
    phi = {k: np.array(v, dtype=np.float64) for k, v in potential.params.items()}
    opt_theta, opt_phi = AdamState(), AdamState()
    P = config.particles
    carry: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    history: list[EpochRecord] = []
    lr = config.initial_lr

    def checkpoint(epoch):
        return Checkpoint(spec, potential.spec, flow_config,
                          {k: v.copy() for k, v in theta.items()},
                          {k: v.copy() for k, v in phi.items()},
                          dataset.x_stats, dataset.y_stats, config, config.seed, epoch,
                          dataset.x_names, dataset.y_names)

    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        order = rng.permutation(len(windows))
        sums = [0.0, 0.0]
        n_batches = 0
        for b, first in enumerate(range(0, len(order), config.batch_size)):
            idx = order[first:first + config.batch_size]
            batch = [windows[i] for i in idx]
            B = len(batch)
            z0 = np.zeros((B * P, spec.n_z))
            h0 = np.zeros((B * P, spec.n_h))
            for j, w in enumerate(batch):
                if w.index - 1 in carry:
                    z0[j * P:(j + 1) * P], h0[j * P:(j + 1) * P] = carry[w.index - 1]
            noise = rng.standard_normal((config.window_length, B * P, spec.n_z))
            try:
                res = batch_gradients(
                    GenerativeModel(spec, theta), VelocityPotential(potential.spec, phi),
                    np.stack([w.x for w in batch]), np.stack([w.y for w in batch]),
                    np.stack([w.mask for w in batch]), noise,
                    ParticleEnsemble(ad.constant(z0), ad.constant(h0), B), flow_config, train_potential)
            except FloatingPointError as exc:
                raise TrainingError(f"epoch {epoch}, batch {b}: {exc}") from None
            if not (np.isfinite(res.loss_theta) and np.isfinite(res.loss_phi)):
                raise TrainingError(f"epoch {epoch}, batch {b}: non-finite loss")
            theta = adam_step(opt_theta, theta, clip_by_global_norm(res.theta, config.clip_norm), lr, config.l2)
            if train_potential:
                phi = adam_step(opt_phi, phi, clip_by_global_norm(res.phi, config.clip_norm), lr, config.l2)
            zf, hf = res.final
            for j, w in enumerate(batch):
                carry[w.index] = (zf[j * P:(j + 1) * P].copy(), hf[j * P:(j + 1) * P].copy())
            sums[0] += res.loss_theta
            sums[1] += res.loss_phi
            n_batches += 1
        rec = EpochRecord(epoch, sums[0] / n_batches, sums[1] / n_batches, lr,
                          time.perf_counter() - start)
        history.append(rec)
        log.info("epoch %d loss_theta=%.4f loss_phi=%.4f lr=%.3g (%.1fs)", epoch,
                 rec.loss_theta, rec.loss_phi, lr, rec.seconds)
        lr *= config.lr_decay
        if checkpoint_path and epoch % config.checkpoint_every == 0:
            checkpoint(epoch).save(checkpoint_path)
        if log_path:
            write_loss_log(history, log_path)

    final = checkpoint(config.epochs)
    if checkpoint_path:
        final.save(checkpoint_path)
    return TrainResult(final, history)


# ---------------------------------------------------------------------------
# inference

@dataclass
class InferenceResult:
    y_pred: np.ndarray        # label predictions (original units when stats are known)
    z_prior: np.ndarray
    h_prior: np.ndarray
    z_post: np.ndarray        # transported latent states
    h_post: np.ndarray        # transported hidden states


def infer(checkpoint: Checkpoint, x: np.ndarray, normalized: bool = False) -> InferenceResult:
    """Single noise-free particle rollout with the flow applied at every step.

    The prediction at step n is the prior mean given the hidden state of step
    n, i.e. computed before ``x_n`` enters through the flow.
    """
    x = np.asarray(x, dtype=np.float64)
    spec = checkpoint.gen_spec
    if x.ndim != 2 or x.shape[1] != spec.n_x:
        raise ValueError(f"expected data of shape (L, {spec.n_x}), got {x.shape}")
    if not normalized and checkpoint.x_stats is not None:
        x = checkpoint.x_stats.apply(x)
    model, potential = checkpoint.model, checkpoint.potential
    L = x.shape[0]
    out = {k: np.empty((L, w)) for k, w in
           (("y", spec.n_z), ("zp", spec.n_z), ("hp", spec.n_h), ("zb", spec.n_z), ("hb", spec.n_h))}
    z = np.zeros((1, spec.n_z))
    h = np.zeros((1, spec.n_h))
    zero = np.zeros((1, spec.n_z))
    for n in range(L):
        prev = ParticleEnsemble(ad.constant(z), ad.constant(h))
        with ad.no_grad():
            prior, mu, _ = prior_step(model, prev, zero)
        start = ParticleEnsemble(ad.leaf(prior.z.value), ad.leaf(prior.h.value))
        moved = flow_transform(potential, checkpoint.flow, x[n:n + 1], start)
        z, h = moved.z.value, moved.h.value
        out["y"][n] = mu.value[0]
        out["zp"][n], out["hp"][n] = prior.z.value[0], prior.h.value[0]
        out["zb"][n], out["hb"][n] = z[0], h[0]
    y = out["y"]
    if not normalized and checkpoint.y_stats is not None:
        y = checkpoint.y_stats.invert(y)
    return InferenceResult(y, out["zp"], out["hp"], out["zb"], out["hb"])
