"""Training objectives over batches.

Clouds are ``(B, N, 3)`` tensors, mode vectors ``(B, mode_dim)``, labels
``(B,)`` integer tensors. Every loss is a batch mean of per-object terms.
"""

import json
import time
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .geometry import DEFAULT_EPSILON, batch_mappings
from .nets import ModelBundle

FAKE_TERMS = ("generated", "raw_source")


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            value = getattr(self, name)
            if not (value >= 0 and np.isfinite(value)):
                raise ValueError(f"loss weight {name} must be a finite value >= 0, got {value}")


@dataclass
class LossReport:
    """Scalar loss components of one step; components a stage does not use are 0."""

    l_gan_f: float = 0.0
    l_gan_g: float = 0.0
    l_recon_ae: float = 0.0
    l_recon_g: float = 0.0
    l_latent: float = 0.0
    l_cls: float = 0.0
    total: float = 0.0

    def to_record(self, step: int, stage: str, wall_clock: Optional[float] = None) -> dict:
        rec = {"step": step, "stage": stage}
        rec.update(asdict(self))
        rec["wall_clock"] = time.time() if wall_clock is None else wall_clock
        return rec


class TrainingLog:
    """Append-only JSON-lines log, one record per optimisation step."""

    def __init__(self, path):
        self.path = path
        self._fh = open(path, "a", encoding="utf-8")

    def write(self, record: dict) -> None:
        self._fh.write(json.dumps(record, sort_keys=True) + "\n")
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# --------------------------------------------------------------------------
# EMD with a fixed-assignment subgradient
# --------------------------------------------------------------------------

class _EMDFunction(torch.autograd.Function):
    @staticmethod
    def forward(ctx, pred, target, method, epsilon):
        a = pred.detach().cpu().double().numpy()
        b = target.detach().cpu().double().numpy()
        if not (np.isfinite(a).all() and np.isfinite(b).all()):
            # no assignment exists; report NaN so training loops see the divergence
            ctx.save_for_backward(torch.zeros_like(pred), torch.zeros_like(target))
            return torch.full((a.shape[0],), float("nan"), dtype=pred.dtype)
        mappings = batch_mappings(a, b, method, epsilon)
        matched = np.take_along_axis(b, mappings[..., None], axis=1)
        diff = a - matched
        norm = np.sqrt((diff * diff).sum(-1, keepdims=True))
        cost = norm[..., 0].mean(axis=1)
        # coincident pairs contribute a zero subgradient
        grad = np.where(norm > 0, diff / (a.shape[1] * np.where(norm > 0, norm, 1.0)), 0.0)
        grad_target = np.zeros_like(grad)
        np.put_along_axis(grad_target, mappings[..., None], -grad, axis=1)
        ctx.save_for_backward(torch.from_numpy(grad).to(pred.dtype), torch.from_numpy(grad_target).to(target.dtype))
        return torch.from_numpy(cost).to(pred.dtype)

    @staticmethod
    def backward(ctx, grad_out):
        grad_pred, grad_target = ctx.saved_tensors
        scale = grad_out[:, None, None]
        return scale * grad_pred, scale * grad_target, None, None


def emd(pred: torch.Tensor, target: torch.Tensor, method: str = "approx",
        epsilon: float = DEFAULT_EPSILON) -> torch.Tensor:
    """Per-pair EMD of two (B, N, 3) batches, differentiable in both."""
    if pred.shape != target.shape:
        raise ValueError(f"EMD needs equal shapes, got {tuple(pred.shape)} and {tuple(target.shape)}")
    return _EMDFunction.apply(pred, target, method, epsilon)


# --------------------------------------------------------------------------
# building blocks shared by the public losses
# --------------------------------------------------------------------------

def _check_batch(batch: torch.Tensor, what: str = "source batch") -> None:
    if batch.ndim != 3 or batch.shape[0] == 0:
        raise ValueError(f"{what} must be a non-empty (B, N, 3) tensor, got shape {tuple(batch.shape)}")


def _check_z(batch: torch.Tensor, z: torch.Tensor, bundle: ModelBundle) -> None:
    if z.shape[0] != batch.shape[0]:
        raise ValueError(f"mode batch has {z.shape[0]} rows but source batch has {batch.shape[0]}")
    if z.shape[1] != bundle.config.mode_dim:
        raise ValueError(f"mode vectors have dim {z.shape[1]}, expected {bundle.config.mode_dim}")


def lsgan_discriminator(real_scores: torch.Tensor, fake_scores: torch.Tensor) -> torch.Tensor:
    return ((real_scores - 1.0) ** 2).mean() + (fake_scores ** 2).mean()


def lsgan_generator(fake_scores: torch.Tensor) -> torch.Tensor:
    return ((fake_scores - 1.0) ** 2).mean()


def gaussian_kl(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """KL(N(mu, exp(logvar)) || N(0, I)) summed over dims, averaged over the batch."""
    return (-0.5 * (1.0 + logvar - mu ** 2 - logvar.exp()).sum(dim=1)).mean()


def latent_l1(z: torch.Tensor, z_hat: torch.Tensor) -> torch.Tensor:
    return (z - z_hat).abs().sum(dim=1).mean()


def generate_clouds(batch_src: torch.Tensor, z: torch.Tensor, bundle: ModelBundle,
                    codes: Optional[torch.Tensor] = None):
    """Return ``(fake_codes, fake_clouds)`` = ``G(E(X), z)`` and its decoding."""
    if codes is None:
        codes = bundle["encoder"](batch_src)
    fake = bundle["generator"](codes, z)
    return fake, bundle["decoder"](fake)


# --------------------------------------------------------------------------
# public losses
# --------------------------------------------------------------------------

def loss_recon_ae(batch_src: torch.Tensor, bundle: ModelBundle, emd_method: str = "approx",
                  epsilon: float = DEFAULT_EPSILON) -> torch.Tensor:
    _check_batch(batch_src)
    recon = bundle["decoder"](bundle["encoder"](batch_src))
    return emd(recon, batch_src, emd_method, epsilon).mean()


def loss_adv_discriminator(batch_src: torch.Tensor, batch_tgt: torch.Tensor, z_batch: torch.Tensor,
                           bundle: ModelBundle, fake_term: str = "generated") -> torch.Tensor:
    _check_batch(batch_src)
    _check_batch(batch_tgt, "target batch")
    _check_z(batch_src, z_batch, bundle)
    real = bundle["discriminator"](bundle["encoder"](batch_tgt))
    src_codes = bundle["encoder"](batch_src)
    if fake_term == "generated":
        fake_codes = bundle["generator"](src_codes, z_batch)
    elif fake_term == "raw_source":
        fake_codes = src_codes
    else:
        raise ValueError(f"fake_term must be one of {FAKE_TERMS}, got {fake_term!r}")
    return lsgan_discriminator(real, bundle["discriminator"](fake_codes))


def loss_adv_generator(batch_src: torch.Tensor, z_batch: torch.Tensor, bundle: ModelBundle) -> torch.Tensor:
    _check_batch(batch_src)
    _check_z(batch_src, z_batch, bundle)
    fake = bundle["generator"](bundle["encoder"](batch_src), z_batch)
    return lsgan_generator(bundle["discriminator"](fake))


def loss_recon_generator(batch_src: torch.Tensor, z_batch: torch.Tensor, bundle: ModelBundle,
                         emd_method: str = "approx", epsilon: float = DEFAULT_EPSILON) -> torch.Tensor:
    _check_batch(batch_src)
    _check_z(batch_src, z_batch, bundle)
    _, clouds = generate_clouds(batch_src, z_batch, bundle)
    return emd(clouds, batch_src, emd_method, epsilon).mean()


def loss_latent(batch_src: torch.Tensor, z_batch: torch.Tensor, bundle: ModelBundle) -> torch.Tensor:
    """Sum-of-absolute recovery error of ``z`` through the mode encoder's posterior mean."""
    _check_batch(batch_src)
    _check_z(batch_src, z_batch, bundle)
    _, clouds = generate_clouds(batch_src, z_batch, bundle)
    mu, _ = bundle["mode_encoder"](clouds)
    return latent_l1(z_batch, mu)


def _labels_tensor(labels) -> torch.Tensor:
    if labels is None:
        raise ValueError("classification loss needs source labels")
    if isinstance(labels, torch.Tensor):
        out = labels.long()
    else:
        if any(lab is None for lab in labels):
            raise ValueError("every source cloud must be labeled")
        out = torch.as_tensor(list(labels), dtype=torch.long)
    if (out < 0).any():
        raise ValueError("every source cloud must be labeled (negative label found)")
    return out


def loss_classification(batch_src: torch.Tensor, labels, z_batch: torch.Tensor,
                        bundle: ModelBundle) -> torch.Tensor:
    """Cross-entropy of the classifier on generated objects against the source labels."""
    _check_batch(batch_src)
    _check_z(batch_src, z_batch, bundle)
    labels = _labels_tensor(labels)
    _, clouds = generate_clouds(batch_src, z_batch, bundle)
    return F.cross_entropy(bundle["classifier"](clouds), labels)


def total_generator_objective(batch_src: torch.Tensor, labels, z_batch: torch.Tensor,
                              weights: LossWeights, bundle: ModelBundle, *,
                              codes: Optional[torch.Tensor] = None, emd_method: str = "approx",
                              epsilon: float = DEFAULT_EPSILON):
    """Generator-side objective ``L_G + a*L_recon + b*L_latent + c*L_cls``.

    Returns ``(total_tensor, report)``. Components with a zero weight are
    still evaluated for the report but carry no gradient. ``codes`` lets the
    caller pass precomputed encoder outputs for ``batch_src``.
    """
    _check_batch(batch_src)
    _check_z(batch_src, z_batch, bundle)
    labels = _labels_tensor(labels)
    fake_codes, clouds = generate_clouds(batch_src, z_batch, bundle, codes)

    l_gan = lsgan_generator(bundle["discriminator"](fake_codes))
    l_recon = emd(clouds, batch_src, emd_method, epsilon).mean()
    with torch.set_grad_enabled(torch.is_grad_enabled() and weights.beta > 0):
        l_latent = latent_l1(z_batch, bundle["mode_encoder"](clouds)[0])
    with torch.set_grad_enabled(torch.is_grad_enabled() and weights.gamma > 0):
        l_cls = F.cross_entropy(bundle["classifier"](clouds), labels)

    total = l_gan + weights.alpha * l_recon
    if weights.beta > 0:
        total = total + weights.beta * l_latent
    if weights.gamma > 0:
        total = total + weights.gamma * l_cls
    report = compose_report(l_gan.item(), l_recon.item(), l_latent.item(), l_cls.item(), weights)
    return total, report


def compose_report(l_gan_g: float, l_recon_g: float, l_latent: float, l_cls: float,
                   weights: LossWeights, **extra) -> LossReport:
    total = l_gan_g + weights.alpha * l_recon_g + weights.beta * l_latent + weights.gamma * l_cls
    return LossReport(l_gan_g=l_gan_g, l_recon_g=l_recon_g, l_latent=l_latent, l_cls=l_cls,
                      total=total, **extra)
