"""Training objectives and their alpha-weighted combination."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import torch

logger = logging.getLogger(__name__)

DM_MODES = ("entropy", "min_prob")
PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.5
    lambda_bt: float = 5.1e-3
    dm_mode: str = "entropy"

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.lambda_bt <= 0:
            raise ValueError("lambda_bt must be positive")
        if self.dm_mode not in DM_MODES:
            raise ValueError(f"dm_mode must be one of {DM_MODES}, got {self.dm_mode!r}")


@dataclass
class LossReport:
    ce: float
    ssl: float
    recon: float
    dm: float
    total: float

    def as_dict(self):
        return asdict(self)

    def check_composition(self, alpha: float, tol: float = 1e-9) -> bool:
        expected = self.ce + alpha * (self.ssl + self.recon) + (1 - alpha) * self.dm
        return abs(self.total - expected) <= tol * max(1.0, abs(expected))


def cross_entropy(probs, labels):
    """Mean of ``-log p(true class)``; zero probabilities are clamped with a warning."""
    p_true = probs.gather(1, labels.reshape(-1, 1)).squeeze(1)
    if (p_true <= 0).any():
        logger.warning("zero probability on the true class; clamping at %g", PROB_FLOOR)
    return -torch.log(p_true.clamp_min(PROB_FLOOR)).mean()


def cross_correlation(z_a, z_b):
    """Cross-correlation of batch-standardized views (population std)."""
    if z_a.shape != z_b.shape or z_a.ndim != 2:
        raise ValueError("views must be equal-shape (B, D) arrays")
    if z_a.shape[0] < 2:
        raise ValueError("cross-correlation needs a batch of at least 2")
    out = []
    for name, z in (("jumbled", z_a), ("clean", z_b)):
        centred = z - z.mean(dim=0)
        std = centred.pow(2).mean(dim=0).sqrt()
        dead = (std <= 1e-12 * (1 + z.abs().amax(dim=0))).nonzero().flatten().tolist()
        if dead:
            raise ValueError(f"{name} view has zero variance in dimension(s) {dead}")
        out.append(centred / std)
    return out[0].T @ out[1] / z_a.shape[0]


def barlow_twins(z_jumbled, z_clean, lambda_bt: float = 5.1e-3):
    c = cross_correlation(z_jumbled, z_clean)
    on_diag = (1 - c.diagonal()).pow(2).sum()
    off_diag = c.pow(2).sum() - c.diagonal().pow(2).sum()
    return on_diag + lambda_bt * off_diag


def reconstruction_loss(x_hat, target):
    """Batch mean of the per-sample L2 norm of the residual."""
    if x_hat.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(x_hat.shape)} vs {tuple(target.shape)}")
    return (x_hat - target).flatten(1).norm(dim=1).mean()


def diversity_loss(probs, mode: str = "entropy"):
    if mode == "entropy":
        p = probs.clamp_min(PROB_FLOOR)
        return -(probs * torch.log(p)).sum(dim=1).mean()
    if mode == "min_prob":
        return probs.min(dim=1).values.mean()
    raise ValueError(f"unknown diversity mode {mode!r}; expected one of {DM_MODES}")


def combine(ce, ssl, recon, dm, alpha: float):
    return ce + alpha * (ssl + recon) + (1 - alpha) * dm


def total_loss(ce, ssl, recon, dm, weights: LossWeights) -> LossReport:
    parts = [float(v) for v in (ce, ssl, recon, dm)]
    return LossReport(*parts, total=combine(*parts, weights.alpha))
