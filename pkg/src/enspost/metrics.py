"""Latitude-weighted Gaussian CRPS, ensemble-mean RMSE, spread and calibration diagnostics.

Sample-level scores are latitude-weighted means over the grid; scores over a
set of samples average those per-sample values (for RMSE and spread the
squared quantities are averaged before taking the root).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.special import erf

from . import autodiff as ad
from .errors import EnsembleSizeError

CRPS_AT_ZERO = 2 / np.sqrt(2 * np.pi) - 1 / np.sqrt(np.pi)


def normal_cdf(z):
    return 0.5 * (1 + erf(np.asarray(z) / np.sqrt(2)))


def _is_tensor(*xs):
    return any(isinstance(x, ad.Tensor) for x in xs)


def gaussian_crps(mu, sigma, y):
    """Elementwise CRPS of N(mu, sigma^2) at y; a Tensor if any input is one."""
    out = ad.gaussian_crps(mu, sigma, y) if _is_tensor(mu, sigma, y) else \
        ad.gaussian_crps(np.asarray(mu, float), np.asarray(sigma, float), np.asarray(y, float))
    return out if _is_tensor(mu, sigma, y) else out.data


def squeeze_members(members):
    """Accept ``(..., k, 1, h, w)`` or ``(..., k, h, w)``; return the latter."""
    members = np.asarray(members)
    if members.ndim >= 4 and members.shape[-3] == 1:
        members = members[..., 0, :, :]
    return members


def weighted_field_mean(field, grid):
    """Latitude-weighted mean over the last two axes (numpy)."""
    return (np.asarray(field) * grid.weights2d).mean(axis=(-2, -1))


def weighted_mean(field, grid):
    """Latitude-weighted mean over all cells (and any leading axes)."""
    if isinstance(field, ad.Tensor):
        return ad.mean(ad.mul(field, grid.weights2d.astype(field.dtype)))
    return float(np.mean(weighted_field_mean(field, grid)))


def crps_loss_members(members, y, grid, ddof=1, sigma_floor=1e-6):
    """Weighted Gaussian CRPS using the member mean and (floored) std.

    ``members`` is ``(..., k, 1, h, w)`` and ``y`` is ``(..., h, w)``.
    """
    members = ad.as_tensor(members)
    if members.shape[-4] < 2:
        raise EnsembleSizeError("CRPS from members needs at least two members")
    mu = ad.mean(members, axis=-4)
    sigma = ad.member_std(members, axis=-4, ddof=ddof, floor=sigma_floor, keepdims=False)
    mu = ad.take(mu, 0, axis=-3)
    sigma = ad.take(sigma, 0, axis=-3)
    y = ad.as_tensor(y, members.dtype)
    return weighted_mean(ad.gaussian_crps(mu, sigma, y), grid)


def crps_loss_parametric(mu, sigma, y, grid):
    mu = ad.as_tensor(mu)
    return weighted_mean(ad.gaussian_crps(mu, sigma, ad.as_tensor(y, mu.dtype)), grid)


def ensemble_moments(members, ddof=1, sigma_floor=0.0):
    """Member mean and std of ``(..., k, h, w)`` or ``(..., k, 1, h, w)`` arrays."""
    m = squeeze_members(members).astype(np.float64)
    if m.shape[-3] < 2:
        raise EnsembleSizeError("ensemble statistics need at least two members")
    mean = m.mean(axis=-3)
    var = m.var(axis=-3, ddof=ddof)
    return mean, np.sqrt(var + sigma_floor ** 2)


def rmse_of_mean(members, y, grid):
    mean, _ = ensemble_moments(members)
    return float(np.sqrt(np.mean(weighted_field_mean((mean - y) ** 2, grid))))


def spread(members, grid, ddof=1):
    m = squeeze_members(members).astype(np.float64)
    if m.shape[-3] < 2:
        raise EnsembleSizeError("spread needs at least two members")
    return float(np.sqrt(np.mean(weighted_field_mean(m.var(axis=-3, ddof=ddof), grid))))


@dataclass
class ScoreReport:
    crps: float
    rmse: float
    spread: float
    per_sample: list = field(default_factory=list)  # dicts: id, crps, mse, variance
    ddof: int = 1
    label: str = ""

    @property
    def spread_skill(self):
        return self.spread / self.rmse if self.rmse > 0 else float("nan")

    @classmethod
    def from_samples(cls, ids, crps, mse, variance, ddof=1, label=""):
        rows = [{"id": i, "crps": float(c), "mse": float(m), "variance": float(v)}
                for i, c, m, v in zip(ids, crps, mse, variance)]
        return cls(float(np.mean(crps)), float(np.sqrt(np.mean(mse))),
                   float(np.sqrt(np.mean(variance))), rows, ddof, label)

    def to_dict(self):
        return {"label": self.label, "ddof": self.ddof,
                "aggregate": {"CRPS": self.crps, "RMSE": self.rmse, "Spread": self.spread,
                              "spread_skill": self.spread_skill},
                "samples": self.per_sample}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1)

    def to_text(self):
        name = self.label or "model"
        width = max(len(name), 12)
        lines = [f"{'Name':<{width}} | {'CRPS':>8} {'RMSE':>8} {'Spread':>8}",
                 "-" * (width + 30),
                 f"{name:<{width}} | {self.crps:8.4f} {self.rmse:8.4f} {self.spread:8.4f}"]
        return "\n".join(lines) + "\n"

    def samples_table(self, sep="\t"):
        lines = [sep.join(["id", "crps", "mse", "variance"])]
        for r in self.per_sample:
            lines.append(sep.join([r["id"], repr(r["crps"]), repr(r["mse"]), repr(r["variance"])]))
        lines.append(sep.join(["aggregate", repr(self.crps), repr(self.rmse ** 2), repr(self.spread ** 2)]))
        return "\n".join(lines) + "\n"


def score_members(members, targets, grid, ids=None, ddof=1, sigma_floor=1e-6, label=""):
    """Score a stack of ensembles ``(n, k, [1,] h, w)`` against ``(n, h, w)`` targets."""
    m = squeeze_members(members).astype(np.float64)
    y = np.asarray(targets, np.float64)
    mean, std = ensemble_moments(m, ddof, sigma_floor)
    var = m.var(axis=-3, ddof=ddof)
    crps = weighted_field_mean(gaussian_crps(mean, std, y), grid)
    mse = weighted_field_mean((mean - y) ** 2, grid)
    variance = weighted_field_mean(var, grid)
    ids = ids if ids is not None else [str(i) for i in range(len(y))]
    return ScoreReport.from_samples(ids, crps, mse, variance, ddof, label)


def score_parametric(mu, sigma, targets, grid, ids=None, label=""):
    mu, sigma, y = (np.asarray(a, np.float64) for a in (mu, sigma, targets))
    crps = weighted_field_mean(gaussian_crps(mu, sigma, y), grid)
    mse = weighted_field_mean((mu - y) ** 2, grid)
    variance = weighted_field_mean(sigma ** 2, grid)
    ids = ids if ids is not None else [str(i) for i in range(len(y))]
    return ScoreReport.from_samples(ids, crps, mse, variance, 1, label)


# -- calibration diagnostics -------------------------------------------------

def ranks(members, y, rng=None):
    """Rank of ``y`` among the members (number of members below it).

    Ties with members are broken uniformly at random.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    m = squeeze_members(members)
    y = np.asarray(y)[..., None, :, :]
    below = (m < y).sum(axis=-3)
    equal = (m == y).sum(axis=-3)
    if np.any(equal):
        below = below + rng.integers(0, equal + 1)
    return below


def rank_histogram(members, y, rng=None):
    """Counts of ranks 0..k over all (sample, cell) pairs."""
    k = squeeze_members(members).shape[-3]
    return np.bincount(ranks(members, y, rng).ravel(), minlength=k + 1)


def pit_parametric(mu, sigma, y):
    return normal_cdf((np.asarray(y) - np.asarray(mu)) / np.asarray(sigma))


def pit_histogram(pit, bins):
    counts, _ = np.histogram(np.asarray(pit).ravel(), bins=bins, range=(0.0, 1.0))
    return counts


def chi2_uniformity(counts):
    """Pearson chi-square statistic and p-value against equal bin probabilities."""
    counts = np.asarray(counts, float)
    expected = counts.sum() / counts.size
    stat = float(((counts - expected) ** 2 / expected).sum())
    return stat, float(stats.chi2.sf(stat, counts.size - 1))


def spatial_correlation(members, point):
    """Pearson correlation across members between ``point`` and every cell.

    Returns ``(corr, degenerate)``: cells where either series has zero
    variance get correlation 0 and ``degenerate`` True.
    """
    m = squeeze_members(members).astype(np.float64)
    if m.ndim != 3:
        raise ValueError(f"expected one ensemble (k, h, w), got {m.shape}")
    iy, ix = point
    h, w = m.shape[1:]
    if not (0 <= iy < h and 0 <= ix < w):
        raise IndexError(f"point {point} outside grid {h}x{w}")
    dev = m - m.mean(axis=0)
    ref = dev[:, iy, ix]
    cov = np.einsum("k,kyx->yx", ref, dev)
    norm = np.sqrt((ref ** 2).sum() * (dev ** 2).sum(axis=0))
    degenerate = norm <= 1e-300
    corr = np.where(degenerate, 0.0, cov / np.where(degenerate, 1.0, norm))
    return np.clip(corr, -1.0, 1.0), degenerate
