"""Importance-sampled conditional log-likelihoods and derived metrics."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from scipy.special import logsumexp
from scipy.stats import multivariate_normal

from .dataset import MultiUserDataset
from .embedding import sample_user_vectors
from .model import dataset_elbo, diag_normal_logpdf

log = logging.getLogger(__name__)


@dataclass
class IsConfig:
    samples: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.samples < 1:
            raise ValueError("need at least one importance sample")


def log_mean_exp(log_w, axis=-1):
    log_w = np.asarray(log_w, dtype=float)
    return logsumexp(log_w, axis=axis) - math.log(log_w.shape[axis])


def point_seed(seed: int, user: int, date) -> np.random.SeedSequence:
    """Per-point stream keyed on (seed, user, day) so subsets stay comparable."""
    day = int(np.datetime64(date, "D").astype(np.int64))
    return np.random.SeedSequence([seed, int(user), day + 2**31])


@torch.no_grad()
def log_importance_weights(model, x, users, aux, rngs) -> np.ndarray:
    """(n, S) log weights log p(x|z,c) + log p(z) - log q(z|x,c).

    Each point draws its own user vectors (one per sample) and latent noise
    from its generator in ``rngs``; the number of samples is ``rngs[i]``'s
    second element.
    """
    thetas, epss, S = [], [], None
    for user, (rng, s) in zip(users, rngs):
        S = s
        if model.num_topics:
            if model.gamma is None or not 0 <= user < len(model.gamma):
                raise KeyError(f"unknown user {user}")
            thetas.append(sample_user_vectors(np.tile(model.gamma[user], (s, 1)), rng))
        else:
            thetas.append(np.zeros((s, 0)))
        epss.append(rng.standard_normal((s, x.shape[1])))
    n = len(x)
    xt = model.tensor(np.repeat(x, S, axis=0))
    c = model.condition(np.concatenate(thetas), np.repeat(aux, S, axis=0))
    mu, sigma = model.encode(xt, c)
    z = mu + sigma * model.tensor(np.concatenate(epss))
    log_prior = diag_normal_logpdf(z, torch.zeros_like(z), torch.ones_like(z))
    log_q = diag_normal_logpdf(z, mu, sigma)
    log_w = model.log_likelihood(xt, z, c) + log_prior - log_q
    return log_w.double().numpy().reshape(n, S)


def is_loglik(x, user: int, aux, model, config: IsConfig, date="1970-01-01") -> float:
    """Importance-sampling estimate of log p(x | c) for one profile."""
    x = np.asarray(x, float).reshape(1, -1)
    aux = np.asarray(aux, float).reshape(1, 4)
    rng = np.random.default_rng(point_seed(config.seed, user, date))
    log_w = log_importance_weights(model, x, [user], aux, [(rng, config.samples)])
    return float(log_mean_exp(log_w[0]))


def dataset_loglik(data: MultiUserDataset, model, config: IsConfig, chunk: int = 32) -> tuple[float, np.ndarray]:
    """Mean and per-profile importance-sampled log-likelihoods of a set."""
    if len(data) == 0:
        raise ValueError("empty set")
    if data.conditions is None:
        raise ValueError("attach calendar conditions first")
    values = np.empty(len(data))
    for lo in range(0, len(data), chunk):
        sl = slice(lo, lo + chunk)
        rngs = [
            (np.random.default_rng(point_seed(config.seed, u, d)), config.samples)
            for u, d in zip(data.user[sl], data.dates[sl])
        ]
        log_w = log_importance_weights(model, data.values[sl], data.user[sl], data.conditions[sl], rngs)
        values[sl] = log_mean_exp(log_w, axis=1)
    return float(values.mean()), values


def per_user_means(values: np.ndarray, users: np.ndarray, U: int) -> np.ndarray:
    """Mean per user; NaN for users without points."""
    sums = np.bincount(users, weights=values, minlength=U)
    counts = np.bincount(users, minlength=U)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)


@dataclass
class UserGain:
    delta: dict[str, np.ndarray]  # set name -> (U,) guided minus unguided, NaN if skipped
    skipped: dict[str, list[int]]


def per_user_gain(model_guided, model_unguided, sets: dict[str, MultiUserDataset], config: IsConfig) -> UserGain:
    """Per-user mean log-likelihood of the guided model minus the unguided one."""
    delta, skipped = {}, {}
    for name, data in sets.items():
        if len(data) == 0:
            delta[name] = np.full(data.U, np.nan)
            skipped[name] = list(range(data.U))
            continue
        _, guided = dataset_loglik(data, model_guided, config)
        _, unguided = dataset_loglik(data, model_unguided, config)
        delta[name] = per_user_means(guided - unguided, data.user, data.U)
        skipped[name] = np.flatnonzero(np.isnan(delta[name])).tolist()
        if skipped[name]:
            log.info("%s: %d users without points skipped", name, len(skipped[name]))
    return UserGain(delta, skipped)


def rll_kl_decompose(model, data: MultiUserDataset, n_mc: int = 16, seed: int = 0) -> tuple[float, float, float]:
    """Mean reconstruction log-likelihood, mean KL and mean ELBO of a set."""
    elbo, rec, kl = dataset_elbo(model, data, n_mc, seed)
    return rec, kl, elbo


def _finite_or_none(v: float):
    return float(v) if np.isfinite(v) else None


@dataclass
class EvaluationReport:
    sets: dict[str, dict] = field(default_factory=dict)
    fingerprints: dict[str, str] = field(default_factory=dict)

    def add(self, name: str, data: MultiUserDataset, values: np.ndarray, rll: float, kl: float):
        self.sets[name] = {
            "size": int(len(values)),
            "mean_loglik": float(values.mean()) if len(values) else None,
            "per_user_loglik": [None if np.isnan(v) else float(v) for v in per_user_means(values, data.user, data.U)]
            if len(values)
            else [],
            "per_point_loglik": [float(v) for v in values],
            "rll": _finite_or_none(rll),
            "kl": _finite_or_none(kl),
        }

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


# -- analytic sanity model -----------------------------------------------------


class LinearGaussianModel:
    """x = A z + b + noise with z ~ N(0, I) and isotropic noise; no conditions.

    Exposes the encode / log_likelihood interface of the VAE so the
    importance-sampling estimator can be checked against the exact marginal.
    The proposal is the exact posterior mean with standard deviations
    inflated by ``proposal_scale``.
    """

    num_topics = 0
    gamma = None

    def __init__(self, A: np.ndarray, b: np.ndarray, noise_var: float, proposal_scale: float = 1.3):
        self.A = np.asarray(A, float)
        self.b = np.asarray(b, float)
        self.noise_var = float(noise_var)
        d = self.A.shape[1]
        self.post_cov = np.linalg.inv(np.eye(d) + self.A.T @ self.A / self.noise_var)
        self.post_std = np.sqrt(np.diag(self.post_cov)) * proposal_scale

    @property
    def dtype(self):
        return torch.float64

    def tensor(self, a):
        return torch.as_tensor(np.asarray(a, float), dtype=torch.float64)

    def condition(self, theta, aux):
        return self.tensor(aux)

    def encode(self, x, c):
        mean = (x - self.tensor(self.b)) @ self.tensor(self.A) @ self.tensor(self.post_cov).T / self.noise_var
        return mean, self.tensor(self.post_std).expand_as(mean)

    def log_likelihood(self, x, z, c):
        mu = z @ self.tensor(self.A).T + self.tensor(self.b)
        return diag_normal_logpdf(x, mu, torch.full_like(mu, math.sqrt(self.noise_var)))

    def marginal_logpdf(self, x) -> np.ndarray:
        cov = self.A @ self.A.T + self.noise_var * np.eye(len(self.b))
        return multivariate_normal(self.b, cov).logpdf(x)
