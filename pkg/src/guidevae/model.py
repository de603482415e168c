"""Conditional VAE with user-vector conditions and a pattern-dictionary
covariance likelihood."""
from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .dataset import MultiUserDataset
from .embedding import sample_user_vectors
from .preprocess import ZplnParams, zpln_apply, zpln_invert

log = logging.getLogger(__name__)

LOG_2PI = math.log(2 * math.pi)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class NetworkShape:
    hidden_layers: int = 3
    hidden_width: int = 1000


@dataclass
class OutputConstraints:
    mean_low: float = -3.0
    mean_high: float = 5.0
    posterior_std_min: float = 0.5
    xi: float = 1e-2
    aux_std_min: float = 1e-4

    def __post_init__(self):
        if not self.mean_low < self.mean_high:
            raise ValueError("mean clamp range is empty")
        if min(self.posterior_std_min, self.xi) <= 0 or self.aux_std_min < 0:
            raise ValueError("variance bounds must be positive")


@dataclass
class ModelSpec:
    T: int = 24
    K: int = 100  # user-vector size; 0 = unguided
    V: int = 100  # dictionary size; 0 = diagonal covariance
    shape: NetworkShape = field(default_factory=NetworkShape)
    constraints: OutputConstraints = field(default_factory=OutputConstraints)

    def __post_init__(self):
        if isinstance(self.shape, dict):
            self.shape = NetworkShape(**self.shape)
        if isinstance(self.constraints, dict):
            self.constraints = OutputConstraints(**self.constraints)
        if self.T < 1 or self.K < 0 or self.V < 0:
            raise ValueError("invalid model sizes")

    @property
    def condition_size(self) -> int:
        return self.K + 4


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 256
    n_mc: int = 16
    l2: float = 1e-5
    max_epochs: int = 500
    plateau_factor: float = 0.5
    plateau_patience: int = 5
    early_stop_patience: int = 15
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.n_mc < 1 or self.max_epochs < 1:
            raise ValueError("invalid training configuration")
        if self.plateau_patience < 0 or self.early_stop_patience < 1:
            raise ValueError("patience values must be positive")


class GaussianHeadMLP(nn.Module):
    """ReLU MLP with a squashed-mean head and a floored-std head."""

    def __init__(self, n_in: int, n_mean: int, n_std: int, shape: NetworkShape, mean_range, std_min: float):
        super().__init__()
        layers, width = [], n_in
        for _ in range(shape.hidden_layers):
            layers += [nn.Linear(width, shape.hidden_width), nn.ReLU()]
            width = shape.hidden_width
        self.body = nn.Sequential(*layers)
        self.mean = nn.Linear(width, n_mean)
        self.std = nn.Linear(width, n_std)
        self.low, self.high = mean_range
        self.std_min = std_min

    def forward(self, inputs):
        h = self.body(inputs)
        mu = self.low + (self.high - self.low) * torch.sigmoid(self.mean(h))
        return mu, self.std_min + F.softplus(self.std(h))


def kl_to_standard_normal(mu, sigma):
    """KL(N(mu, diag sigma^2) || N(0, I)) summed over the last axis."""
    if isinstance(mu, torch.Tensor):
        return 0.5 * (sigma**2 + mu**2 - 1 - 2 * torch.log(sigma)).sum(-1)
    mu, sigma = np.asarray(mu, float), np.asarray(sigma, float)
    return 0.5 * (sigma**2 + mu**2 - 1 - 2 * np.log(sigma)).sum(-1)


def diag_normal_logpdf(x, mu, sigma):
    return (-0.5 * (((x - mu) / sigma) ** 2 + LOG_2PI) - torch.log(sigma)).sum(-1)


def pdcc_logpdf_torch(x, mu, U, aux_std, xi: float):
    """Batched log N(x; mu, U diag(aux_std)^2 U^T + xi I) through a T x T Cholesky."""
    T = x.shape[-1]
    B = U * aux_std.unsqueeze(-2)
    eye = torch.eye(T, dtype=x.dtype, device=x.device)
    L = torch.linalg.cholesky(B @ B.transpose(-1, -2) + xi * eye)
    w = torch.linalg.solve_triangular(L, (x - mu).unsqueeze(-1), upper=False).squeeze(-1)
    logdet_half = torch.log(torch.diagonal(L, dim1=-2, dim2=-1)).sum(-1)
    return -0.5 * (T * LOG_2PI + (w**2).sum(-1)) - logdet_half


class GuideVae(nn.Module):
    """Encoder q(z | x, c), decoder p(x | z, c) and the global pattern dictionary.

    ``c = [theta, aux]`` with ``theta`` a user vector (absent when ``K == 0``)
    and ``aux`` the four cyclic calendar features. The prior is N(0, I).
    """

    def __init__(self, spec: ModelSpec, gamma: np.ndarray | None = None, zpln: ZplnParams | None = None):
        super().__init__()
        self.spec = spec
        c = spec.constraints
        n_in = spec.T + spec.condition_size
        mean_range = (c.mean_low, c.mean_high)
        self.encoder = GaussianHeadMLP(n_in, spec.T, spec.T, spec.shape, mean_range, c.posterior_std_min)
        if spec.V > 0:
            self.decoder = GaussianHeadMLP(n_in, spec.T, spec.V, spec.shape, mean_range, c.aux_std_min)
            self.dictionary_raw = nn.Parameter(torch.randn(spec.T, spec.V))
        else:
            self.decoder = GaussianHeadMLP(n_in, spec.T, spec.T, spec.shape, mean_range, 0.0)
            self.dictionary_raw = None
        if spec.K > 0 and gamma is not None and gamma.shape[1] != spec.K:
            raise ValueError(f"user dictionary has {gamma.shape[1]} topics, model expects K={spec.K}")
        self.gamma = None if gamma is None else np.asarray(gamma, dtype=float)
        self.zpln = zpln

    @property
    def num_topics(self) -> int:
        return self.spec.K

    @property
    def dtype(self) -> torch.dtype:
        return self.encoder.mean.weight.dtype

    def dictionary(self) -> torch.Tensor | None:
        """Unit-column dictionary; the stored matrix is renormalized on every use."""
        if self.dictionary_raw is None:
            return None
        return self.dictionary_raw / torch.linalg.vector_norm(self.dictionary_raw, dim=0, keepdim=True)

    def _check(self, a, name, width):
        if a.shape[-1] != width:
            raise ValueError(f"{name} has width {a.shape[-1]}, expected {width}")

    def encode(self, x, c):
        self._check(x, "x", self.spec.T)
        self._check(c, "condition", self.spec.condition_size)
        return self.encoder(torch.cat([x, c], -1))

    def decode(self, z, c):
        """Likelihood parameters: mean and auxiliary stds (or per-feature stds if V == 0)."""
        self._check(z, "z", self.spec.T)
        self._check(c, "condition", self.spec.condition_size)
        return self.decoder(torch.cat([z, c], -1))

    def log_likelihood(self, x, z, c):
        mu, scale = self.decode(z, c)
        xi = self.spec.constraints.xi
        if self.spec.V == 0:
            return diag_normal_logpdf(x, mu, torch.sqrt(scale**2 + xi))
        return pdcc_logpdf_torch(x, mu, self.dictionary(), scale, xi)

    def elbo_terms(self, x, c, eps):
        """Per-point reconstruction term and KL for frozen noise ``eps`` (n_mc, B, T)."""
        mu, sigma = self.encode(x, c)
        z = mu + sigma * eps
        n_mc = eps.shape[0]
        rec = self.log_likelihood(
            x.expand(n_mc, *x.shape).reshape(-1, x.shape[-1]),
            z.reshape(-1, z.shape[-1]),
            c.expand(n_mc, *c.shape).reshape(-1, c.shape[-1]),
        )
        return rec.reshape(n_mc, -1).mean(0), kl_to_standard_normal(mu, sigma)

    # -- conditions -----------------------------------------------------------

    def user_vectors(self, users: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        if self.spec.K == 0:
            return np.zeros((len(users), 0))
        if self.gamma is None:
            raise ValueError("guided model has no user dictionary")
        users = np.asarray(users)
        if users.size and (users.min() < 0 or users.max() >= len(self.gamma)):
            raise KeyError("unknown user index")
        return sample_user_vectors(self.gamma[users], rng)

    def condition(self, theta: np.ndarray, aux: np.ndarray) -> torch.Tensor:
        aux = np.asarray(aux, float)
        c = np.concatenate([np.asarray(theta, float).reshape(len(aux), self.spec.K), aux], -1)
        return torch.as_tensor(c, dtype=self.dtype)

    def tensor(self, a) -> torch.Tensor:
        return torch.as_tensor(np.asarray(a, float), dtype=self.dtype)


def build_model(spec: ModelSpec, gamma=None, zpln=None, seed: int = 0, dtype=torch.float32) -> GuideVae:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = GuideVae(spec, gamma, zpln)
    return model.to(dtype)


# -- ELBO ---------------------------------------------------------------------


def elbo_batch(model: GuideVae, x, users, aux, n_mc: int, rng: np.random.Generator):
    """Batch means of (elbo, reconstruction, KL) with fresh user vectors.

    Noise for the reparameterization and user vectors comes from ``rng``.
    """
    x = np.asarray(x, float)
    if len(x) == 0:
        raise ValueError("empty batch")
    theta = model.user_vectors(users, rng)
    eps = rng.standard_normal((n_mc, len(x), model.spec.T))
    rec, kl = model.elbo_terms(model.tensor(x), model.condition(theta, aux), model.tensor(eps))
    rec, kl = rec.mean(), kl.mean()
    return rec - kl, rec, kl


@torch.no_grad()
def dataset_elbo(model: GuideVae, data: MultiUserDataset, n_mc: int, seed: int, chunk: int = 512):
    """Mean (elbo, reconstruction, KL) over a normalized data set."""
    rng = np.random.default_rng(seed)
    rec_sum = kl_sum = 0.0
    for lo in range(0, len(data), chunk):
        sl = slice(lo, lo + chunk)
        theta = model.user_vectors(data.user[sl], rng)
        eps = rng.standard_normal((n_mc, len(data.values[sl]), model.spec.T))
        rec, kl = model.elbo_terms(model.tensor(data.values[sl]), model.condition(theta, data.conditions[sl]), model.tensor(eps))
        rec_sum += float(rec.sum())
        kl_sum += float(kl.sum())
    n = len(data)
    return (rec_sum - kl_sum) / n, rec_sum / n, kl_sum / n


# -- training -----------------------------------------------------------------


@dataclass
class TrainResult:
    model: GuideVae
    history: list[dict]
    best_epoch: int


def train(model: GuideVae, train_set: MultiUserDataset, val_set: MultiUserDataset, config: TrainConfig) -> TrainResult:
    """Minibatch ELBO ascent with Adam, plateau LR decay and early stopping.

    Inputs must be normalized and carry calendar conditions. Validation uses
    the same fixed noise and user-vector draws on every pass. Returns the
    best-validation parameters.
    """
    if train_set.conditions is None or val_set.conditions is None:
        raise ValueError("attach calendar conditions first")
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("empty training or validation set")
    rng = np.random.default_rng(config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr, betas=(0.9, 0.999), weight_decay=config.l2)
    sched = torch.optim.lr_scheduler.ReduceLROnPlateau(
        opt, mode="max", factor=config.plateau_factor, patience=config.plateau_patience
    )
    val_seed = int(np.random.SeedSequence([config.seed, 1]).generate_state(1)[0])
    best, best_state, best_epoch, stale = -math.inf, None, -1, 0
    history = []
    x_all = model.tensor(train_set.values)
    for epoch in range(config.max_epochs):
        model.train()
        order = rng.permutation(len(train_set))
        total, steps = 0.0, 0
        for lo in range(0, len(order), config.batch_size):
            idx = order[lo : lo + config.batch_size]
            theta = model.user_vectors(train_set.user[idx], rng)
            eps = model.tensor(rng.standard_normal((config.n_mc, len(idx), model.spec.T)))
            rec, kl = model.elbo_terms(x_all[idx], model.condition(theta, train_set.conditions[idx]), eps)
            loss = -(rec - kl).mean()
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {steps}, lr {opt.param_groups[0]['lr']:.3g}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            steps += 1
        model.eval()
        val_elbo, val_rec, val_kl = dataset_elbo(model, val_set, config.n_mc, val_seed)
        if not math.isfinite(val_elbo):
            raise TrainingDiverged(f"non-finite validation ELBO at epoch {epoch}")
        sched.step(val_elbo)
        history.append(
            {
                "epoch": epoch,
                "train_elbo": -total / len(order),
                "val_elbo": val_elbo,
                "val_rec": val_rec,
                "val_kl": val_kl,
                "lr": opt.param_groups[0]["lr"],
            }
        )
        log.debug("epoch %d train %.4f val %.4f", epoch, -total / len(order), val_elbo)
        if val_elbo > best:
            best, best_state, best_epoch, stale = val_elbo, copy.deepcopy(model.state_dict()), epoch, 0
        else:
            stale += 1
            if stale >= config.early_stop_patience:
                break
    model.load_state_dict(best_state)
    model.eval()
    return TrainResult(model, history, best_epoch)


# -- generation and imputation -----------------------------------------------


@torch.no_grad()
def _sample_likelihood(model: GuideVae, z, c, rng: np.random.Generator) -> np.ndarray:
    mu, scale = model.decode(model.tensor(z), c)
    mu, scale = mu.double().numpy(), scale.double().numpy()
    xi = model.spec.constraints.xi
    n, T = mu.shape
    if model.spec.V == 0:
        return mu + np.sqrt(scale**2 + xi) * rng.standard_normal((n, T))
    U = model.dictionary().double().numpy()
    e_v = rng.standard_normal((n, model.spec.V))
    return mu + (e_v * scale) @ U.T + np.sqrt(xi) * rng.standard_normal((n, T))


def _resolve_gamma(model: GuideVae, user, gamma):
    if model.spec.K == 0:
        return None
    if gamma is not None:
        return np.asarray(gamma, float)
    if user is None or model.gamma is None or not 0 <= user < len(model.gamma):
        raise KeyError(f"unknown user {user!r} and no explicit concentration vector")
    return model.gamma[user]


def generate(model: GuideVae, aux, count: int, rng: np.random.Generator, user: int | None = None, gamma=None) -> np.ndarray:
    """Ancestral samples in raw units: theta ~ Dir, z ~ N(0, I), x ~ likelihood.

    ``aux`` is one calendar vector (4,) shared by all samples or one per sample.
    """
    g = _resolve_gamma(model, user, gamma)
    if count == 0:
        return np.zeros((0, model.spec.T))
    aux = np.broadcast_to(np.asarray(aux, float), (count, 4))
    theta = np.zeros((count, 0)) if g is None else sample_user_vectors(np.tile(g, (count, 1)), rng)
    z = rng.standard_normal((count, model.spec.T))
    xbar = _sample_likelihood(model, z, model.condition(theta, aux), rng)
    return zpln_invert(xbar, model.zpln) if model.zpln is not None else xbar


@dataclass
class Imputation:
    samples: np.ndarray  # (S, M * T) raw units
    median_best: int | None
    scores: np.ndarray | None


@torch.no_grad()
def impute(model: GuideVae, user: int, aux_days, count: int, rng: np.random.Generator, truth=None, gamma=None) -> Imputation:
    """``count`` imputations of a user's missing days.

    Each sample shares one user vector across the days and draws a fresh
    latent per day. With ``truth`` (M, T) in raw units, samples are scored by
    the ground-truth log-likelihood under their per-day likelihoods and the
    sample at the median rank is reported.
    """
    aux_days = np.asarray(aux_days, float).reshape(-1, 4)
    M = len(aux_days)
    if M == 0:
        raise ValueError("no missing days to impute")
    g = _resolve_gamma(model, user, gamma)
    T = model.spec.T
    theta = np.zeros((count, 0)) if g is None else sample_user_vectors(np.tile(g, (count, 1)), rng)
    theta_days = np.repeat(theta, M, axis=0)
    aux_rep = np.tile(aux_days, (count, 1))
    z = rng.standard_normal((count * M, T))
    c = model.condition(theta_days, aux_rep)
    xbar = _sample_likelihood(model, z, c, rng)
    raw = zpln_invert(xbar, model.zpln) if model.zpln is not None else xbar
    samples = raw.reshape(count, M * T)
    if truth is None:
        return Imputation(samples, None, None)
    truth = np.asarray(truth, float).reshape(M, T)
    tbar = zpln_apply(truth, model.zpln) if model.zpln is not None else truth
    ll = model.log_likelihood(model.tensor(np.tile(tbar, (count, 1))), model.tensor(z), c)
    scores = ll.double().numpy().reshape(count, M).sum(1)
    order = np.argsort(-scores, kind="stable")
    return Imputation(samples, int(order[(count + 1) // 2 - 1]), scores)


# -- checkpoints --------------------------------------------------------------


def save_checkpoint(model: GuideVae, directory: str | Path, extra: dict | None = None) -> None:
    """Directory of ``.npy`` arrays plus a JSON manifest (byte-reproducible)."""
    directory = Path(directory)
    (directory / "params").mkdir(parents=True, exist_ok=True)
    names = []
    for name, tensor in model.state_dict().items():
        np.save(directory / "params" / f"{name}.npy", tensor.detach().cpu().numpy())
        names.append(name)
    if model.gamma is not None:
        np.save(directory / "gamma.npy", model.gamma)
    if model.zpln is not None:
        (directory / "zpln.json").write_text(model.zpln.to_json())
    manifest = {
        "spec": asdict(model.spec),
        "dtype": str(model.dtype).removeprefix("torch."),
        "params": names,
        "prior": "standard normal",
        **(extra or {}),
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_checkpoint(directory: str | Path) -> tuple[GuideVae, dict]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    spec = ModelSpec(**manifest["spec"])
    gamma = np.load(directory / "gamma.npy") if (directory / "gamma.npy").exists() else None
    zpln = ZplnParams.from_json((directory / "zpln.json").read_text()) if (directory / "zpln.json").exists() else None
    model = build_model(spec, gamma, zpln, dtype=getattr(torch, manifest["dtype"]))
    state = {name: torch.from_numpy(np.load(directory / "params" / f"{name}.npy")) for name in manifest["params"]}
    model.load_state_dict(state)
    model.eval()
    return model, manifest
