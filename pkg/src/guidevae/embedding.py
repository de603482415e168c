"""User embeddings: k-means wording of profiles, two-level LDA fitted by
variational EM, and Dirichlet user-vector sampling."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import digamma, gammaln

log = logging.getLogger(__name__)


# -- wording ------------------------------------------------------------------


@dataclass(frozen=True)
class WordCodebook:
    centers: np.ndarray  # (W, T)
    objective_history: tuple[float, ...] = ()

    @property
    def W(self) -> int:
        return len(self.centers)


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    d = (X**2).sum(1)[:, None] - 2 * X @ C.T + (C**2).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeans_fit(X: np.ndarray, W: int, seed: int = 0, max_iter: int = 300, tol: float = 1e-6) -> WordCodebook:
    """Lloyd's algorithm with k-means++ seeding on the distinct rows of ``X``.

    Duplicate rows are folded into weights, so repeating the data set leaves
    the codebook unchanged. An empty cluster is reseeded at the point farthest
    from its current center.
    """
    X = np.asarray(X, dtype=float)
    pts, weights = np.unique(X, axis=0, return_counts=True)
    weights = weights.astype(float)
    if W < 1:
        raise ValueError("W must be >= 1")
    if len(pts) < W:
        raise ValueError(f"{len(pts)} distinct profiles < W={W}")
    rng = np.random.default_rng(seed)

    centers = np.empty((W, X.shape[1]))
    centers[0] = pts[rng.choice(len(pts), p=weights / weights.sum())]
    closest = _sq_dists(pts, centers[:1])[:, 0]
    for k in range(1, W):
        p = weights * closest
        idx = rng.choice(len(pts), p=p / p.sum()) if p.sum() > 0 else rng.choice(len(pts))
        centers[k] = pts[idx]
        closest = np.minimum(closest, _sq_dists(pts, centers[k : k + 1])[:, 0])

    history = []
    for _ in range(max_iter):
        d = _sq_dists(pts, centers)
        labels = d.argmin(1)
        history.append(float((weights * d[np.arange(len(pts)), labels]).sum()))
        mass = np.bincount(labels, weights=weights, minlength=W)
        new = np.zeros_like(centers)
        np.add.at(new, labels, weights[:, None] * pts)
        for k in np.flatnonzero(mass == 0):
            far = int(np.argmax(d[np.arange(len(pts)), labels]))
            old = labels[far]
            new[old] -= weights[far] * pts[far]
            mass[old] -= weights[far]
            new[k] = weights[far] * pts[far]
            mass[k] = weights[far]
            labels[far] = k
            d[far, k] = 0.0
        new /= mass[:, None]
        shift = np.abs(new - centers).max()
        centers = new
        if shift < tol:
            break
    d = _sq_dists(pts, centers)
    history.append(float((weights * d.min(1)).sum()))
    return WordCodebook(centers, tuple(history))


def assign_words(X: np.ndarray, codebook: WordCodebook) -> np.ndarray:
    """Nearest center per row (zero-based ids); ties go to the lowest index."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    diff = X[:, None, :] - codebook.centers[None, :, :]
    return np.einsum("nwt,nwt->nw", diff, diff).argmin(1)


def assign_word(profile: np.ndarray, codebook: WordCodebook) -> int:
    return int(assign_words(profile, codebook)[0])


def word_counts(word_ids: np.ndarray, users: np.ndarray, U: int, W: int) -> np.ndarray:
    """Bag-of-words matrix (U, W) from per-profile word ids and user indices."""
    counts = np.zeros((U, W))
    np.add.at(counts, (users, word_ids), 1.0)
    return counts


def documents_from_counts(counts: np.ndarray) -> list[np.ndarray]:
    return [np.repeat(np.arange(counts.shape[1]), row.astype(np.int64)) for row in counts]


# -- LDA ----------------------------------------------------------------------


@dataclass
class LdaConfig:
    max_em_iter: int = 100
    em_tol: float = 1e-5  # relative corpus-ELBO change
    max_doc_iter: int = 1000
    doc_tol: float = 1e-10  # max |delta gamma| per document
    seed: int = 0


@dataclass(frozen=True)
class LdaModel:
    lam: np.ndarray  # (K, W) variational Dirichlet parameters of the topics
    alpha: float
    eta: float

    @property
    def K(self) -> int:
        return self.lam.shape[0]

    @property
    def W(self) -> int:
        return self.lam.shape[1]

    @property
    def beta(self) -> np.ndarray:
        return self.lam / self.lam.sum(1, keepdims=True)


@dataclass(frozen=True)
class UserDictionary:
    gamma: np.ndarray  # (U, K)

    def __post_init__(self):
        if np.any(self.gamma <= 0):
            raise ValueError("concentration parameters must be strictly positive")

    @property
    def U(self) -> int:
        return self.gamma.shape[0]

    @property
    def K(self) -> int:
        return self.gamma.shape[1]

    def mean(self) -> np.ndarray:
        return self.gamma / self.gamma.sum(1, keepdims=True)


@dataclass
class LdaFit:
    model: LdaModel
    dictionary: UserDictionary
    elbo_history: list[float] = field(default_factory=list)


def _dirichlet_expectation(p: np.ndarray) -> np.ndarray:
    return digamma(p) - digamma(p.sum(-1, keepdims=True))


def _e_step(counts, gamma, exp_elog_beta, alpha, cfg: LdaConfig):
    """Fixed-point updates of all documents' gamma with phi eliminated."""
    gamma = gamma.copy()
    active = np.ones(len(counts), dtype=bool)
    for _ in range(cfg.max_doc_iter):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        g = gamma[idx]
        exp_elog_theta = np.exp(_dirichlet_expectation(g))
        phinorm = exp_elog_theta @ exp_elog_beta + 1e-300
        new = alpha + exp_elog_theta * ((counts[idx] / phinorm) @ exp_elog_beta.T)
        change = np.abs(new - g).max(1)
        gamma[idx] = new
        active[idx[change < cfg.doc_tol]] = False
    return gamma


def _suff_stats(counts, gamma, exp_elog_beta):
    exp_elog_theta = np.exp(_dirichlet_expectation(gamma))
    phinorm = exp_elog_theta @ exp_elog_beta + 1e-300
    return exp_elog_beta * (exp_elog_theta.T @ (counts / phinorm))


def corpus_elbo(counts: np.ndarray, gamma: np.ndarray, lam: np.ndarray, alpha: float, eta: float) -> float:
    """Variational bound with the word-topic responsibilities at their optimum."""
    K, W = lam.shape
    elog_theta = _dirichlet_expectation(gamma)
    elog_beta = _dirichlet_expectation(lam)
    score = 0.0
    for lo in range(0, len(counts), 64):
        # log sum_k exp(Elog theta_dk + Elog beta_kw), stabilised
        a = elog_theta[lo : lo + 64, :, None] + elog_beta[None, :, :]
        amax = a.max(1)
        log_phinorm = amax + np.log(np.exp(a - amax[:, None, :]).sum(1))
        score += float((counts[lo : lo + 64] * log_phinorm).sum())
    score += float(((alpha - gamma) * elog_theta).sum())
    score += float((gammaln(gamma) - gammaln(alpha)).sum() + (gammaln(K * alpha) - gammaln(gamma.sum(1))).sum())
    score += float(((eta - lam) * elog_beta).sum())
    score += float((gammaln(lam) - gammaln(eta)).sum() + (gammaln(W * eta) - gammaln(lam.sum(1))).sum())
    return score


def lda_fit(
    documents,
    K: int,
    num_words: int,
    alpha: float | None = None,
    eta: float | None = None,
    config: LdaConfig | None = None,
) -> LdaFit:
    """Variational EM for the two-level LDA.

    ``documents`` is either a list of word-id arrays (one per user, possibly
    empty) or a (U, W) count matrix. Priors default to 1/K and 1/W. Document
    gammas are warm-started between EM iterations, so every update is a
    coordinate ascent step and the corpus bound never decreases.
    """
    cfg = config or LdaConfig()
    if K < 1:
        raise ValueError("K must be >= 1")
    if num_words < 1:
        raise ValueError("empty vocabulary")
    counts = _as_counts(documents, num_words)
    if counts.shape[0] == 0:
        raise ValueError("empty corpus")
    alpha = 1.0 / K if alpha is None else alpha
    eta = 1.0 / num_words if eta is None else eta
    rng = np.random.default_rng(cfg.seed)

    lam = rng.gamma(100.0, 1.0 / 100.0, size=(K, num_words))
    gamma = np.full((counts.shape[0], K), alpha) + counts.sum(1, keepdims=True) / K
    history: list[float] = []
    for it in range(cfg.max_em_iter):
        exp_elog_beta = np.exp(_dirichlet_expectation(lam))
        gamma = _e_step(counts, gamma, exp_elog_beta, alpha, cfg)
        lam = eta + _suff_stats(counts, gamma, exp_elog_beta)
        history.append(corpus_elbo(counts, gamma, lam, alpha, eta))
        if it > 0 and abs(history[-1] - history[-2]) < cfg.em_tol * abs(history[-2]):
            break
    # final E-step so gamma is the posterior under the returned topics
    gamma = _e_step(counts, gamma, np.exp(_dirichlet_expectation(lam)), alpha, cfg)
    history.append(corpus_elbo(counts, gamma, lam, alpha, eta))
    log.debug("LDA finished after %d EM iterations, bound %.6g", len(history) - 1, history[-1])
    return LdaFit(LdaModel(lam, alpha, eta), UserDictionary(gamma), history)


def _as_counts(documents, num_words: int) -> np.ndarray:
    if isinstance(documents, np.ndarray) and documents.ndim == 2:
        if documents.shape[1] != num_words:
            raise ValueError("count matrix width must equal the vocabulary size")
        return documents.astype(float)
    rows = []
    for doc in documents:
        doc = np.asarray(doc, dtype=np.int64)
        if doc.size and (doc.min() < 0 or doc.max() >= num_words):
            raise ValueError("word id outside vocabulary")
        rows.append(np.bincount(doc, minlength=num_words).astype(float))
    return np.array(rows).reshape(len(rows), num_words)


def lda_posterior(document, model: LdaModel, config: LdaConfig | None = None) -> np.ndarray:
    """Posterior Dirichlet parameters for one document under a fitted model."""
    cfg = config or LdaConfig()
    doc = np.asarray(document, dtype=np.int64)
    if doc.size and (doc.min() < 0 or doc.max() >= model.W):
        raise ValueError("unseen word id")
    counts = np.bincount(doc, minlength=model.W).astype(float)[None, :]
    gamma0 = np.full((1, model.K), model.alpha) + counts.sum() / model.K
    exp_elog_beta = np.exp(_dirichlet_expectation(model.lam))
    return _e_step(counts, gamma0, exp_elog_beta, model.alpha, cfg)[0]


# -- user vectors -------------------------------------------------------------


def sample_user_vector(gamma: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    gamma = np.asarray(gamma, dtype=float)
    if np.any(gamma <= 0):
        raise ValueError("concentration parameters must be positive")
    return rng.dirichlet(gamma)


def sample_user_vectors(gammas: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One Dirichlet draw per row of ``gammas``.

    Gamma variates with tiny shapes can all underflow to zero; such rows are
    redrawn with ``Generator.dirichlet``, which handles small concentrations.
    """
    gammas = np.asarray(gammas, dtype=float)
    if np.any(gammas <= 0):
        raise ValueError("concentration parameters must be positive")
    g = rng.standard_gamma(gammas)
    total = g.sum(-1, keepdims=True)
    out = np.divide(g, total, out=np.zeros_like(g), where=total > 0)
    for i in np.flatnonzero(total[..., 0] <= 0):
        out[i] = rng.dirichlet(gammas[i])
    return out
