"""Pattern-dictionary covariance composition ``Sigma = U diag(s)^2 U^T + xi I``.

Reference implementation in float64 NumPy. ``U`` is a (T, V) matrix of
unit-norm pattern columns, ``s`` the (V,) auxiliary standard deviations and
``xi`` the isotropic base variance. The training path in :mod:`guidevae.model`
mirrors :func:`pdcc_logpdf` in torch.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

LOG_2PI = np.log(2 * np.pi)


@dataclass(frozen=True)
class PatternDictionary:
    U: np.ndarray
    xi: float
    eps: float = 1e-4

    def __post_init__(self):
        if self.xi <= 0:
            raise ValueError("base variance must be positive")
        if self.U.ndim != 2:
            raise ValueError("dictionary must be a (T, V) matrix")
        if self.V and not np.allclose(np.linalg.norm(self.U, axis=0), 1.0, rtol=0, atol=1e-9):
            raise ValueError("dictionary columns must have unit norm")

    @property
    def T(self) -> int:
        return self.U.shape[0]

    @property
    def V(self) -> int:
        return self.U.shape[1]

    def sorted_by_l1(self) -> np.ndarray:
        """Columns ordered by ascending L1 norm, for inspection plots."""
        return self.U[:, np.argsort(np.abs(self.U).sum(0), kind="stable")]

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        np.save(directory / "dictionary.npy", self.U)
        manifest = {"T": self.T, "V": self.V, "xi": self.xi, "eps": self.eps}
        (directory / "dictionary.json").write_text(json.dumps(manifest, indent=2))

    @classmethod
    def load(cls, directory: str | Path) -> "PatternDictionary":
        directory = Path(directory)
        meta = json.loads((directory / "dictionary.json").read_text())
        return cls(np.load(directory / "dictionary.npy"), meta["xi"], meta["eps"])

    def to_csv(self, path: str | Path, sort_l1: bool = False) -> None:
        np.savetxt(path, self.sorted_by_l1() if sort_l1 else self.U, delimiter=",", fmt="%.17g")


def normalize_dictionary(raw: np.ndarray) -> np.ndarray:
    raw = np.asarray(raw, dtype=float)
    norms = np.linalg.norm(raw, axis=0)
    if np.any(norms == 0):
        raise ValueError(f"zero column(s) {np.flatnonzero(norms == 0).tolist()} cannot be normalized")
    return raw / norms


def overparameterized(T: int, V: int) -> bool:
    """Whether ``1 + VT + V`` exceeds the ``T(T+1)/2`` Cholesky degrees of freedom."""
    return 1 + V * T + V > T * (T + 1) // 2


def _check(U, aux_std):
    U = np.asarray(U, dtype=float)
    aux_std = np.asarray(aux_std, dtype=float)
    if U.ndim != 2 or aux_std.shape != (U.shape[1],):
        raise ValueError(f"aux_std of shape {aux_std.shape} does not match dictionary {U.shape}")
    if np.any(aux_std < 0):
        raise ValueError("auxiliary standard deviations must be non-negative")
    return U, aux_std


def compose_covariance(U: np.ndarray, aux_std: np.ndarray, xi: float) -> np.ndarray:
    U, aux_std = _check(U, aux_std)
    B = U * aux_std
    return B @ B.T + xi * np.eye(U.shape[0])


def pdcc_logpdf(x, mu, U, aux_std, xi) -> float:
    """log N(x; mu, Sigma) via the T x T Cholesky factor of the composed Sigma."""
    x, mu = np.asarray(x, float), np.asarray(mu, float)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(mu)) and np.all(np.isfinite(aux_std))):
        raise ValueError("non-finite input")
    L = np.linalg.cholesky(compose_covariance(U, aux_std, xi))
    w = solve_triangular(L, x - mu, lower=True)
    return float(-0.5 * (len(x) * LOG_2PI + w @ w) - np.log(np.diag(L)).sum())


def pdcc_logdet_woodbury(U, aux_std, xi) -> float:
    """``T log xi + log det(I_V + S U^T U S / xi)`` with ``S = diag(aux_std)``."""
    U, aux_std = _check(U, aux_std)
    B = U * aux_std
    cap = np.eye(B.shape[1]) + B.T @ B / xi
    return float(U.shape[0] * np.log(xi) + 2 * np.log(np.diag(np.linalg.cholesky(cap))).sum())


def pdcc_logpdf_woodbury(x, mu, U, aux_std, xi) -> float:
    """Same density through the V x V capacitance matrix; never forms Sigma."""
    U, aux_std = _check(U, aux_std)
    r = np.asarray(x, float) - np.asarray(mu, float)
    B = U * aux_std
    cap = np.eye(B.shape[1]) + B.T @ B / xi
    c = np.linalg.cholesky(cap)
    Btr = B.T @ r
    quad = (r @ r - Btr @ cho_solve((c, True), Btr) / xi) / xi
    logdet = U.shape[0] * np.log(xi) + 2 * np.log(np.diag(c)).sum()
    return float(-0.5 * (len(r) * LOG_2PI + logdet + quad))


def pdcc_sample(mu, U, aux_std, xi, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """``mu + U diag(aux_std) e_V + sqrt(xi) e_T`` with standard normal noise."""
    U, aux_std = _check(U, aux_std)
    T, V = U.shape
    shape = (V,) if size is None else (size, V)
    e_v = rng.standard_normal(shape)
    e_t = rng.standard_normal(shape[:-1] + (T,))
    return np.asarray(mu, float) + (e_v * aux_std) @ U.T + np.sqrt(xi) * e_t


def spectrum(sigma: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """Eigenvalues of a symmetric matrix in descending order."""
    sigma = np.asarray(sigma, dtype=float)
    if np.abs(sigma - sigma.T).max() > tol:
        raise ValueError("matrix is not symmetric")
    return np.linalg.eigvalsh(sigma)[::-1]


@dataclass(frozen=True)
class PdccGrad:
    mu: np.ndarray
    aux_std: np.ndarray
    U: np.ndarray


def pdcc_logpdf_grad(x, mu, U, aux_std, xi) -> PdccGrad:
    """Analytic gradients of :func:`pdcc_logpdf`.

    With ``a = Sigma^-1 (x - mu)`` and ``G = (a a^T - Sigma^-1) / 2`` (the
    gradient w.r.t. Sigma): d/dmu = a, d/ds_v = 2 s_v u_v^T G u_v and
    d/dU = 2 G U diag(s)^2. ``U`` is treated as a free matrix here.
    """
    U, aux_std = _check(U, aux_std)
    sigma = compose_covariance(U, aux_std, xi)
    L = np.linalg.cholesky(sigma)
    inv = cho_solve((L, True), np.eye(len(sigma)))
    a = inv @ (np.asarray(x, float) - np.asarray(mu, float))
    G = 0.5 * (np.outer(a, a) - inv)
    GU = G @ U
    return PdccGrad(
        mu=a,
        aux_std=2 * aux_std * np.einsum("tv,tv->v", U, GU),
        U=2 * GU * aux_std**2,
    )


def construct_from_spd(M: np.ndarray, xi: float, V: int, rotation: np.ndarray | None = None):
    """Express an SPD matrix as a pattern-dictionary composition.

    Uses ``M - xi I = L L^T`` and the canonical solution of the construction:
    dictionary ``[L Q, 0]`` with unit auxiliary scales on the first ``T``
    columns. ``rotation`` (orthogonal, T x T) picks ``Q``; identity by default.
    Columns are then normalized with the scales absorbing their norms. The
    ``V - T`` padding columns carry zero scale and an arbitrary unit direction.

    Returns ``(U, aux_std)``.
    """
    M = np.asarray(M, dtype=float)
    T = M.shape[0]
    if V < T:
        raise ValueError(f"V={V} must be at least T={T}")
    lam_min = np.linalg.eigvalsh(M)[0]
    if not xi < lam_min:
        raise ValueError(f"base variance {xi} must be below the smallest eigenvalue {lam_min}")
    L = np.linalg.cholesky(M - xi * np.eye(T))
    Q = np.eye(T) if rotation is None else np.asarray(rotation, dtype=float)
    if not np.allclose(Q @ Q.T, np.eye(T), atol=1e-10):
        raise ValueError("rotation must be orthogonal")
    B = L @ Q
    norms = np.linalg.norm(B, axis=0)
    U = np.zeros((T, V))
    U[:, :T] = B / norms
    U[np.arange(V - T) % T, T + np.arange(V - T)] = 1.0
    aux_std = np.concatenate([norms, np.zeros(V - T)])
    return U, aux_std
