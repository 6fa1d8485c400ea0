"""Exact Gaussian-process regression with a squared-exponential kernel.

Covers kernel evaluation, the exact posterior through a Cholesky
factorization, analytic gradients of the posterior mean, the negative
log marginal likelihood (value and gradient) and a deterministic
multi-start hyperparameter optimizer.

Mean/gradient callables used as priors operate on batches: they map an
(N, d) array to an (N,) array of values (respectively (N, d) gradients).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import scipy.linalg
import scipy.optimize

logger = logging.getLogger(__name__)

JITTER = 1e-8


class GpFactorizationError(RuntimeError):
    """Gram matrix could not be factorized."""


class ZeroMean:
    """Prior mean that is identically zero."""

    def __call__(self, x):
        return np.zeros(np.atleast_2d(x).shape[0])

    def gradient(self, x):
        return np.zeros_like(np.atleast_2d(np.asarray(x, dtype=float)))

    def hessian(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return np.zeros((x.shape[0], x.shape[1], x.shape[1]))


@dataclass(frozen=True)
class Hyperparams:
    """Signal scale, length scale and observation noise std."""

    sigma_f: float
    phi_l: float
    sigma_n: float = 0.0

    def __post_init__(self):
        if not self.sigma_f > 0:
            raise ValueError(f"sigma_f must be > 0, got {self.sigma_f}")
        if not self.phi_l > 0:
            raise ValueError(f"phi_l must be > 0, got {self.phi_l}")
        if self.sigma_n < 0:
            raise ValueError(f"sigma_n must be >= 0, got {self.sigma_n}")


def _as_2d(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        return x.reshape(1, 1)
    if x.ndim == 1:
        return x.reshape(1, -1)
    return x


def _sqdist(xa: np.ndarray, xb: np.ndarray) -> np.ndarray:
    d = xa[:, None, :] - xb[None, :, :]
    return np.einsum("ijk,ijk->ij", d, d)


def se_kernel(x, x2, h: Hyperparams) -> float:
    """k(x, x') = sigma_f^2 exp(-|x - x'|^2 / (2 phi_l^2))."""
    d = np.asarray(x, dtype=float).ravel() - np.asarray(x2, dtype=float).ravel()
    return float(h.sigma_f**2 * np.exp(-(d @ d) / (2.0 * h.phi_l**2)))


def se_gram(xa, xb, h: Hyperparams) -> np.ndarray:
    """Kernel matrix between two batches of inputs."""
    return h.sigma_f**2 * np.exp(-_sqdist(_as_2d(xa), _as_2d(xb)) / (2.0 * h.phi_l**2))


def _prior_gradient(prior_mean, x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Batch gradient of a prior mean; central differences if the callable
    does not expose an analytic ``gradient``."""
    grad = getattr(prior_mean, "gradient", None)
    if grad is not None:
        return np.asarray(grad(x), dtype=float)
    x = _as_2d(x)
    out = np.empty_like(x)
    for j in range(x.shape[1]):
        xp = x.copy()
        xm = x.copy()
        xp[:, j] += step
        xm[:, j] -= step
        out[:, j] = (np.asarray(prior_mean(xp)) - np.asarray(prior_mean(xm))) / (2 * step)
    return out


@dataclass(frozen=True)
class GpPosterior:
    """Trained exact GP with precomputed solve factors.

    ``chol_factor`` is the lower Cholesky factor of K(X,X) + (sigma_n^2
    + jitter) I and ``alpha`` solves that matrix against the centred
    targets Y - m(X).
    """

    train_inputs: np.ndarray
    train_targets: np.ndarray
    hyper: Hyperparams
    prior_mean: Callable
    chol_factor: np.ndarray
    alpha: np.ndarray

    @property
    def n_train(self) -> int:
        return self.train_inputs.shape[0]

    def predict_mean(self, x_star) -> np.ndarray:
        xs = _as_2d(x_star)
        k = se_gram(xs, self.train_inputs, self.hyper)
        return np.asarray(self.prior_mean(xs), dtype=float) + k @ self.alpha

    def predict_var(self, x_star) -> np.ndarray:
        xs = _as_2d(x_star)
        k = se_gram(xs, self.train_inputs, self.hyper)
        v = scipy.linalg.solve_triangular(self.chol_factor, k.T, lower=True)
        var = self.hyper.sigma_f**2 - np.einsum("ij,ij->j", v, v)
        neg = var < 0
        if neg.any():
            worst = var.min()
            if worst < -1e-10:
                logger.warning("clamping %d negative predictive variances (min %.3e)",
                               int(neg.sum()), worst)
            var = np.where(neg, 0.0, var)
        return var

    def mean_gradient(self, x_star) -> np.ndarray:
        """Gradient of the posterior mean, batched over rows of x_star."""
        xs = _as_2d(x_star)
        k = se_gram(xs, self.train_inputs, self.hyper)
        # grad_x k(x, xi) = -k(x, xi) (x - xi) / phi_l^2
        diff = xs[:, None, :] - self.train_inputs[None, :, :]
        gp_part = -np.einsum("ij,ijd,j->id", k, diff, self.alpha) / self.hyper.phi_l**2
        return _prior_gradient(self.prior_mean, xs) + gp_part

    def mean_hessian(self, x_star) -> np.ndarray:
        """Hessian of the posterior mean, shape (N, d, d)."""
        xs = _as_2d(x_star)
        d = xs.shape[1]
        k = se_gram(xs, self.train_inputs, self.hyper)
        diff = xs[:, None, :] - self.train_inputs[None, :, :]
        l2 = self.hyper.phi_l**2
        outer = np.einsum("ijd,ije->ijde", diff, diff) / l2**2
        hess_k = k[:, :, None, None] * (outer - np.eye(d)[None, None] / l2)
        gp_part = np.einsum("ijde,j->ide", hess_k, self.alpha)
        hess_m = getattr(self.prior_mean, "hessian", None)
        if hess_m is not None:
            return np.asarray(hess_m(xs), dtype=float) + gp_part
        # fall back to differentiating the (possibly finite-difference) gradient
        step = 1e-5
        hm = np.empty((xs.shape[0], d, d))
        for j in range(d):
            xp = xs.copy()
            xm = xs.copy()
            xp[:, j] += step
            xm[:, j] -= step
            hm[:, :, j] = (_prior_gradient(self.prior_mean, xp)
                           - _prior_gradient(self.prior_mean, xm)) / (2 * step)
        return hm + gp_part


def _factorize(x: np.ndarray, h: Hyperparams) -> np.ndarray:
    gram = se_gram(x, x, h)
    gram[np.diag_indices_from(gram)] += h.sigma_n**2 + JITTER
    try:
        return np.linalg.cholesky(gram)
    except np.linalg.LinAlgError as exc:
        raise GpFactorizationError(
            "Cholesky factorization of the Gram matrix failed; the inputs "
            "are likely (near-)duplicated with sigma_n ~ 0.  Increase "
            "sigma_n or add jitter to the diagonal."
        ) from exc


def posterior(train, h: Hyperparams, prior_mean: Optional[Callable] = None) -> GpPosterior:
    """Condition a GP with the given hyperparameters on (X, Y)."""
    x, y = train
    x = _as_2d(x)
    y = np.asarray(y, dtype=float).ravel()
    if x.shape[0] < 1:
        raise ValueError("need at least one training point")
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"X has {x.shape[0]} rows but Y has {y.shape[0]} entries")
    if prior_mean is None:
        prior_mean = ZeroMean()
    chol = _factorize(x, h)
    resid = y - np.asarray(prior_mean(x), dtype=float)
    alpha = scipy.linalg.cho_solve((chol, True), resid)
    return GpPosterior(train_inputs=x, train_targets=y, hyper=h,
                       prior_mean=prior_mean, chol_factor=chol, alpha=alpha)


def posterior_mean_gradient(p: GpPosterior, x_star) -> np.ndarray:
    """Gradient of the posterior mean at a single input, shape (d,)."""
    return p.mean_gradient(x_star)[0]


def nlml(train, h: Hyperparams, prior_mean: Optional[Callable] = None) -> float:
    """Negative log marginal likelihood of (X, Y) under the SE prior."""
    x, y = train
    x = _as_2d(x)
    y = np.asarray(y, dtype=float).ravel()
    if prior_mean is None:
        prior_mean = ZeroMean()
    chol = _factorize(x, h)
    resid = y - np.asarray(prior_mean(x), dtype=float)
    alpha = scipy.linalg.cho_solve((chol, True), resid)
    n = y.shape[0]
    return float(0.5 * resid @ alpha + np.log(np.diag(chol)).sum()
                 + 0.5 * n * np.log(2.0 * np.pi))


def nlml_value_and_grad(train, h: Hyperparams, prior_mean: Optional[Callable] = None):
    """NLML and its gradient with respect to (log sigma_f, log phi_l,
    log sigma_n).  The last component is zero when sigma_n == 0."""
    x, y = train
    x = _as_2d(x)
    y = np.asarray(y, dtype=float).ravel()
    if prior_mean is None:
        prior_mean = ZeroMean()
    e = np.exp(-_sqdist(x, x) / (2.0 * h.phi_l**2))
    gram = h.sigma_f**2 * e
    s = _sqdist(x, x)
    kreg = gram + (h.sigma_n**2 + JITTER) * np.eye(x.shape[0])
    try:
        chol = np.linalg.cholesky(kreg)
    except np.linalg.LinAlgError as exc:
        raise GpFactorizationError("Gram factorization failed in nlml") from exc
    resid = y - np.asarray(prior_mean(x), dtype=float)
    alpha = scipy.linalg.cho_solve((chol, True), resid)
    n = y.shape[0]
    value = float(0.5 * resid @ alpha + np.log(np.diag(chol)).sum()
                  + 0.5 * n * np.log(2.0 * np.pi))
    # dNLML/dtheta = 0.5 tr((K^-1 - alpha alpha^T) dK/dtheta)
    kinv = scipy.linalg.cho_solve((chol, True), np.eye(n))
    inner = kinv - np.outer(alpha, alpha)
    dk_dlog_sf = 2.0 * gram
    dk_dlog_pl = gram * s / h.phi_l**2
    dk_dlog_sn = 2.0 * h.sigma_n**2 * np.eye(n)
    grad = 0.5 * np.array([
        np.einsum("ij,ji->", inner, dk_dlog_sf),
        np.einsum("ij,ji->", inner, dk_dlog_pl),
        np.einsum("ij,ji->", inner, dk_dlog_sn),
    ])
    return value, grad


_LOG_BOUNDS = (np.log(1e-6), np.log(1e6))


def optimize_hyperparams(train, init: Hyperparams,
                         prior_mean: Optional[Callable] = None,
                         n_starts: int = 8, seed: int = 0,
                         fix_sigma_n: bool = False) -> Hyperparams:
    """Minimize the NLML over hyperparameters in log space.

    Deterministic multi-start local search: L-BFGS-B from ``init`` plus
    seeded log-space perturbations; the best finite iterate seen anywhere
    is returned, so the result never has a larger NLML than ``init``.
    """
    x, y = train
    if _as_2d(x).shape[0] < 2:
        raise ValueError("hyperparameter optimization needs at least two points")
    sn0 = max(init.sigma_n, 1e-8)
    theta0 = np.log([init.sigma_f, init.phi_l, sn0])
    best = {"theta": theta0, "value": np.inf}

    def make_hyper(theta):
        sn = init.sigma_n if fix_sigma_n else float(np.exp(theta[2]))
        return Hyperparams(sigma_f=float(np.exp(theta[0])),
                           phi_l=float(np.exp(theta[1])), sigma_n=sn)

    def objective(theta):
        try:
            value, grad = nlml_value_and_grad(train, make_hyper(theta), prior_mean)
        except GpFactorizationError:
            return 1e25, np.zeros(3)
        if not np.isfinite(value):
            return 1e25, np.zeros(3)
        if value < best["value"]:
            best["value"] = value
            best["theta"] = np.array(theta)
        if fix_sigma_n:
            grad = grad.copy()
            grad[2] = 0.0
        return value, grad

    objective(theta0)
    rng = np.random.default_rng(seed)
    starts = [theta0] + [theta0 + rng.normal(scale=0.7, size=3)
                         for _ in range(n_starts - 1)]
    bounds = [(max(_LOG_BOUNDS[0], theta0[i] - 12), min(_LOG_BOUNDS[1], theta0[i] + 12))
              for i in range(3)]
    for start in starts:
        start = np.clip(start, [b[0] for b in bounds], [b[1] for b in bounds])
        scipy.optimize.minimize(objective, start, jac=True, method="L-BFGS-B",
                                bounds=bounds, options={"maxiter": 200})
    return make_hyper(best["theta"])
