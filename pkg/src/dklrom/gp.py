"""Gaussian process primitives: exact inference and the inducing-point
variational approximation.

Everything here operates on plain torch tensors and is differentiable, so the
same functions serve both the desk-scale exact-GP checks and the variational
layers inside the trained models. Exact inference (`exact_gp_posterior`,
`log_marginal_likelihood`) scales cubically and is meant for small validation
problems only; the model stack uses the variational path exclusively.

Conventions
-----------
* Feature matrices are (n, f), one row per point.
* A "belief" is a Gaussian over outputs: diagonal by default, optionally
  carrying the full covariance.
* All covariance factorizations go through `chol_with_jitter`, which retries
  with an escalating diagonal jitter before giving up with a diagnostic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import Tensor

from .errors import NumericalError, ValidationError

JITTER_INITIAL = 1e-6
JITTER_MAX = 1e-2


def _scalar(value, dtype=torch.float64) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return torch.as_tensor(value, dtype=dtype)


@dataclass(frozen=True)
class KernelParams:
    """Squared-exponential kernel hyperparameters.

    Attributes
    ----------
    signal_variance:
        Prior marginal variance sigma_f^2 (> 0).
    length_scale:
        Shared isotropic length scale l (> 0).
    mean:
        Constant prior mean of the function.
    """

    signal_variance: Tensor
    length_scale: Tensor
    mean: Tensor = field(default_factory=lambda: torch.tensor(0.0, dtype=torch.float64))

    def __post_init__(self):
        object.__setattr__(self, "signal_variance", _scalar(self.signal_variance))
        object.__setattr__(self, "length_scale", _scalar(self.length_scale))
        object.__setattr__(self, "mean", _scalar(self.mean))
        for name in ("signal_variance", "length_scale"):
            v = getattr(self, name)
            if not torch.isfinite(v).all() or (v <= 0).any():
                raise ValidationError(f"{name} must be finite and positive, got {v}")
        if not torch.isfinite(self.mean).all():
            raise ValidationError("mean must be finite")


@dataclass(frozen=True)
class NoiseParam:
    """Observation noise variance sigma_eps^2 (> 0)."""

    variance: Tensor

    def __post_init__(self):
        object.__setattr__(self, "variance", _scalar(self.variance))
        if not torch.isfinite(self.variance).all() or (self.variance <= 0).any():
            raise ValidationError(f"noise variance must be finite and positive, got {self.variance}")


@dataclass(frozen=True)
class GaussianBelief:
    """Gaussian over a vector of outputs.

    `variance` is always present (the marginal variances); `covariance` is
    carried only when the producer computed the full matrix.
    """

    mean: Tensor
    variance: Tensor
    covariance: Tensor | None = None

    def __post_init__(self):
        if self.mean.shape != self.variance.shape:
            raise ValidationError(
                f"mean/variance shape mismatch: {tuple(self.mean.shape)} vs {tuple(self.variance.shape)}"
            )
        if not torch.isfinite(self.mean).all():
            raise ValidationError("belief mean must be finite")
        if not torch.isfinite(self.variance).all() or (self.variance <= 0).any():
            raise ValidationError("belief variances must be finite and positive")
        if self.covariance is not None:
            n = self.mean.shape[-1]
            if self.covariance.shape[-2:] != (n, n):
                raise ValidationError("covariance shape does not match mean")

    @classmethod
    def from_full(cls, mean: Tensor, covariance: Tensor, min_variance: float = 1e-12) -> "GaussianBelief":
        var = torch.diagonal(covariance, dim1=-2, dim2=-1).clamp_min(min_variance)
        return cls(mean=mean, variance=var, covariance=covariance)


@dataclass(frozen=True)
class InducingState:
    """Variational posterior over inducing outputs: q(u) = N(m, L L^T).

    Attributes
    ----------
    locations:
        Inducing inputs, (n_ind, f).
    var_mean:
        Variational mean m, (n_ind,).
    var_cov_factor:
        Lower-triangular Cholesky factor L of the variational covariance,
        (n_ind, n_ind), with strictly positive diagonal.
    """

    locations: Tensor
    var_mean: Tensor
    var_cov_factor: Tensor

    def __post_init__(self):
        if self.locations.ndim != 2:
            raise ValidationError("locations must be (n_ind, f)")
        n = self.locations.shape[0]
        if self.var_mean.shape != (n,):
            raise ValidationError(f"var_mean must be ({n},), got {tuple(self.var_mean.shape)}")
        if self.var_cov_factor.shape != (n, n):
            raise ValidationError(f"var_cov_factor must be ({n}, {n})")
        L = self.var_cov_factor
        upper = torch.triu(L, diagonal=1)
        if upper.abs().max() > 1e-10 * max(1.0, float(L.abs().max())):
            raise ValidationError("var_cov_factor must be lower triangular")
        if (torch.diagonal(L) <= 0).any():
            raise ValidationError("var_cov_factor diagonal must be positive")
        for t in (self.locations, self.var_mean, self.var_cov_factor):
            if not torch.isfinite(t).all():
                raise ValidationError("inducing state must be finite")

    @classmethod
    def prior(cls, locations: Tensor, params: KernelParams) -> "InducingState":
        """State whose q(u) equals the GP prior at `locations`.

        Uses the same jittered factorization as the predictive path, so a
        prior-matching state reproduces the prior predictive exactly rather
        than up to a jitter-sized discrepancy.
        """
        K = se_kernel(locations, locations, params)
        L = chol_with_jitter(K)
        n = locations.shape[0]
        m = params.mean.to(locations.dtype) * torch.ones(n, dtype=locations.dtype)
        return cls(locations=locations, var_mean=m, var_cov_factor=L)


def _check_features(A: Tensor, name: str):
    if A.ndim != 2:
        raise ValidationError(f"{name} must be 2-d (n, f), got shape {tuple(A.shape)}")
    if A.shape[1] < 1:
        raise ValidationError(f"{name} must have at least one feature column")
    if not torch.isfinite(A).all():
        raise ValidationError(f"{name} contains non-finite entries")


def se_kernel(A: Tensor, B: Tensor, params: KernelParams) -> Tensor:
    """Squared-exponential Gram matrix.

    k(a, b) = sigma_f^2 * exp(-||a - b||^2 / (2 l^2))

    Parameters
    ----------
    A : (n_a, f)
    B : (n_b, f)

    Returns
    -------
    (n_a, n_b) matrix with entries in (0, sigma_f^2]. Computed from explicit
    pairwise differences (not a matmul expansion) so that coincident rows give
    exactly sigma_f^2.
    """
    _check_features(A, "A")
    _check_features(B, "B")
    if A.shape[1] != B.shape[1]:
        raise ValidationError(f"feature dims differ: {A.shape[1]} vs {B.shape[1]}")
    sq = (A.unsqueeze(1) - B.unsqueeze(0)).pow(2).sum(-1)
    sf2 = params.signal_variance.to(A.dtype)
    ls = params.length_scale.to(A.dtype)
    return sf2 * torch.exp(-0.5 * sq / (ls * ls))


def chol_with_jitter(K: Tensor, initial: float = JITTER_INITIAL, maximum: float = JITTER_MAX) -> Tensor:
    """Cholesky factorization with escalating diagonal jitter.

    Tries the raw matrix first, then adds `initial` to the diagonal and
    escalates tenfold up to `maximum`. Raises `NumericalError` with the
    matrix size, jitter schedule, and eigenvalue range when everything fails.
    """
    if K.ndim < 2 or K.shape[-1] != K.shape[-2]:
        raise ValidationError(f"expected square matrix, got shape {tuple(K.shape)}")
    eye = torch.eye(K.shape[-1], dtype=K.dtype, device=K.device)
    jitter = 0.0
    while True:
        L, info = torch.linalg.cholesky_ex(K + jitter * eye)
        if int(info.max()) == 0 and torch.isfinite(L).all():
            return L
        if jitter == 0.0:
            jitter = initial
        elif jitter * 10 <= maximum:
            jitter *= 10
        else:
            try:
                eigs = torch.linalg.eigvalsh(K)
                eig_range = (float(eigs.min()), float(eigs.max()))
            except Exception:
                eig_range = ("unavailable", "unavailable")
            raise NumericalError(
                f"Cholesky failed for {K.shape[-1]}x{K.shape[-1]} matrix after jitter up to "
                f"{maximum:g} (schedule start {initial:g}); eigenvalue range {eig_range}"
            )


def _check_xy(X: Tensor, y: Tensor):
    _check_features(X, "X")
    if y.ndim != 1 or y.shape[0] != X.shape[0]:
        raise ValidationError(f"y must be ({X.shape[0]},), got {tuple(y.shape)}")
    if not torch.isfinite(y).all():
        raise ValidationError("y contains non-finite entries")


def exact_gp_posterior(
    X_train: Tensor,
    y: Tensor,
    X_test: Tensor,
    params: KernelParams,
    noise: NoiseParam,
) -> GaussianBelief:
    """Exact GP posterior at test points, full covariance.

    mean = mu + k(X*, X) [K + sigma^2 I]^{-1} (y - mu)
    cov  = k(X*, X*) - k(X*, X) [K + sigma^2 I]^{-1} k(X, X*)

    With no training points the prior N(mu, k(X*, X*)) is returned. Cubic in
    n; desk-scale validation only, never used in training.
    """
    _check_features(X_test, "X_test")
    mu = params.mean.to(X_test.dtype)
    if X_train.numel() == 0 or X_train.shape[0] == 0:
        Kss = se_kernel(X_test, X_test, params)
        mean = mu * torch.ones(X_test.shape[0], dtype=X_test.dtype)
        return GaussianBelief.from_full(mean, Kss)
    _check_xy(X_train, y)
    if X_train.shape[1] != X_test.shape[1]:
        raise ValidationError("train/test feature dims differ")
    n = X_train.shape[0]
    K = se_kernel(X_train, X_train, params)
    Kn = K + noise.variance.to(K.dtype) * torch.eye(n, dtype=K.dtype)
    L = chol_with_jitter(Kn)
    Ks = se_kernel(X_train, X_test, params)
    Kss = se_kernel(X_test, X_test, params)
    resid = (y - mu).unsqueeze(-1)
    alpha = torch.cholesky_solve(resid, L)
    mean = mu + (Ks.transpose(-1, -2) @ alpha).squeeze(-1)
    V = torch.linalg.solve_triangular(L, Ks, upper=False)
    cov = Kss - V.transpose(-1, -2) @ V
    return GaussianBelief.from_full(mean, cov)


def log_marginal_likelihood(X: Tensor, y: Tensor, params: KernelParams, noise: NoiseParam) -> Tensor:
    """Exact GP log marginal likelihood of (X, y).

    log p(y) = -1/2 (y-mu)^T [K + sigma^2 I]^{-1} (y-mu)
               - 1/2 log|K + sigma^2 I| - n/2 log(2 pi)

    Differentiable with respect to any tensor-valued hyperparameters.
    """
    _check_xy(X, y)
    n = X.shape[0]
    K = se_kernel(X, X, params)
    Kn = K + noise.variance.to(K.dtype) * torch.eye(n, dtype=K.dtype)
    L = chol_with_jitter(Kn)
    resid = (y - params.mean.to(y.dtype)).unsqueeze(-1)
    alpha = torch.cholesky_solve(resid, L)
    quad = (resid * alpha).sum()
    logdet = torch.log(torch.diagonal(L)).sum() * 2.0
    return -0.5 * quad - 0.5 * logdet - 0.5 * n * math.log(2.0 * math.pi)


def variational_gp_predict(features: Tensor, inducing: InducingState, params: KernelParams) -> GaussianBelief:
    """Predictive marginals of the inducing-point variational posterior.

    With q(u) = N(m, S), S = L L^T, and A = K_uu^{-1} k_u*:

    mean_* = mu + A^T (m - mu 1)
    var_*  = k_** - diag(k_*u K_uu^{-1} k_u*) + diag(A^T S A)

    A prior-matching state (m = mu 1, S = K_uu) collapses the last two terms
    and recovers the prior; shrinking S toward zero at an inducing location
    drives the predictive variance there toward zero.
    """
    _check_features(features, "features")
    if features.shape[1] != inducing.locations.shape[1]:
        raise ValidationError("feature dim does not match inducing locations")
    mean, var = _svgp_marginals(
        features,
        inducing.locations,
        params.signal_variance.to(features.dtype),
        params.length_scale.to(features.dtype),
        params.mean.to(features.dtype),
        inducing.var_mean,
        inducing.var_cov_factor,
    )
    return GaussianBelief(mean=mean, variance=var)


def _svgp_marginals(
    features: Tensor,
    locations: Tensor,
    signal_variance: Tensor,
    length_scale: Tensor,
    mean_const: Tensor,
    var_mean: Tensor,
    var_chol: Tensor,
) -> tuple[Tensor, Tensor]:
    """Shared math for single-head and batched variational prediction.

    Leading batch dimensions are allowed on the hyperparameters, `var_mean`
    and `var_chol` (shape (..., n_ind) / (..., n_ind, n_ind)); `features`
    (n, f) and `locations` (n_ind, f) are shared across the batch. Returns
    (..., n) means and variances.
    """
    sq_uu = (locations.unsqueeze(1) - locations.unsqueeze(0)).pow(2).sum(-1)
    sq_uf = (locations.unsqueeze(1) - features.unsqueeze(0)).pow(2).sum(-1)
    sf2 = signal_variance.unsqueeze(-1).unsqueeze(-1)
    ls2 = (length_scale * length_scale).unsqueeze(-1).unsqueeze(-1)
    K_uu = sf2 * torch.exp(-0.5 * sq_uu / ls2)
    K_uf = sf2 * torch.exp(-0.5 * sq_uf / ls2)
    L_uu = chol_with_jitter(K_uu)
    A = torch.cholesky_solve(K_uf, L_uu)
    resid = var_mean - mean_const.unsqueeze(-1)
    mean = mean_const.unsqueeze(-1) + (A * resid.unsqueeze(-1)).sum(-2)
    q_diag = (K_uf * A).sum(-2)
    SA = var_chol.transpose(-1, -2) @ A
    s_diag = SA.pow(2).sum(-2)
    var = (signal_variance.unsqueeze(-1) - q_diag + s_diag).clamp_min(1e-12)
    return mean, var


def inducing_kl(inducing: InducingState, params: KernelParams) -> Tensor:
    """KL[q(u) || p(u)] between the variational posterior and the GP prior.

    q = N(m, S), p = N(mu 1, K_uu):

    KL = 1/2 [ tr(K^{-1} S) + (mu 1 - m)^T K^{-1} (mu 1 - m) - n
               + log|K| - log|S| ]

    Always >= 0; exactly 0 when q matches the prior.
    """
    sf2 = params.signal_variance.to(inducing.locations.dtype)
    ls = params.length_scale.to(inducing.locations.dtype)
    mu = params.mean.to(inducing.locations.dtype)
    return _inducing_kl_math(
        inducing.locations, sf2, ls, mu, inducing.var_mean, inducing.var_cov_factor
    )


def _inducing_kl_math(
    locations: Tensor,
    signal_variance: Tensor,
    length_scale: Tensor,
    mean_const: Tensor,
    var_mean: Tensor,
    var_chol: Tensor,
) -> Tensor:
    """Batched KL[q(u)||p(u)]; hyperparameters and q may carry leading dims."""
    n = locations.shape[0]
    sq_uu = (locations.unsqueeze(1) - locations.unsqueeze(0)).pow(2).sum(-1)
    sf2 = signal_variance.unsqueeze(-1).unsqueeze(-1)
    ls2 = (length_scale * length_scale).unsqueeze(-1).unsqueeze(-1)
    K_uu = sf2 * torch.exp(-0.5 * sq_uu / ls2)
    L_K = chol_with_jitter(K_uu)
    W = torch.linalg.solve_triangular(L_K, var_chol, upper=False)
    trace = W.pow(2).sum((-1, -2))
    resid = mean_const.unsqueeze(-1) - var_mean
    r = torch.linalg.solve_triangular(L_K, resid.unsqueeze(-1), upper=False)
    quad = r.pow(2).sum((-1, -2))
    logdet_K = 2.0 * torch.log(torch.diagonal(L_K, dim1=-2, dim2=-1)).sum(-1)
    logdet_S = 2.0 * torch.log(torch.diagonal(var_chol, dim1=-2, dim2=-1)).sum(-1)
    kl = 0.5 * (trace + quad - n + logdet_K - logdet_S)
    return kl.clamp_min(0.0)


def diag_gaussian_kl_terms(mean_p: Tensor, var_p: Tensor, mean_q: Tensor, var_q: Tensor) -> Tensor:
    """Per-dimension KL[p || q] between diagonal Gaussians.

    kl_d = log(sigma_q / sigma_p) + (sigma_p^2 + (mu_p - mu_q)^2) / (2 sigma_q^2) - 1/2
    """
    if not (mean_p.shape == var_p.shape == mean_q.shape == var_q.shape):
        raise ValidationError("diag KL operands must share a shape")
    if (var_p <= 0).any() or (var_q <= 0).any():
        raise ValidationError("diag KL variances must be positive")
    return 0.5 * torch.log(var_q / var_p) + (var_p + (mean_p - mean_q).pow(2)) / (2.0 * var_q) - 0.5


def diag_gaussian_kl(p: GaussianBelief, q: GaussianBelief) -> Tensor:
    """KL[p || q] between diagonal Gaussian beliefs, summed over dimensions.

    Clamped at zero against floating-point fuzz; identical beliefs give 0.
    """
    kl = diag_gaussian_kl_terms(p.mean, p.variance, q.mean, q.variance).sum(-1)
    return kl.clamp_min(0.0)
