"""Agent risks: losses, streaming data models, and gradient oracles.

Linear-observation oracles stream ``(regressor, observation)`` pairs from a
planted linear model and expose the exact risk derivatives where closed
forms exist (squared error) or reproducible Monte Carlo proxies otherwise
(Huber, Tukey).  The quadratic oracle is the closed-form family used for
controlled descent and saddle studies.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._rng import EVAL_STREAM, make_rng

# 95%-efficiency tuning constants, as multiples of the nominal noise scale.
HUBER_TUNING = 1.345
TUKEY_TUNING = 4.685

DEFAULT_EVAL_SAMPLES = 200_000
DEFAULT_EVAL_SEED = 715_517


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

class MseLoss:
    """Squared-error loss ``e^2`` of the scalar residual."""

    kind = "mse"

    def value(self, e):
        e = np.asarray(e, dtype=float)
        return e * e

    def slope(self, e):
        return 2.0 * np.asarray(e, dtype=float)

    def curvature(self, e):
        return np.full_like(np.asarray(e, dtype=float), 2.0)


class HuberLoss:
    """Quadratic core with linear tails beyond the tuning constant."""

    kind = "huber"

    def __init__(self, c):
        if c <= 0:
            raise ValueError("Huber tuning constant must be positive")
        self.c = float(c)

    def value(self, e):
        e = np.asarray(e, dtype=float)
        a = np.abs(e)
        return np.where(a <= self.c, 0.5 * e * e, self.c * a - 0.5 * self.c**2)

    def slope(self, e):
        return np.clip(np.asarray(e, dtype=float), -self.c, self.c)

    def curvature(self, e):
        # Boundary |e| == c resolved by the inner branch.
        e = np.asarray(e, dtype=float)
        return (np.abs(e) <= self.c).astype(float)


class TukeyLoss:
    """Redescending biweight loss, constant ``c^2/6`` beyond the cutoff."""

    kind = "tukey"

    def __init__(self, c):
        if c <= 0:
            raise ValueError("Tukey tuning constant must be positive")
        self.c = float(c)

    def value(self, e):
        e = np.asarray(e, dtype=float)
        t = np.minimum((e / self.c) ** 2, 1.0)
        return (self.c**2 / 6.0) * (1.0 - (1.0 - t) ** 3)

    def slope(self, e):
        e = np.asarray(e, dtype=float)
        t = (e / self.c) ** 2
        inner = e * (1.0 - t) ** 2
        return np.where(t <= 1.0, inner, 0.0)

    def curvature(self, e):
        e = np.asarray(e, dtype=float)
        t = (e / self.c) ** 2
        inner = (1.0 - t) * (1.0 - 5.0 * t)
        return np.where(t <= 1.0, inner, 0.0)


def make_loss(kind, tuning=None, sigma_v=None):
    """Loss object for ``kind``; robust tuning defaults scale with ``sigma_v``."""
    if kind == "mse":
        return MseLoss()
    if kind == "huber":
        c = tuning if tuning is not None else HUBER_TUNING * float(sigma_v)
        return HuberLoss(c)
    if kind == "tukey":
        c = tuning if tuning is not None else TUKEY_TUNING * float(sigma_v)
        return TukeyLoss(c)
    raise ValueError(f"unknown loss kind {kind!r}")


def loss_value(loss, e):
    """Value of ``loss`` at scalar residual(s) ``e``."""
    return loss.value(e)


# ---------------------------------------------------------------------------
# data models
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseModel:
    """Measurement-noise law: Gaussian, or a two-component Gaussian mixture
    whose minority component models outliers."""

    kind: str
    sigma_v2: float
    epsilon: float = 0.0
    outlier_mean: float = 0.0

    def __post_init__(self):
        if self.sigma_v2 <= 0:
            raise ValueError("sigma_v2 must be positive")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")
        if self.kind not in ("gaussian", "bimodal"):
            raise ValueError(f"unknown noise kind {self.kind!r}")

    @classmethod
    def gaussian(cls, sigma_v2):
        return cls("gaussian", float(sigma_v2))

    @classmethod
    def bimodal(cls, epsilon, outlier_mean, sigma_v2):
        # A degenerate mixture is exactly the Gaussian sampler.
        if epsilon == 0:
            return cls.gaussian(sigma_v2)
        return cls("bimodal", float(sigma_v2), float(epsilon), float(outlier_mean))

    @property
    def sigma_v(self) -> float:
        return float(np.sqrt(self.sigma_v2))

    def mean_square(self) -> float:
        """Second moment of the noise (enters the closed-form MSE risk)."""
        return self.sigma_v2 + self.epsilon * self.outlier_mean**2

    def sample(self, rng) -> float:
        if self.kind == "gaussian":
            return self.sigma_v * rng.standard_normal()
        shift = self.outlier_mean if rng.random() < self.epsilon else 0.0
        return shift + self.sigma_v * rng.standard_normal()

    def sample_batch(self, rng, n) -> np.ndarray:
        if self.kind == "gaussian":
            return self.sigma_v * rng.standard_normal(n)
        hit = rng.random(n) < self.epsilon
        return self.outlier_mean * hit + self.sigma_v * rng.standard_normal(n)


@dataclass(frozen=True)
class LinearDataModel:
    """Planted linear observation model for one agent.

    Regressors are zero-mean Gaussian with the given SPD covariance;
    observations are ``h @ w_true + v`` with ``v`` drawn from ``noise``.
    """

    dim: int
    w_true: np.ndarray
    regressor_cov: np.ndarray
    noise: NoiseModel

    def __post_init__(self):
        w = np.asarray(self.w_true, dtype=float)
        R = np.asarray(self.regressor_cov, dtype=float)
        if w.shape != (self.dim,):
            raise ValueError("w_true has the wrong dimension")
        if R.shape != (self.dim, self.dim):
            raise ValueError("regressor_cov has the wrong shape")
        if np.abs(R - R.T).max() > 1e-12:
            raise ValueError("regressor_cov must be symmetric")
        np.linalg.cholesky(R)  # raises LinAlgError unless SPD
        object.__setattr__(self, "w_true", w)
        object.__setattr__(self, "regressor_cov", R)
        self.w_true.setflags(write=False)
        self.regressor_cov.setflags(write=False)


def make_regressor_cov(power, dim, seed, agent=0) -> np.ndarray:
    """Diagonal SPD covariance with trace equal to ``power``.

    Diagonal entries vary by a seeded factor so agents with equal power
    still see anisotropic regressors.
    """
    if power <= 0:
        raise ValueError("regressor power must be positive")
    u = make_rng(seed, EVAL_STREAM, agent, 0xC0).uniform(0.5, 1.5, dim)
    return np.diag(u * (float(power) / u.sum()))


# ---------------------------------------------------------------------------
# oracles
# ---------------------------------------------------------------------------

# Fixed evaluation base draws are shared across agents (common random
# numbers); each agent transforms them through its own model.
_EVAL_BASE_CACHE: dict = {}


def _eval_base(seed: int, n: int, dim: int):
    key = (int(seed), int(n), int(dim))
    if key not in _EVAL_BASE_CACHE:
        rng = make_rng(seed, EVAL_STREAM)
        Z = rng.standard_normal((n, dim))
        u = rng.random(n)
        zv = rng.standard_normal(n)
        _EVAL_BASE_CACHE[key] = (Z, u, zv)
    return _EVAL_BASE_CACHE[key]


class CostOracle:
    """Risk of one agent under a linear observation model.

    In streaming mode the risk is an expectation over fresh samples; true
    derivatives use the closed form for the squared-error loss and a fixed
    Monte Carlo sample set otherwise.  In ERM mode (``dataset`` given) the
    risk is the exact average over the stored samples and the stochastic
    gradient draws rows uniformly.
    """

    def __init__(self, loss, model: LinearDataModel, agent_index=0, dataset=None,
                 eval_samples=DEFAULT_EVAL_SAMPLES, eval_seed=DEFAULT_EVAL_SEED):
        self.loss = loss
        self.model = model
        self.agent_index = int(agent_index)
        self.eval_samples = int(eval_samples)
        self.eval_seed = int(eval_seed)
        self._chol = np.linalg.cholesky(model.regressor_cov)
        if dataset is not None:
            dataset = np.asarray(dataset, dtype=float)
            if dataset.ndim != 2 or dataset.shape[1] != model.dim + 1:
                raise ValueError("dataset must have dim+1 columns")
            if dataset.shape[0] < 1:
                raise ValueError("dataset must contain at least one sample")
        self.dataset = dataset
        self._cache = None

    # -- sampling ----------------------------------------------------------

    @property
    def dim(self) -> int:
        return self.model.dim

    @property
    def is_erm(self) -> bool:
        return self.dataset is not None

    def draw(self, rng):
        """One fresh sample ``(h, gamma)`` from this agent's stream."""
        if self.is_erm:
            row = self.dataset[rng.integers(self.dataset.shape[0])]
            return row[:-1], row[-1]
        h = self._chol @ rng.standard_normal(self.dim)
        gamma = h @ self.model.w_true + self.model.noise.sample(rng)
        return h, gamma

    def draw_batch(self, rng, n):
        if self.is_erm:
            rows = self.dataset[rng.integers(self.dataset.shape[0], size=n)]
            return rows[:, :-1], rows[:, -1]
        H = rng.standard_normal((n, self.dim)) @ self._chol.T
        gamma = H @ self.model.w_true + self.model.noise.sample_batch(rng, n)
        return H, gamma

    def _eval_set(self):
        """The fixed sample set backing Monte Carlo risk evaluation."""
        if self.is_erm:
            return self.dataset[:, :-1], self.dataset[:, -1]
        if self._cache is None:
            Z, u, zv = _eval_base(self.eval_seed, self.eval_samples, self.dim)
            H = Z @ self._chol.T
            noise = self.model.noise
            v = noise.sigma_v * zv
            if noise.kind == "bimodal":
                v = v + noise.outlier_mean * (u < noise.epsilon)
            self._cache = (H, H @ self.model.w_true + v)
        return self._cache

    # -- risk and derivatives ------------------------------------------------

    def risk(self, w) -> float:
        w = np.asarray(w, dtype=float)
        if self.loss.kind == "mse" and not self.is_erm:
            delta = w - self.model.w_true
            return float(delta @ self.model.regressor_cov @ delta
                         + self.model.noise.mean_square())
        H, gamma = self._eval_set()
        return float(np.mean(self.loss.value(gamma - H @ w)))

    def true_gradient(self, w) -> np.ndarray:
        w = np.asarray(w, dtype=float)
        if self.loss.kind == "mse" and not self.is_erm:
            return 2.0 * self.model.regressor_cov @ (w - self.model.w_true)
        H, gamma = self._eval_set()
        return -(self.loss.slope(gamma - H @ w) @ H) / len(gamma)

    def true_hessian(self, w) -> np.ndarray:
        w = np.asarray(w, dtype=float)
        if self.loss.kind == "mse" and not self.is_erm:
            return 2.0 * self.model.regressor_cov.copy()
        H, gamma = self._eval_set()
        c = self.loss.curvature(gamma - H @ w)
        return (H * c[:, None]).T @ H / len(gamma)

    def stochastic_gradient(self, w, rng) -> np.ndarray:
        """Per-sample loss gradient at ``w`` for one fresh draw."""
        h, gamma = self.draw(rng)
        return -float(self.loss.slope(gamma - h @ np.asarray(w, dtype=float))) * h

    def stochastic_gradient_batch(self, w, rng, n) -> np.ndarray:
        H, gamma = self.draw_batch(rng, n)
        e = gamma - H @ np.asarray(w, dtype=float)
        return -self.loss.slope(e)[:, None] * H


class QuadraticOracle:
    """Closed-form quadratic risk with optional isotropic gradient noise.

    ``risk(w) = 0.5 w'Qw + b'w + offset``; the stochastic gradient adds
    ``noise_std`` times a standard normal vector to the exact gradient.
    """

    def __init__(self, quad, linear=None, offset=0.0, noise_std=0.0):
        Q = np.asarray(quad, dtype=float)
        if Q.ndim != 2 or Q.shape[0] != Q.shape[1]:
            raise ValueError("quad must be a square matrix")
        if np.abs(Q - Q.T).max() > 1e-12:
            raise ValueError("quad must be symmetric")
        self.quad = Q
        self.linear = (np.zeros(Q.shape[0]) if linear is None
                       else np.asarray(linear, dtype=float))
        self.offset = float(offset)
        if noise_std < 0:
            raise ValueError("noise_std must be nonnegative")
        self.noise_std = float(noise_std)

    @property
    def dim(self) -> int:
        return self.quad.shape[0]

    def risk(self, w) -> float:
        w = np.asarray(w, dtype=float)
        return float(0.5 * w @ self.quad @ w + self.linear @ w + self.offset)

    def true_gradient(self, w) -> np.ndarray:
        return self.quad @ np.asarray(w, dtype=float) + self.linear

    def true_hessian(self, w) -> np.ndarray:
        return self.quad.copy()

    def stochastic_gradient(self, w, rng) -> np.ndarray:
        g = self.true_gradient(w)
        if self.noise_std > 0:
            g = g + self.noise_std * rng.standard_normal(self.dim)
        return g

    def stochastic_gradient_batch(self, w, rng, n) -> np.ndarray:
        g = np.tile(self.true_gradient(w), (n, 1))
        if self.noise_std > 0:
            g += self.noise_std * rng.standard_normal((n, self.dim))
        return g

    def noise_second_moment(self) -> float:
        return self.noise_std**2 * self.dim

    def noise_fourth_moment(self) -> float:
        # ||z||^2 is chi-squared with dim degrees of freedom.
        return self.noise_std**4 * self.dim * (self.dim + 2)


# ---------------------------------------------------------------------------
# gradient-noise moments
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseMomentEstimate:
    """Empirical second and fourth moments of the gradient noise at a point."""

    second_moment: float
    fourth_moment: float
    sample_count: int
    second_se: float = 0.0
    fourth_se: float = 0.0


def estimate_noise_moments(oracle, w, n_samples, rng) -> NoiseMomentEstimate:
    """Moments of ``stochastic_gradient - true_gradient`` at ``w``."""
    n = int(n_samples)
    if n < 1_000:
        raise ValueError("n_samples must be at least 1000")
    g = oracle.true_gradient(w)
    s = oracle.stochastic_gradient_batch(w, rng, n) - g
    sq = (s * s).sum(axis=1)
    fourth = sq * sq
    return NoiseMomentEstimate(
        second_moment=float(sq.mean()),
        fourth_moment=float(fourth.mean()),
        sample_count=n,
        second_se=float(sq.std(ddof=1) / np.sqrt(n)),
        fourth_se=float(fourth.std(ddof=1) / np.sqrt(n)),
    )


def load_dataset_csv(path, dim) -> np.ndarray:
    """ERM dataset file: ``dim`` regressor columns followed by the observation."""
    data = np.loadtxt(path, delimiter=",", ndmin=2)
    if data.shape[1] != dim + 1:
        raise ValueError(f"{path}: expected {dim + 1} columns, found {data.shape[1]}")
    return data
