"""Reconstruction-quality measures.

State-space occupation KL divergence (histogram binning or GMM Monte
Carlo), mean Hellinger distance between smoothed power spectra, n-step
prediction error, and the maximum Lyapunov exponent of a trained model.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .errors import ContractError, DivergenceError
from .model import ObservationModel, ShPLRNNParams, free_run, jacobians_at, step

log = logging.getLogger(__name__)

DIVERGENCE_NORM = 1e12
PE_ERROR_CAP = 1e12


@dataclass(frozen=True)
class DstspConfig:
    method: str = "binning"      # "binning" | "gmm"
    bins_per_dim: int = 30
    sigma2: float = 1.0
    n_samples: int = 10_000
    seed: int = 0
    binning_max_dim: int = 5     # binning used when N <= this

    def __post_init__(self):
        if self.bins_per_dim < 2 or self.sigma2 <= 0 or self.n_samples < 100:
            raise ContractError("invalid state-space divergence config")


@dataclass(frozen=True)
class SpectrumConfig:
    smoothing_sigma: float = 20.0

    @property
    def window(self) -> int:
        w = int(round(8 * self.smoothing_sigma + 1))
        return w if w % 2 == 1 else w + 1


@dataclass
class MetricsReport:
    d_stsp: float = np.nan
    d_h: float = np.nan
    pe: dict = field(default_factory=dict)
    lyap_max: float = np.nan
    generated_steps: int = 0
    transient_discarded: int = 0
    diverging: bool = False

    def as_flat_dict(self) -> dict:
        d = {"d_stsp": self.d_stsp, "d_h": self.d_h,
             "lyap_max": self.lyap_max,
             "generated_steps": self.generated_steps,
             "transient_discarded": self.transient_discarded,
             "status": "diverging" if self.diverging else "ok"}
        for n, v in sorted(self.pe.items()):
            d[f"pe_{n}"] = v
        return d


def d_stsp_binning(truth: np.ndarray, generated: np.ndarray,
                   m: int = 30) -> float:
    """KL(truth || generated) over an m-per-dimension binning of the
    truth bounding box; generated points are clamped into edge bins and
    empty generated bins receive a 1/(T+K) pseudo-count."""
    truth = np.asarray(truth, dtype=np.float64)
    gen = np.asarray(generated, dtype=np.float64)
    if truth.size == 0 or gen.size == 0:
        raise ContractError("empty input")
    N = truth.shape[1]
    if m ** N > 1e8:
        raise ContractError(f"binning infeasible: {m}^{N} bins")
    lo = truth.min(axis=0)
    hi = truth.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)

    def bin_ids(x):
        idx = np.floor((x - lo) / span * m).astype(np.int64)
        np.clip(idx, 0, m - 1, out=idx)
        # flatten the per-dimension indices into one bin id
        flat = idx[:, 0]
        for d in range(1, N):
            flat = flat * m + idx[:, d]
        return flat

    p_ids, p_counts = np.unique(bin_ids(truth), return_counts=True)
    q_ids, q_counts = np.unique(bin_ids(gen), return_counts=True)
    q_map = dict(zip(q_ids.tolist(), q_counts.tolist()))
    Tq = len(gen)
    K = m ** N
    eps = 1.0 / (Tq + K)
    p_hat = p_counts / len(truth)
    q_hat = np.array([q_map.get(i, 0) / Tq for i in p_ids.tolist()])
    q_hat = np.where(q_hat > 0, q_hat, eps)
    return float(np.sum(p_hat * np.log(p_hat / q_hat)))


def _subsample_centers(x: np.ndarray, cap: int = 10_000) -> np.ndarray:
    """Stratified-in-time subsampling of mixture centers."""
    if len(x) <= cap:
        return x
    idx = np.linspace(0, len(x) - 1, cap).round().astype(int)
    return x[idx]


def _gmm_logpdf(samples: np.ndarray, centers: np.ndarray,
                sigma2: float) -> np.ndarray:
    N = centers.shape[1]
    d2 = ((samples[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    log_norm = -0.5 * N * np.log(2 * np.pi * sigma2)
    return logsumexp(-0.5 * d2 / sigma2, axis=1) + log_norm - np.log(len(centers))


def d_stsp_gmm(truth: np.ndarray, generated: np.ndarray,
               sigma2: float = 1.0, n_samples: int = 10_000,
               seed: int = 0, return_stderr: bool = False):
    """Monte Carlo KL between Gaussian mixtures centered on the orbits."""
    truth = _subsample_centers(np.asarray(truth, dtype=np.float64))
    gen = _subsample_centers(np.asarray(generated, dtype=np.float64))
    if truth.size == 0 or gen.size == 0:
        raise ContractError("empty input")
    rng = np.random.default_rng(seed)
    picks = rng.integers(0, len(truth), size=n_samples)
    samples = truth[picks] + rng.standard_normal(
        (n_samples, truth.shape[1])) * np.sqrt(sigma2)
    # chunked evaluation keeps the pairwise distance matrix bounded
    terms = np.empty(n_samples)
    chunk = max(1, int(2e7 // max(len(truth), len(gen))))
    for i in range(0, n_samples, chunk):
        s = samples[i:i + chunk]
        terms[i:i + chunk] = (_gmm_logpdf(s, truth, sigma2)
                              - _gmm_logpdf(s, gen, sigma2))
    est = float(terms.mean())
    if return_stderr:
        return est, float(terms.std(ddof=1) / np.sqrt(n_samples))
    return est


def gaussian_kernel(sigma: float) -> np.ndarray:
    half = int(round(8 * sigma + 1)) // 2
    x = np.arange(-half, half + 1)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def smoothed_power_spectrum(series: np.ndarray, sigma: float) -> np.ndarray:
    """|FFT|^2 of the mean-removed series, Gaussian-smoothed and
    normalized to sum one. Returns None for a constant series."""
    x = np.asarray(series, dtype=np.float64)
    x = x - x.mean()
    if np.allclose(x, 0.0):
        return None
    spec = np.abs(np.fft.rfft(x)) ** 2
    kernel = gaussian_kernel(sigma)
    padded = np.pad(spec, len(kernel) // 2, mode="reflect")
    spec = np.convolve(padded, kernel, mode="valid")
    return spec / spec.sum()


def d_h(truth: np.ndarray, generated: np.ndarray,
        cfg: SpectrumConfig = SpectrumConfig()) -> float:
    """Mean over dimensions of the Hellinger distance between smoothed,
    normalized power spectra."""
    truth = np.atleast_2d(np.asarray(truth, dtype=np.float64).T).T
    gen = np.atleast_2d(np.asarray(generated, dtype=np.float64).T).T
    if truth.shape[1] != gen.shape[1]:
        raise ContractError("dimension mismatch")
    if min(len(truth), len(gen)) < 2 * cfg.window:
        raise ContractError("series too short for the smoothing window")
    hs = []
    for i in range(truth.shape[1]):
        f = smoothed_power_spectrum(truth[:, i], cfg.smoothing_sigma)
        g = smoothed_power_spectrum(gen[:, i], cfg.smoothing_sigma)
        if f is None and g is None:
            hs.append(0.0)
            continue
        if f is None or g is None:
            log.warning("constant series in dimension %d; H set to 1", i)
            hs.append(1.0)
            continue
        n = min(len(f), len(g))
        hs.append(np.linalg.norm(np.sqrt(f[:n]) - np.sqrt(g[:n])) / np.sqrt(2.0))
    return float(np.mean(hs))


def prediction_error(params: ShPLRNNParams, obs: ObservationModel,
                     test: np.ndarray, n: int) -> float:
    """Mean squared n-step-ahead forecast error from data-inferred states."""
    X = np.asarray(test, dtype=np.float64)
    T, N = X.shape
    if T <= n:
        raise ContractError("test set shorter than the prediction horizon")
    Z = obs.invert(X[:T - n])
    dead = np.zeros(len(Z), dtype=bool)
    for _ in range(n):
        Z[dead] = 0.0  # keep the arithmetic finite; charged below
        Z = step(params, Z)
        dead |= ~np.all(np.isfinite(Z), axis=1)
        with np.errstate(over="ignore"):
            dead |= np.linalg.norm(np.nan_to_num(Z), axis=1) > DIVERGENCE_NORM
    Z[dead] = 0.0
    X_pred = obs.observe(Z)
    err = np.sum((X[n:] - X_pred) ** 2, axis=1)
    if np.any(dead):
        log.warning("%d rollouts diverged during PE(%d); capped",
                    int(dead.sum()), n)
        err[dead] = PE_ERROR_CAP
    return float(err.sum() / (N * (T - n)))


def lyapunov_max(params: ShPLRNNParams, z0: np.ndarray, steps: int,
                 renorm_interval: int = 5) -> float:
    """Maximum Lyapunov exponent per step via tangent-vector propagation
    with periodic renormalization along a free-run orbit."""
    if steps < 1000:
        raise ContractError("steps must be >= 1000")
    z = np.asarray(z0, dtype=np.float64).copy()
    rng = np.random.default_rng(1)
    v = rng.standard_normal(params.M)
    v /= np.linalg.norm(v)
    log_acc = 0.0
    for t in range(steps):
        J = jacobians_at(params, z[None])[0]
        v = J @ v
        if (t + 1) % renorm_interval == 0 or t == steps - 1:
            nv = np.linalg.norm(v)
            if nv == 0.0:
                return -np.inf
            log_acc += np.log(nv)
            v /= nv
        z = step(params, z)
        if np.linalg.norm(z) > DIVERGENCE_NORM:
            raise DivergenceError(f"orbit diverged at step {t}", step=t)
    return log_acc / steps


def evaluate(params: ShPLRNNParams, obs: ObservationModel,
             test: np.ndarray, dstsp: DstspConfig = DstspConfig(),
             spectrum: SpectrumConfig = SpectrumConfig(),
             pe_steps=(20,), lyap_steps: int = 10_000) -> MetricsReport:
    """Free-run evaluation against a test set.

    Draws a single orbit of length 1.25 T from the inverted first test
    observation, discards the first 0.25 T steps, then computes the
    geometric, spectral and predictive measures on the rest.
    """
    X = np.asarray(test, dtype=np.float64)
    T, N = X.shape
    transient = int(0.25 * T)
    total = T + transient
    report = MetricsReport(generated_steps=total, transient_discarded=transient)
    z0 = obs.invert(X[0])
    try:
        gen = free_run(params, obs, z0, total)
    except DivergenceError as exc:
        log.warning("evaluation free run diverged: %s", exc)
        report.diverging = True
        return report
    gen = gen[transient:]

    if N <= dstsp.binning_max_dim and dstsp.method != "gmm":
        report.d_stsp = d_stsp_binning(X, gen, dstsp.bins_per_dim)
    else:
        report.d_stsp = d_stsp_gmm(X, gen, dstsp.sigma2, dstsp.n_samples,
                                   dstsp.seed)
    report.d_h = d_h(X, gen, spectrum)
    for n in pe_steps:
        report.pe[n] = prediction_error(params, obs, X, n)
    try:
        report.lyap_max = lyapunov_max(params, z0, lyap_steps)
    except DivergenceError:
        report.lyap_max = np.nan
    return report
