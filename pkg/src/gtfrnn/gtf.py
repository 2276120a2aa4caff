"""Generalized teacher forcing: interpolation, forcing-strength estimation,
annealing, the sparse-forcing baseline, and gradient diagnostics.

The forcing strength alpha interpolates model states toward teacher
states; choosing alpha from the spectral norms of the map's Jacobians
keeps products of backpropagated Jacobians bounded.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np
import scipy.linalg

from .errors import ContractError
from .model import ObservationModel, ShPLRNNParams, jacobians_at, step

log = logging.getLogger(__name__)


def spectral_norm(A: np.ndarray, tol: float = 1e-8, max_iter: int = 200) -> float:
    """Largest singular value by power iteration on A^T A.

    Deterministic all-ones start vector; stops on relative change < tol.
    """
    A = np.asarray(A, dtype=np.float64)
    n = A.shape[1]
    v = np.ones(n) / np.sqrt(n)
    sigma = 0.0
    for _ in range(max_iter):
        w = A @ v
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v_new = A.T @ w
        nv = np.linalg.norm(v_new)
        if nv == 0.0:
            return 0.0
        v_new /= nv
        sigma_new = np.linalg.norm(A @ v_new)
        if sigma > 0 and abs(sigma_new - sigma) <= tol * sigma:
            return sigma_new
        sigma, v = sigma_new, v_new
    return sigma


@dataclass(frozen=True)
class GtfState:
    """Current forcing strength with annealing bookkeeping."""

    alpha: float = 1.0
    mode: str = "adaptive"        # "fixed" | "adaptive" | "sparse"
    tau: int = 1                  # forcing interval, sparse mode only
    alpha0: float = 1.0
    gamma: float = 0.999
    update_interval: int = 5
    step_count: int = 0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ContractError("alpha must lie in [0, 1]")
        if self.mode not in ("fixed", "adaptive", "sparse"):
            raise ContractError(f"unknown GTF mode {self.mode!r}")
        if self.mode == "sparse" and self.tau < 1:
            raise ContractError("sparse forcing interval must be >= 1")


def force_state(z: np.ndarray, z_bar: np.ndarray, alpha: float) -> np.ndarray:
    """Linear interpolation (1-alpha) z + alpha z_bar."""
    z = np.asarray(z)
    z_bar = np.asarray(z_bar)
    if z.shape != z_bar.shape:
        raise ContractError("state and teacher state must have equal shape")
    if not 0.0 <= alpha <= 1.0:
        raise ContractError("alpha must lie in [0, 1]")
    return (1.0 - alpha) * z + alpha * z_bar


def sparse_tf_schedule(tau: int, t: int) -> bool:
    """True iff step t is a forced step (full state replacement)."""
    if tau < 1:
        raise ContractError("tau must be >= 1")
    return t % tau == 0


def alpha_from_norm_bound(params: ShPLRNNParams) -> float:
    """alpha from the norm upper bound ||A|| + ||W1|| ||W2||.

    ||A|| of the diagonal is its largest absolute entry; the dense
    factors use power iteration.
    """
    bound = (np.max(np.abs(params.A))
             + spectral_norm(params.W1) * spectral_norm(params.W2))
    return max(0.0, 1.0 - 1.0 / bound) if bound > 0 else 0.0


def _as_jacobian_array(batch) -> np.ndarray:
    """Accept (S, T, M, M) or (T, M, M); return (S, T, M, M)."""
    J = np.asarray(batch, dtype=np.float64)
    if J.ndim == 3:
        J = J[None]
    if J.ndim != 4 or J.shape[-1] != J.shape[-2]:
        raise ContractError("expected an (S, T, M, M) array of Jacobians")
    if J.shape[1] < 1:
        raise ContractError("empty Jacobian batch")
    if not np.all(np.isfinite(J)):
        raise ContractError("Jacobians must be finite")
    return J


def alpha_from_max_data_jacobian(batch) -> float:
    """alpha = max(0, 1 - 1/sigma_hat) with sigma_hat the largest
    spectral norm over all Jacobians in the batch."""
    J = _as_jacobian_array(batch)
    sigma = max(spectral_norm(Jt) for seq in J for Jt in seq)
    return max(0.0, 1.0 - 1.0 / sigma) if sigma > 0 else 0.0


def _explog_kappa(seq: np.ndarray) -> float:
    """|| exp(mean of principal logs) ||; raises on a non-principal branch."""
    acc = np.zeros_like(seq[0])
    for Jt in seq:
        ev = np.linalg.eigvals(Jt)
        if np.any((ev.real <= 0) & (np.abs(ev.imag) < 1e-12)):
            raise ValueError("eigenvalue on the closed negative real axis")
        acc += scipy.linalg.logm(Jt)
    G = scipy.linalg.expm(acc / len(seq))
    return spectral_norm(G.real) if np.allclose(G.imag, 0, atol=1e-8) \
        else spectral_norm(np.abs(G))


def geometric_mean_norm(batch, method: str = "arithmetic") -> np.ndarray:
    """Per-sequence magnitude kappa of the geometric-mean Jacobian.

    method: "explog"     spectral norm of exp(mean principal log)
            "arithmetic" spectral norm of the mean Jacobian
            "norm_bound" geometric mean of per-step spectral norms

    explog falls back to the arithmetic mean for sequences whose
    Jacobians have eigenvalues on the closed negative real axis.
    """
    J = _as_jacobian_array(batch)
    if J.shape[1] < 1:
        raise ContractError("need at least one Jacobian per sequence")
    out = np.empty(J.shape[0])
    for p, seq in enumerate(J):
        if method == "arithmetic":
            out[p] = spectral_norm(seq.mean(axis=0))
        elif method == "norm_bound":
            norms = np.array([spectral_norm(Jt) for Jt in seq])
            out[p] = 0.0 if np.any(norms == 0) else \
                float(np.exp(np.mean(np.log(norms))))
        elif method == "explog":
            try:
                out[p] = _explog_kappa(seq)
            except (ValueError, scipy.linalg.LinAlgError):
                log.warning("explog failed for sequence %d; "
                            "falling back to arithmetic mean", p)
                out[p] = spectral_norm(seq.mean(axis=0))
        else:
            raise ContractError(f"unknown method {method!r}")
    return out


def alpha_from_geomean(batch, method: str = "arithmetic") -> float:
    kappas = geometric_mean_norm(batch, method)
    return float(max(0.0, np.max(1.0 - 1.0 / np.maximum(kappas, 1e-300))))


def anneal_update(state: GtfState, batch, method: str = "arithmetic") -> GtfState:
    """One annealing step: every update_interval-th call re-estimates
    alpha; estimates above the current value are adopted immediately,
    lower ones enter an exponential moving average."""
    if state.mode != "adaptive":
        raise ContractError("anneal_update requires adaptive mode")
    n = state.step_count + 1
    if n % state.update_interval != 0:
        return replace(state, step_count=n)
    estimate = alpha_from_geomean(batch, method)
    if estimate > state.alpha:
        new_alpha = estimate
    else:
        new_alpha = (1.0 - state.gamma) * estimate + state.gamma * state.alpha
    return replace(state, alpha=new_alpha, step_count=n)


def jacobian_product_norm_series(params: ShPLRNNParams, obs: ObservationModel,
                                 data: np.ndarray, alpha: float,
                                 t_max: int) -> np.ndarray:
    """log10 of || (1-alpha)^t J~_t ... J~_1 ||_2 for t = 1..t_max.

    Starts from the data-inferred state for row 0 and propagates with
    forcing alpha against the teacher sequence; accumulation is kept in
    the log domain to avoid overflow.
    """
    if t_max < 1:
        raise ContractError("t_max must be >= 1")
    X = np.asarray(data, dtype=np.float64)
    z_hat = obs.invert(X)
    z = z_hat[0].copy()
    P = np.eye(params.M)
    log10_acc = 0.0
    out = np.empty(t_max)
    for t in range(1, t_max + 1):
        teacher = z_hat[min(t - 1, len(z_hat) - 1)]
        z_forced = force_state(z, teacher, alpha)
        Jt = jacobians_at(params, z_forced[None])[0]
        P = (1.0 - alpha) * (Jt @ P)
        scale = np.max(np.abs(P))
        if scale > 0:
            log10_acc += np.log10(scale)
            P = P / scale
            sigma = spectral_norm(P)
            out[t - 1] = log10_acc + (np.log10(sigma) if sigma > 0 else -np.inf)
        else:
            log10_acc = -np.inf
            out[t - 1] = -np.inf
        z = step(params, z_forced)
    return out


@dataclass(frozen=True)
class JacobianSpectrumStats:
    """Diagnostic spectral summary of a Jacobian batch."""

    sigma_max_tilde: float
    lambda_min_tilde: float

    @property
    def gamma_tilde(self) -> float:
        return self.lambda_min_tilde / self.sigma_max_tilde


def jacobian_spectrum_stats(batch) -> JacobianSpectrumStats:
    """Largest spectral norm and smallest eigenvalue modulus over the batch."""
    J = _as_jacobian_array(batch)
    sigma = 0.0
    lam = np.inf
    for seq in J:
        for Jt in seq:
            sigma = max(sigma, spectral_norm(Jt))
            lam = min(lam, float(np.min(np.abs(np.linalg.eigvals(Jt)))))
    return JacobianSpectrumStats(sigma, lam)


def commutator_diagnostic(batch, max_pairs: int = 2000,
                          seed: int = 0) -> np.ndarray:
    """Relative commutator norms ||JaJb - JbJa||_F / (sqrt(2) ||Ja||_F ||Jb||_F)
    over sampled Jacobian pairs; zero-norm pairs are skipped."""
    J4 = _as_jacobian_array(batch)
    J = J4.reshape(-1, *J4.shape[2:])
    n = len(J)
    if n < 2:
        raise ContractError("need at least two Jacobians")
    rng = np.random.default_rng(seed)
    total = n * (n - 1) // 2
    if total <= max_pairs:
        pairs = [(a, b) for a in range(n) for b in range(a + 1, n)]
    else:
        pairs = set()
        while len(pairs) < max_pairs:
            a, b = rng.integers(0, n, size=2)
            if a != b:
                pairs.add((min(a, b), max(a, b)))
        pairs = sorted(pairs)
    ratios = []
    for a, b in pairs:
        na = np.linalg.norm(J[a], "fro")
        nb = np.linalg.norm(J[b], "fro")
        if na == 0 or nb == 0:
            continue
        comm = J[a] @ J[b] - J[b] @ J[a]
        ratios.append(np.linalg.norm(comm, "fro") / (np.sqrt(2.0) * na * nb))
    return np.array(ratios)
