"""Training loop: sub-sequence batching, teacher-forced forward pass,
exact reverse-mode gradients through the unrolled graph, regularizers,
rectified-Adam updates and an exponential learning-rate schedule.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .benchmarks import TrajectoryDataset
from .errors import ConfigError, ContractError, DivergenceError, NumericError
from .gtf import GtfState, anneal_update
from .model import ObservationModel, ShPLRNNParams, jacobians_at

log = logging.getLogger(__name__)

GRAD_NORM_CAP = 1e6
MAX_NONFINITE_STREAK = 10


@dataclass(frozen=True)
class RegularizationConfig:
    lambda_reg: float = 0.0   # pulls A toward identity, weights/biases to 0
    lambda_cn: float = 0.0    # pulls cond(B) toward 1 (trainable B only)
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.lambda_reg < 0 or self.lambda_cn < 0:
            raise ConfigError("regularization weights must be nonnegative")


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 5000
    batches_per_epoch: int = 50
    batch_size: int = 16
    seq_len: int = 200
    lr_start: float = 1e-3
    lr_end: float = 1e-6
    seed: int = 0
    gtf: GtfState = field(default_factory=GtfState)
    reg: RegularizationConfig = field(default_factory=RegularizationConfig)
    alpha_method: str = "arithmetic"
    differentiate_pinv: bool = False

    def __post_init__(self):
        if self.seq_len < 2:
            raise ConfigError("seq_len must be >= 2")
        if self.lr_end > self.lr_start:
            raise ConfigError("lr_end must not exceed lr_start")

    @property
    def total_updates(self) -> int:
        return self.epochs * self.batches_per_epoch


@dataclass
class LossReport:
    mse: float
    reg_terms: dict
    grad_norm: float
    alpha_used: float

    @property
    def total(self) -> float:
        return self.mse + sum(self.reg_terms.values())


def sample_batch(dataset: TrajectoryDataset, S: int, seq_len: int,
                 rng: np.random.Generator) -> np.ndarray:
    """S contiguous subsequences of length seq_len, uniform start indices."""
    T = dataset.T
    if T < seq_len + 1:
        raise ConfigError(f"dataset length {T} < seq_len + 1 = {seq_len + 1}")
    starts = rng.integers(0, T - seq_len, size=S)
    return np.stack([dataset.data[s:s + seq_len] for s in starts])


def step_alphas(gtf: GtfState, seq_len: int) -> np.ndarray:
    """Forcing strength applied to each transition of a length-seq_len
    sequence (entry p forces state p before the step to p+1)."""
    if gtf.mode == "sparse":
        p = np.arange(seq_len - 1)
        return (p % gtf.tau == 0).astype(np.float64)
    return np.full(seq_len - 1, gtf.alpha)


@dataclass
class ForwardTrace:
    """Everything the backward pass needs from one forced forward pass."""

    X: np.ndarray        # (S, T, N) inputs
    Z_hat: np.ndarray    # (S, T, M) teacher states
    Z: np.ndarray        # (S, T, M) model states
    Z_forced: np.ndarray  # (S, T-1, M)
    Psi: np.ndarray      # (S, T-1, L) hidden-layer output
    D1: np.ndarray       # (S, T-1, L) threshold-shifted ReLU gate
    D0: np.ndarray | None  # clipped variant only
    X_pred: np.ndarray   # (S, T-1, N) predictions for rows 1..T-1
    alphas: np.ndarray   # (T-1,)


def forward_forced(params: ShPLRNNParams, obs: ObservationModel,
                   gtf: GtfState, batch: np.ndarray) -> ForwardTrace:
    """Teacher-forced rollout of a batch of sequences.

    The first state is the inverted first observation; every later step
    applies the forcing interpolation before the map.
    """
    X = np.asarray(batch, dtype=np.float64)
    S, T, _ = X.shape
    alphas = step_alphas(gtf, T)
    Z_hat = obs.invert(X)

    M, L = params.M, params.L
    Z = np.empty((S, T, M))
    Zf = np.empty((S, T - 1, M))
    Psi = np.empty((S, T - 1, L))
    D1 = np.empty((S, T - 1, L))
    D0 = np.empty((S, T - 1, L)) if params.clipped else None
    Z[:, 0] = Z_hat[:, 0]
    for p in range(T - 1):
        a = alphas[p]
        zf = (1.0 - a) * Z[:, p] + a * Z_hat[:, p]
        Zf[:, p] = zf
        U = zf @ params.W2.T + params.h2
        d1 = U > 0
        D1[:, p] = d1
        psi = U * d1
        if params.clipped:
            U0 = zf @ params.W2.T
            d0 = U0 > 0
            D0[:, p] = d0
            psi = psi - U0 * d0
        Psi[:, p] = psi
        z_next = zf * params.A + psi @ params.W1.T + params.h1
        if not np.all(np.isfinite(z_next)):
            raise NumericError(f"non-finite state at transition {p}")
        Z[:, p + 1] = z_next
    X_pred = Z[:, 1:] @ obs.B.T
    return ForwardTrace(X, Z_hat, Z, Zf, Psi, D1, D0, X_pred, alphas)


def condition_number_penalty(B: np.ndarray, epsilon: float) -> float:
    s = np.linalg.svd(B, compute_uv=False)
    return float((1.0 - s.max() / (s.min() + epsilon)) ** 2)


def loss(trace: ForwardTrace, params: ShPLRNNParams, obs: ObservationModel,
         reg: RegularizationConfig) -> LossReport:
    S, Tm1, _ = trace.X_pred.shape
    err = trace.X_pred - trace.X[:, 1:]
    mse = float(np.sum(err * err) / (S * Tm1))
    reg_terms = {}
    if reg.lambda_reg > 0:
        l_reg = (np.sum((1.0 - params.A) ** 2) + np.sum(params.W1 ** 2)
                 + np.sum(params.W2 ** 2) + np.sum(params.h1 ** 2)
                 + np.sum(params.h2 ** 2))
        reg_terms["reg"] = reg.lambda_reg * float(l_reg)
    if reg.lambda_cn > 0 and obs.trainable:
        reg_terms["cn"] = reg.lambda_cn * condition_number_penalty(
            obs.B, reg.epsilon)
    return LossReport(mse, reg_terms, grad_norm=np.nan,
                      alpha_used=float(trace.alphas.max(initial=0.0)))


@dataclass
class Gradients:
    A: np.ndarray
    W1: np.ndarray
    W2: np.ndarray
    h1: np.ndarray
    h2: np.ndarray
    B: np.ndarray | None = None
    initial_state_adjoint: np.ndarray | None = None  # (S, M), diagnostics

    def norm(self) -> float:
        parts = [self.A, self.W1, self.W2, self.h1, self.h2]
        if self.B is not None:
            parts.append(self.B)
        return float(np.sqrt(sum(np.sum(g * g) for g in parts)))


def backward(trace: ForwardTrace, params: ShPLRNNParams,
             obs: ObservationModel, reg: RegularizationConfig,
             differentiate_pinv: bool = False) -> Gradients:
    """Exact reverse-mode gradients of the total loss.

    The adjoint picks up the factor (1 - alpha_p) at every forced
    transition. Teacher states are constants unless differentiate_pinv
    is set, in which case gradients also flow into B through the
    pseudo-inverse differential.
    """
    X, Z, Zf, Psi, D1, D0 = (trace.X, trace.Z, trace.Z_forced, trace.Psi,
                             trace.D1, trace.D0)
    S, T, _ = X.shape
    A, W1, W2 = params.A, params.W1, params.W2

    E = (2.0 / (S * (T - 1))) * (trace.X_pred - X[:, 1:])   # (S, T-1, N)
    gB = np.einsum("stn,stm->nm", E, Z[:, 1:]) if obs.trainable else None
    A_obs = E @ obs.B                                        # (S, T-1, M)

    gA = np.zeros_like(A)
    gW1 = np.zeros_like(W1)
    gW2 = np.zeros_like(W2)
    gh1 = np.zeros_like(params.h1)
    gh2 = np.zeros_like(params.h2)
    G_pinv = np.zeros((params.M, X.shape[2])) if differentiate_pinv else None

    G = A_obs[:, T - 2].copy()   # adjoint of z_{T-1}
    for p in range(T - 2, -1, -1):
        zf = Zf[:, p]
        gA += np.sum(G * zf, axis=0)
        gh1 += np.sum(G, axis=0)
        gW1 += G.T @ Psi[:, p]
        Sl = G @ W1                                # (S, L)
        gated = Sl * D1[:, p]
        gh2 += np.sum(gated, axis=0)
        eff = gated if D0 is None else gated - Sl * D0[:, p]
        gW2 += eff.T @ zf
        G_forced = G * A + eff @ W2                # adjoint of forced state
        a = trace.alphas[p]
        if G_pinv is not None and a > 0:
            G_pinv += a * (G_forced.T @ X[:, p])
        G = (1.0 - a) * G_forced
        if p >= 1:
            G += A_obs[:, p - 1]
    initial_adjoint = G.copy()
    if G_pinv is not None:
        G_pinv += G.T @ X[:, 0]   # z_0 = B+ x_0

    if reg.lambda_reg > 0:
        lam = reg.lambda_reg
        gA += lam * 2.0 * (A - 1.0)
        gW1 += lam * 2.0 * W1
        gW2 += lam * 2.0 * W2
        gh1 += lam * 2.0 * params.h1
        gh2 += lam * 2.0 * params.h2

    if gB is not None:
        if G_pinv is not None:
            Bp = obs.B_pinv
            B = obs.B
            gB += (-Bp.T @ G_pinv @ Bp.T
                   + (np.eye(obs.N) - B @ Bp) @ G_pinv.T @ Bp @ Bp.T
                   + Bp.T @ Bp @ G_pinv.T @ (np.eye(obs.M) - Bp @ B))
        if reg.lambda_cn > 0:
            gB += reg.lambda_cn * _cn_penalty_grad(obs.B, reg.epsilon)

    return Gradients(gA, gW1, gW2, gh1, gh2, gB,
                     initial_state_adjoint=initial_adjoint)


def _cn_penalty_grad(B: np.ndarray, epsilon: float) -> np.ndarray:
    U, s, Vt = np.linalg.svd(B, full_matrices=False)
    smax, smin = s[0], s[-1]
    r = smax / (smin + epsilon)
    d_dmax = -2.0 * (1.0 - r) / (smin + epsilon)
    d_dmin = 2.0 * (1.0 - r) * smax / (smin + epsilon) ** 2
    return (d_dmax * np.outer(U[:, 0], Vt[0])
            + d_dmin * np.outer(U[:, -1], Vt[-1]))


@dataclass
class OptimizerState:
    """Rectified-Adam state: per-tensor first/second moments."""

    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_tensors(cls, tensors: dict, **kw) -> "OptimizerState":
        return cls(m={k: np.zeros_like(t) for k, t in tensors.items()},
                   v={k: np.zeros_like(t) for k, t in tensors.items()}, **kw)


def optimizer_step(opt: OptimizerState, tensors: dict, grads: dict,
                   lr: float) -> dict:
    """One rectified-Adam update; returns the updated tensors.

    The variance-rectification term gates between the adaptive update
    and SGD with momentum while second-moment estimates are unreliable.
    Non-finite gradients skip the step entirely.
    """
    if any(not np.all(np.isfinite(g)) for g in grads.values()):
        log.warning("non-finite gradients at optimizer step %d; skipped",
                    opt.step + 1)
        return tensors
    opt.step += 1
    t = opt.step
    b1, b2 = opt.beta1, opt.beta2
    rho_inf = 2.0 / (1.0 - b2) - 1.0
    rho_t = rho_inf - 2.0 * t * b2 ** t / (1.0 - b2 ** t)
    out = {}
    for k, x in tensors.items():
        g = grads[k]
        opt.m[k] = b1 * opt.m[k] + (1.0 - b1) * g
        opt.v[k] = b2 * opt.v[k] + (1.0 - b2) * g * g
        m_hat = opt.m[k] / (1.0 - b1 ** t)
        if rho_t > 4.0:
            r = np.sqrt(((rho_t - 4.0) * (rho_t - 2.0) * rho_inf)
                        / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t))
            v_hat = np.sqrt(opt.v[k] / (1.0 - b2 ** t))
            out[k] = x - lr * r * m_hat / (v_hat + opt.epsilon)
        else:
            out[k] = x - lr * m_hat
    return out


def lr_schedule(n: int, total_steps: int, lr_start: float,
                lr_end: float) -> float:
    """Geometric interpolation from lr_start at n=0 to lr_end at n=total."""
    if total_steps <= 0:
        return lr_start
    return lr_start * (lr_end / lr_start) ** (n / total_steps)


def _params_tensors(params: ShPLRNNParams, obs: ObservationModel) -> dict:
    t = {"A": params.A, "W1": params.W1, "W2": params.W2,
         "h1": params.h1, "h2": params.h2}
    if obs.trainable:
        t["B"] = obs.B
    return t


def train(dataset: TrajectoryDataset, params: ShPLRNNParams,
          obs: ObservationModel, cfg: TrainingConfig,
          checkpoint_cb=None):
    """Full training loop; returns (params, obs, log_rows, gtf_state).

    log_rows is one dict per parameter update with keys update, epoch,
    lr, alpha, mse, L_reg, L_cn, grad_norm, wall_ms. Forcing is applied
    only here; evaluation always free-runs.
    """
    rng = np.random.default_rng(cfg.seed)
    params = params.copy()
    obs = ObservationModel(obs.B.copy(), obs.trainable, obs.identity_mode)
    gtf = cfg.gtf
    opt = OptimizerState.for_tensors(_params_tensors(params, obs))
    rows = []
    nonfinite_streak = 0
    total = cfg.total_updates

    for update in range(total):
        t0 = time.perf_counter()
        lr = lr_schedule(update, total, cfg.lr_start, cfg.lr_end)
        batch = sample_batch(dataset, cfg.batch_size, cfg.seq_len, rng)

        if gtf.mode == "adaptive":
            jb = None
            if (gtf.step_count + 1) % gtf.update_interval == 0:
                Z_hat = obs.invert(batch)
                jb = np.stack([jacobians_at(params, zh[:-1]) for zh in Z_hat])
            gtf = anneal_update(gtf, jb, cfg.alpha_method)

        try:
            trace = forward_forced(params, obs, gtf, batch)
            report = loss(trace, params, obs, cfg.reg)
            if not np.isfinite(report.total):
                raise NumericError("non-finite loss")
            grads = backward(trace, params, obs, cfg.reg,
                             cfg.differentiate_pinv)
        except NumericError as exc:
            nonfinite_streak += 1
            log.warning("update %d skipped: %s", update, exc)
            if nonfinite_streak > MAX_NONFINITE_STREAK:
                raise DivergenceError(
                    f"{nonfinite_streak} consecutive non-finite losses "
                    f"(last at update {update})", step=update) from exc
            continue
        nonfinite_streak = 0

        gnorm = grads.norm()
        if gnorm > GRAD_NORM_CAP:
            raise DivergenceError(
                f"gradient norm {gnorm:.3g} exceeded cap {GRAD_NORM_CAP:g} "
                f"at update {update}", step=update)

        tensors = _params_tensors(params, obs)
        gdict = {"A": grads.A, "W1": grads.W1, "W2": grads.W2,
                 "h1": grads.h1, "h2": grads.h2}
        if obs.trainable:
            gdict["B"] = grads.B
        new = optimizer_step(opt, tensors, gdict, lr)
        params = ShPLRNNParams(new["A"], new["W1"], new["W2"], new["h1"],
                               new["h2"], params.clipped)
        if obs.trainable:
            obs = ObservationModel(new["B"], trainable=True)

        rows.append({
            "update": update,
            "epoch": update // cfg.batches_per_epoch,
            "lr": lr,
            "alpha": gtf.alpha if gtf.mode != "sparse" else 1.0,
            "mse": report.mse,
            "L_reg": report.reg_terms.get("reg", 0.0),
            "L_cn": report.reg_terms.get("cn", 0.0),
            "grad_norm": gnorm,
            "wall_ms": (time.perf_counter() - t0) * 1e3,
        })
        if checkpoint_cb is not None:
            checkpoint_cb(update, params, obs, gtf)
    return params, obs, rows, gtf
