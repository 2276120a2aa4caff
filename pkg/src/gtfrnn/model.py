"""Shallow piecewise-linear RNN family.

Forward maps and exact Jacobians for the shallow PLRNN and its clipped
variant, the linear observation model with pseudo-inverse, conversion
from the basis-expanded (dendritic) PLRNN, and semi-analytic fixed-point
and cycle solvers built on region-wise affine representations.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConditioningError, ContractError, DivergenceError, NumericError

DIVERGENCE_NORM = 1e12
MAX_COND = 1e8


@dataclass
class ShPLRNNParams:
    """Trainable tensors of the shallow PLRNN.

    A is stored as the length-M diagonal of the transition matrix.
    clipped selects the bounded variant in which the hidden-layer
    contribution saturates at the threshold magnitudes.
    """

    A: np.ndarray       # (M,)
    W1: np.ndarray      # (M, L)
    W2: np.ndarray      # (L, M)
    h1: np.ndarray      # (M,)
    h2: np.ndarray      # (L,)
    clipped: bool = False

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64)
        self.W1 = np.asarray(self.W1, dtype=np.float64)
        self.W2 = np.asarray(self.W2, dtype=np.float64)
        self.h1 = np.asarray(self.h1, dtype=np.float64)
        self.h2 = np.asarray(self.h2, dtype=np.float64)
        M, L = self.W1.shape
        if (self.A.shape != (M,) or self.W2.shape != (L, M)
                or self.h1.shape != (M,) or self.h2.shape != (L,)):
            raise ContractError("inconsistent parameter shapes")
        for t in (self.A, self.W1, self.W2, self.h1, self.h2):
            if not np.all(np.isfinite(t)):
                raise ContractError("parameters must be finite")
        if self.clipped and np.max(np.abs(self.A)) >= 1.0:
            warnings.warn(
                "clipped variant with max|A_i| >= 1: boundedness guarantee void",
                RuntimeWarning, stacklevel=2)

    @property
    def M(self) -> int:
        return self.W1.shape[0]

    @property
    def L(self) -> int:
        return self.W1.shape[1]

    def copy(self) -> "ShPLRNNParams":
        return ShPLRNNParams(self.A.copy(), self.W1.copy(), self.W2.copy(),
                             self.h1.copy(), self.h2.copy(), self.clipped)


@dataclass
class DendPLRNNParams:
    """PLRNN with per-unit spline basis expansion."""

    A: np.ndarray                 # (M,) diagonal
    W: np.ndarray                 # (M, M), zero diagonal
    h0: np.ndarray                # (M,)
    bases: list = field(default_factory=list)  # [(alpha_b, h_b), ...]

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64)
        self.W = np.asarray(self.W, dtype=np.float64)
        self.h0 = np.asarray(self.h0, dtype=np.float64)
        M = self.A.shape[0]
        if self.W.shape != (M, M) or self.h0.shape != (M,):
            raise ContractError("inconsistent parameter shapes")
        if np.any(np.diag(self.W) != 0):
            raise ContractError("W must have zero diagonal")
        if len(self.bases) < 1:
            raise ContractError("at least one basis required")
        self.bases = [(float(a), np.asarray(h, dtype=np.float64))
                      for a, h in self.bases]

    @property
    def M(self) -> int:
        return self.A.shape[0]

    @property
    def B(self) -> int:
        return len(self.bases)

    def step(self, z: np.ndarray) -> np.ndarray:
        acc = np.zeros(self.M)
        for a_b, h_b in self.bases:
            acc += a_b * np.maximum(0.0, z - h_b)
        return self.A * z + self.W @ acc + self.h0


class ObservationModel:
    """Linear readout x = B z with cached Moore-Penrose pseudo-inverse."""

    def __init__(self, B: np.ndarray, trainable: bool = False,
                 identity_mode: bool = False):
        B = np.asarray(B, dtype=np.float64)
        if identity_mode:
            if B.shape[0] != B.shape[1]:
                raise ContractError("identity_mode requires N == M")
            B = np.eye(B.shape[0])
        self.B = B
        self.trainable = trainable
        self.identity_mode = identity_mode
        self.refresh_pinv()

    @classmethod
    def identity(cls, n: int) -> "ObservationModel":
        return cls(np.eye(n), trainable=False, identity_mode=True)

    @property
    def N(self) -> int:
        return self.B.shape[0]

    @property
    def M(self) -> int:
        return self.B.shape[1]

    def refresh_pinv(self):
        """Recompute B+; must be called after every update of B."""
        s = np.linalg.svd(self.B, compute_uv=False)
        smin = s.min()
        self.cond = np.inf if smin == 0 else s.max() / smin
        self.B_pinv = np.linalg.pinv(self.B)

    def observe(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z) @ self.B.T

    def invert(self, x: np.ndarray) -> np.ndarray:
        if self.cond > MAX_COND:
            raise ConditioningError(
                f"observation matrix ill-conditioned (cond={self.cond:.3g})",
                cond=self.cond)
        return np.asarray(x) @ self.B_pinv.T


def observe(obs: ObservationModel, z: np.ndarray) -> np.ndarray:
    return obs.observe(z)


def invert_observation(obs: ObservationModel, x: np.ndarray) -> np.ndarray:
    return obs.invert(x)


def step(params: ShPLRNNParams, z: np.ndarray) -> np.ndarray:
    """One-step map; z may be a single state (M,) or a batch (..., M)."""
    z = np.asarray(z, dtype=np.float64)
    u = z @ params.W2.T + params.h2
    psi = np.maximum(0.0, u)
    if params.clipped:
        psi = psi - np.maximum(0.0, z @ params.W2.T)
    out = z * params.A + psi @ params.W1.T + params.h1
    if not np.all(np.isfinite(out)):
        bad = int(np.flatnonzero(~np.isfinite(np.atleast_2d(out)).all(axis=0))[0])
        raise NumericError(f"non-finite state produced at unit {bad}")
    return out


@dataclass
class JacobianMatrix:
    """Exact one-step Jacobian together with its ReLU region signature.

    For the unclipped map, J = diag(A) + W1 diag(signature) W2 holds
    bit-for-bit. For the clipped map the effective gate is
    signature - clip_signature.
    """

    J: np.ndarray
    region_signature: np.ndarray          # (L,) in {0,1}
    clip_signature: np.ndarray | None = None  # (L,) in {0,1}, clipped only


def region_signature(params: ShPLRNNParams, z: np.ndarray) -> np.ndarray:
    """Indicator d_l = 1 iff (W2 z + h2)_l > 0 (strict; 0 on the boundary)."""
    return (np.asarray(z) @ params.W2.T + params.h2 > 0).astype(np.int8)


def jacobian(params: ShPLRNNParams, z: np.ndarray) -> JacobianMatrix:
    z = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ContractError("state must be finite")
    d1 = region_signature(params, z)
    if params.clipped:
        d0 = (z @ params.W2.T > 0).astype(np.int8)
        gate = (d1 - d0).astype(np.float64)
        J = np.diag(params.A) + params.W1 @ (gate[:, None] * params.W2)
        return JacobianMatrix(J, d1, d0)
    J = np.diag(params.A) + params.W1 @ (d1[:, None].astype(np.float64) * params.W2)
    return JacobianMatrix(J, d1)


def jacobians_at(params: ShPLRNNParams, states: np.ndarray) -> np.ndarray:
    """Jacobians at a (T, M) array of states, returned as (T, M, M)."""
    states = np.asarray(states, dtype=np.float64)
    U = states @ params.W2.T + params.h2
    gate = (U > 0).astype(np.float64)
    if params.clipped:
        gate = gate - (states @ params.W2.T > 0).astype(np.float64)
    # J_t = diag(A) + W1 diag(gate_t) W2
    Js = np.einsum("ml,tl,ln->tmn", params.W1, gate, params.W2)
    Js += np.diag(params.A)
    return Js


def dend_to_shallow(d: DendPLRNNParams) -> ShPLRNNParams:
    """Rewrite a basis-expanded PLRNN as a shallow one with L = M*B."""
    M, B = d.M, d.B
    W1 = np.hstack([a_b * d.W for a_b, _ in d.bases])          # (M, M*B)
    W2 = np.vstack([np.eye(M)] * B)                            # (M*B, M)
    h2 = -np.concatenate([h_b for _, h_b in d.bases])          # (M*B,)
    return ShPLRNNParams(d.A.copy(), W1, W2, d.h0.copy(), h2, clipped=False)


def shallow_to_dend_form(p: ShPLRNNParams, signature: np.ndarray):
    """Region-wise affine representation (W_sig, offset) for one signature.

    Within the linear region selected by the signature the unclipped map
    reads z' = W_sig z + offset.
    """
    if p.clipped:
        raise ContractError("affine region form is defined for the unclipped map")
    sig = np.asarray(signature, dtype=np.float64)
    if sig.shape != (p.L,):
        raise ContractError("signature must have length L")
    W_sig = np.diag(p.A) + p.W1 @ (sig[:, None] * p.W2)
    offset = p.W1 @ (sig * p.h2) + p.h1
    return W_sig, offset


@dataclass
class FixedPoint:
    z: np.ndarray
    region_signature: np.ndarray
    eigenvalues: np.ndarray
    stable: bool
    degenerate: bool = False


def _candidate_signatures(params: ShPLRNNParams, search_budget: int,
                          rng: np.random.Generator):
    """Region signatures to probe: exhaustive for small L, sampled otherwise."""
    L = params.L
    if L <= 20 and 2 ** L <= max(search_budget, 2 ** min(L, 20)):
        for bits in itertools.product((0, 1), repeat=L):
            yield np.array(bits, dtype=np.int8)
        return
    seen = set()
    # signatures visited by free-running orbits from random states
    n_orbits = max(1, search_budget // 200)
    for _ in range(n_orbits):
        z = rng.standard_normal(params.M)
        for _ in range(200):
            sig = tuple(region_signature(params, z))
            if sig not in seen:
                seen.add(sig)
                yield np.array(sig, dtype=np.int8)
            try:
                z = step(params, z)
            except NumericError:
                break
            if np.linalg.norm(z) > DIVERGENCE_NORM:
                break
    # random probes up to the budget
    while len(seen) < search_budget:
        sig = tuple(rng.integers(0, 2, size=L, dtype=np.int8))
        if sig not in seen:
            seen.add(sig)
            yield np.array(sig, dtype=np.int8)


def _signature_consistent(params: ShPLRNNParams, z: np.ndarray,
                          sig: np.ndarray) -> bool:
    u = params.W2 @ z + params.h2
    return bool(np.all((u > 0) == (sig == 1)))


def find_fixed_points(params: ShPLRNNParams, search_budget: int = 10_000,
                      seed: int = 0) -> list[FixedPoint]:
    """Solve z* = W_sig z* + offset per candidate region.

    A solution is accepted only if its own signature reproduces the
    candidate. Regions where I - W_sig is singular are reported as
    degenerate entries (z = None is never returned; the region is
    flagged instead of raising).
    """
    if params.clipped:
        raise ContractError("fixed-point solver requires the unclipped map")
    rng = np.random.default_rng(seed)
    out, seen = [], []
    I = np.eye(params.M)
    for sig in _candidate_signatures(params, search_budget, rng):
        W_sig, offset = shallow_to_dend_form(params, sig)
        A_lin = I - W_sig
        if abs(np.linalg.det(A_lin)) < 1e-12:
            out.append(FixedPoint(np.full(params.M, np.nan), sig,
                                  np.linalg.eigvals(W_sig), False,
                                  degenerate=True))
            continue
        z_star = np.linalg.solve(A_lin, offset)
        if not _signature_consistent(params, z_star, sig):
            continue
        if any(np.allclose(z_star, z0, atol=1e-9) for z0 in seen):
            continue
        seen.append(z_star)
        ev = np.linalg.eigvals(W_sig)
        out.append(FixedPoint(z_star, sig, ev, bool(np.max(np.abs(ev)) < 1.0)))
    return out


@dataclass
class PeriodicOrbit:
    states: np.ndarray        # (n, M)
    signatures: np.ndarray    # (n, L)
    eigenvalues: np.ndarray   # of the composed linear map
    stable: bool


def _signature_sequences(params: ShPLRNNParams, n: int, search_budget: int,
                         rng: np.random.Generator):
    L = params.L
    if 2 ** (L * n) <= search_budget:
        for bits in itertools.product((0, 1), repeat=L * n):
            yield np.array(bits, dtype=np.int8).reshape(n, L)
        return
    seen = set()
    n_orbits = max(1, search_budget // 100)
    for _ in range(n_orbits):
        z = rng.standard_normal(params.M) * rng.uniform(0.1, 5.0)
        sigs = []
        for _ in range(100 + n):
            sigs.append(tuple(region_signature(params, z)))
            if len(sigs) >= n:
                key = tuple(sigs[-n:])
                if key not in seen:
                    seen.add(key)
                    yield np.array(key, dtype=np.int8)
            try:
                z = step(params, z)
            except NumericError:
                break
            if np.linalg.norm(z) > DIVERGENCE_NORM:
                break
    while len(seen) < search_budget:
        key = tuple(tuple(rng.integers(0, 2, size=L, dtype=np.int8))
                    for _ in range(n))
        if key not in seen:
            seen.add(key)
            yield np.array(key, dtype=np.int8)


def _verify_cycle(params: ShPLRNNParams, z0: np.ndarray, n: int,
                  tol: float = 1e-8):
    """Roll the actual map; return the orbit if it closes with period n."""
    orbit = [np.asarray(z0, dtype=np.float64)]
    z = orbit[0]
    for _ in range(n):
        z = step(params, z)
        orbit.append(z)
    if np.linalg.norm(orbit[-1] - orbit[0]) > tol:
        return None
    states = np.array(orbit[:n])
    # reject lower-period orbits (including fixed points)
    for d in range(1, n):
        if n % d == 0 and np.linalg.norm(states[d % n] - states[0]) < tol \
                and all(np.linalg.norm(states[(i + d) % n] - states[i]) < tol
                        for i in range(n)):
            return None
    return states


def find_cycles(params: ShPLRNNParams, n: int, search_budget: int = 10_000,
                seed: int = 0) -> list[PeriodicOrbit]:
    """Periodic orbits of period n via composed region-wise affine maps."""
    if n == 1:
        return [PeriodicOrbit(fp.z[None, :], fp.region_signature[None, :],
                              fp.eigenvalues, fp.stable)
                for fp in find_fixed_points(params, search_budget, seed)
                if not fp.degenerate]
    if n < 1:
        raise ContractError("period must be >= 1")
    if params.clipped:
        raise ContractError("cycle solver requires the unclipped map")
    rng = np.random.default_rng(seed)
    out, reps = [], []
    I = np.eye(params.M)
    for sig_seq in _signature_sequences(params, n, search_budget, rng):
        # compose z -> P z + q over the signature sequence
        P, q = I, np.zeros(params.M)
        for sig in sig_seq:
            W_sig, offset = shallow_to_dend_form(params, sig)
            P = W_sig @ P
            q = W_sig @ q + offset
        A_lin = I - P
        candidates = []
        if abs(np.linalg.det(A_lin)) >= 1e-10:
            candidates.append(np.linalg.solve(A_lin, q))
        else:
            # marginal case: a continuum of periodic points may exist;
            # probe the least-squares solution shifted along null directions
            z_p = np.linalg.lstsq(A_lin, q, rcond=None)[0]
            _, s, Vt = np.linalg.svd(A_lin)
            null = Vt[s < 1e-10 * max(1.0, s.max(initial=1.0))]
            candidates.append(z_p)
            for v in null:
                candidates.extend([z_p + v, z_p - v, z_p + 0.5 * v])
        for z0 in candidates:
            states = _verify_cycle(params, z0, n, tol=1e-8)
            if states is None:
                continue
            if any(np.min(np.linalg.norm(states - r[0], axis=1)) < 1e-8
                   for r in reps if r.shape == states.shape):
                continue
            sigs = np.array([region_signature(params, s) for s in states])
            ev = np.linalg.eigvals(P)
            out.append(PeriodicOrbit(states, sigs, ev,
                                     bool(np.max(np.abs(ev)) < 1.0)))
            reps.append(states)
    return out


def free_run(params: ShPLRNNParams, obs: ObservationModel | None,
             z0: np.ndarray, steps: int,
             return_latent: bool = False) -> np.ndarray:
    """Autonomous rollout of the latent map, mapped through the readout.

    Returns (steps, N) observations including the image of z0 at row 0.
    """
    if steps < 1:
        raise ContractError("steps must be >= 1")
    z = np.asarray(z0, dtype=np.float64).copy()
    Z = np.empty((steps, params.M))
    for t in range(steps):
        Z[t] = z
        if t == steps - 1:
            break
        z = step(params, z)
        if np.linalg.norm(z) > DIVERGENCE_NORM:
            raise DivergenceError(f"free run diverged at step {t + 1}", step=t + 1)
    if return_latent or obs is None:
        return Z
    return obs.observe(Z)


def init_params(M: int, L: int, clipped: bool = False,
                seed: int = 0) -> ShPLRNNParams:
    """Near-identity initialization: the latent map starts close to z' = z.

    Flow-map targets sampled at small dt are themselves near-identity, so
    starting A close to 1 with a weak nonlinear branch keeps early-training
    Jacobian products (and hence BPTT gradients) tame.
    """
    rng = np.random.default_rng(seed)
    A = rng.uniform(0.98, 0.999, size=M)
    W1 = rng.normal(0.0, 0.1 / np.sqrt(L), size=(M, L))
    W2 = rng.normal(0.0, 1.0 / np.sqrt(M), size=(L, M))
    return ShPLRNNParams(A, W1, W2, np.zeros(M), np.zeros(L), clipped=clipped)


def init_observation(N: int, M: int, trainable: bool | None = None) -> ObservationModel:
    """Identity readout when N == M, otherwise identity padded with zeros."""
    if N == M:
        return ObservationModel.identity(N) if not trainable else \
            ObservationModel(np.eye(N), trainable=True)
    B = np.zeros((N, M))
    for i in range(min(N, M)):
        B[i, i] = 1.0
    return ObservationModel(B, trainable=True if trainable is None else trainable)


CHECKPOINT_MAGIC = b"SHPL"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: ShPLRNNParams, obs: ObservationModel,
                    manifest: dict | None = None):
    """Binary checkpoint plus a sidecar text manifest at <path>.manifest."""
    import struct

    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<HIIIB", CHECKPOINT_VERSION, params.M, params.L,
                            obs.N, 1 if params.clipped else 0))
        for arr in (params.A, params.W1, params.W2, params.h1, params.h2, obs.B):
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    lines = [f"{k} = {v}" for k, v in (manifest or {}).items()]
    with open(str(path) + ".manifest", "w") as f:
        f.write("\n".join(lines) + ("\n" if lines else ""))


def load_checkpoint(path):
    import struct

    from .errors import FormatError

    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError("not a model checkpoint (bad magic)")
    version, M, L, N, clipped = struct.unpack_from("<HIIIB", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    off = 4 + struct.calcsize("<HIIIB")
    sizes = [M, M * L, L * M, M, L, N * M]
    need = off + 8 * sum(sizes)
    if len(blob) != need:
        raise FormatError(f"checkpoint truncated: {len(blob)} != {need} bytes")
    arrs = []
    for n in sizes:
        arrs.append(np.frombuffer(blob, dtype="<f8", count=n, offset=off).copy())
        off += 8 * n
    A, W1, W2, h1, h2, B = arrs
    params = ShPLRNNParams(A, W1.reshape(M, L), W2.reshape(L, M), h1, h2,
                           clipped=bool(clipped))
    B = B.reshape(N, M)
    identity = N == M and np.array_equal(B, np.eye(N))
    obs = ObservationModel(B, trainable=not identity, identity_mode=identity)
    manifest = {}
    try:
        with open(str(path) + ".manifest") as f:
            for line in f:
                if "=" in line:
                    k, _, v = line.partition("=")
                    manifest[k.strip()] = v.strip()
    except OSError:
        pass
    return params, obs, manifest
