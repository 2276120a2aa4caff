"""Time-series ingestion, delay embedding, smoothing, and persistence.

CSV in, delay coordinates out; datasets round-trip through the same
binary container the benchmark generators write.
"""

from __future__ import annotations

import csv
import logging
import struct
from dataclasses import dataclass

import numpy as np

from .benchmarks import TrajectoryDataset
from .errors import ConfigError, ContractError, FormatError

log = logging.getLogger(__name__)

DATASET_MAGIC = b"DSDS"
DATASET_VERSION = 1


@dataclass(frozen=True)
class EmbeddingSpec:
    dimension: int
    delay: int

    def __post_init__(self):
        if self.dimension < 1 or self.delay < 1:
            raise ConfigError("embedding dimension and delay must be >= 1")

    def embedded_length(self, T: int) -> int:
        return T - (self.dimension - 1) * self.delay


def load_csv(path, dt: float = 1.0) -> TrajectoryDataset:
    """Parse a rectangular numeric CSV (optional single header row)."""
    rows = []
    names = None
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        width = None
        for lineno, row in enumerate(reader, start=1):
            if not row or all(c.strip() == "" for c in row):
                continue
            if width is None:
                width = len(row)
                try:
                    rows.append([float(c) for c in row])
                except ValueError:
                    names = [c.strip() for c in row]
                continue
            if len(row) != width:
                raise FormatError(
                    f"{path}: line {lineno}: expected {width} columns, "
                    f"got {len(row)}")
            try:
                rows.append([float(c) for c in row])
            except ValueError as exc:
                raise FormatError(f"{path}: line {lineno}: {exc}") from None
    if not rows:
        raise FormatError(f"{path}: no numeric data")
    data = np.asarray(rows, dtype=np.float64)
    source = f"csv:{path}"
    if names:
        source += ":" + ",".join(names)
    return TrajectoryDataset(
        data=data, dt=dt,
        per_dim_mean=data.mean(axis=0), per_dim_std=data.std(axis=0),
        source=source)


def _equiprobable_bin_ids(x: np.ndarray, bins: int) -> np.ndarray:
    edges = np.quantile(x, np.linspace(0, 1, bins + 1)[1:-1])
    return np.searchsorted(edges, x, side="right")


def mutual_information_delay(series: np.ndarray, max_lag: int,
                             bins: int = 16, return_curve: bool = False):
    """Delay at the first local minimum of the lagged mutual
    information (equiprobable binning); falls back to the global argmin
    with a warning when no interior minimum exists."""
    x = np.asarray(series, dtype=np.float64).ravel()
    T = len(x)
    if T < 10 * max_lag:
        raise ContractError("series too short for the requested max_lag")
    if np.ptp(x) == 0.0:
        raise ContractError("constant series has no informative delay")
    ids = _equiprobable_bin_ids(x, bins)
    mi = np.empty(max_lag)
    for tau in range(1, max_lag + 1):
        a, b = ids[:-tau], ids[tau:]
        joint = np.zeros((bins, bins))
        np.add.at(joint, (a, b), 1.0)
        joint /= joint.sum()
        pa = joint.sum(axis=1)
        pb = joint.sum(axis=0)
        nz = joint > 0
        mi[tau - 1] = np.sum(
            joint[nz] * np.log(joint[nz] / np.outer(pa, pb)[nz]))
    tau = None
    for i in range(1, max_lag - 1):
        if mi[i] < mi[i - 1] and mi[i] <= mi[i + 1]:
            tau = i + 1
            break
    if tau is None:
        tau = int(np.argmin(mi)) + 1
        log.warning("no interior mutual-information minimum up to lag %d; "
                    "using global argmin %d", max_lag, tau)
    return (tau, mi) if return_curve else tau


def delay_embed(series: np.ndarray, spec: EmbeddingSpec,
                dt: float = 1.0) -> TrajectoryDataset:
    """Uniform-delay embedding: row t = (x_t, x_{t+τ}, …, x_{t+(m−1)τ})."""
    x = np.asarray(series, dtype=np.float64).ravel()
    Te = spec.embedded_length(len(x))
    if Te <= 0:
        raise ConfigError(
            f"series of length {len(x)} too short for m={spec.dimension}, "
            f"tau={spec.delay}")
    cols = [x[k * spec.delay:k * spec.delay + Te]
            for k in range(spec.dimension)]
    data = np.stack(cols, axis=1)
    return TrajectoryDataset(
        data=data, dt=dt,
        per_dim_mean=data.mean(axis=0), per_dim_std=data.std(axis=0),
        source=f"embed:m={spec.dimension},tau={spec.delay}")


def gaussian_smooth(series: np.ndarray, sigma: float) -> np.ndarray:
    """Reflective-boundary convolution with a normalized Gaussian kernel
    of window length 8σ+1 (rounded up to odd)."""
    x = np.asarray(series, dtype=np.float64)
    window = int(round(8 * sigma + 1))
    if window % 2 == 0:
        window += 1
    if window > len(x):
        raise ContractError("smoothing window exceeds series length")
    half = window // 2
    t = np.arange(-half, half + 1)
    kernel = np.exp(-0.5 * (t / sigma) ** 2)
    kernel /= kernel.sum()
    if x.ndim == 1:
        padded = np.pad(x, half, mode="reflect")
        return np.convolve(padded, kernel, mode="valid")
    out = np.empty_like(x)
    for i in range(x.shape[1]):
        padded = np.pad(x[:, i], half, mode="reflect")
        out[:, i] = np.convolve(padded, kernel, mode="valid")
    return out


def save_dataset(ds: TrajectoryDataset, path) -> None:
    T, N = ds.data.shape
    prov = ds.source.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<HQQd", DATASET_VERSION, T, N, ds.dt))
        fh.write(np.ascontiguousarray(ds.data, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(ds.per_dim_mean, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(ds.per_dim_std, dtype="<f8").tobytes())
        fh.write(struct.pack("<I", len(prov)))
        fh.write(prov)


def load_dataset(path) -> TrajectoryDataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != DATASET_MAGIC:
        raise FormatError(f"{path}: not a dataset file (bad magic)")
    off = 4
    try:
        version, T, N, dt = struct.unpack_from("<HQQd", blob, off)
    except struct.error:
        raise FormatError(f"{path}: truncated header") from None
    if version != DATASET_VERSION:
        raise FormatError(
            f"{path}: unsupported dataset version {version} "
            f"(expected {DATASET_VERSION})")
    off += struct.calcsize("<HQQd")

    def take(count):
        nonlocal off
        nbytes = count * 8
        if off + nbytes > len(blob):
            raise FormatError(f"{path}: truncated data block")
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=off)
        off += nbytes
        return arr.astype(np.float64)

    data = take(T * N).reshape(T, N)
    mean = take(N)
    std = take(N)
    if off + 4 > len(blob):
        raise FormatError(f"{path}: truncated provenance block")
    (plen,) = struct.unpack_from("<I", blob, off)
    off += 4
    if off + plen > len(blob):
        raise FormatError(f"{path}: truncated provenance string")
    source = blob[off:off + plen].decode("utf-8")
    return TrajectoryDataset(data=data, dt=dt, per_dim_mean=mean,
                             per_dim_std=std, source=source)


def save_csv(data: np.ndarray, path, header=None) -> None:
    np.savetxt(path, np.asarray(data), delimiter=",",
               header=",".join(header) if header else "", comments="")
