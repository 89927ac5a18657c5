"""Euler-Maruyama simulation of the forward flow with counter-based randomness.

Every Brownian increment is a pure function of ``(seed, j, m, i, component)``:
the Philox key is ``(seed, j)`` and path ``m`` owns a fixed counter window, so
the split of paths between workers never changes a single draw.
"""

from __future__ import annotations

import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

MAGIC = b"MBSDEPB1"
_HEADER = struct.Struct("<8sqqqqQ")


class SimulationError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TimeGrid:
    knots: np.ndarray

    def __post_init__(self):
        knots = np.asarray(self.knots, dtype=float)
        if knots.ndim != 1 or knots.size < 2:
            raise ValueError("time grid needs at least two knots")
        if not np.all(np.diff(knots) > 0):
            raise ValueError("time knots must be strictly increasing")
        knots.setflags(write=False)
        object.__setattr__(self, "knots", knots)

    @classmethod
    def uniform(cls, T, N, t0=0.0):
        return cls(np.linspace(t0, T, int(N) + 1))

    @property
    def steps(self):
        return np.diff(self.knots)

    @property
    def N(self):
        return self.knots.size - 1

    @property
    def t0(self):
        return float(self.knots[0])

    @property
    def T(self):
        return float(self.knots[-1])

    def check_implicit(self, mu):
        """Raise unless ``max(dt) * max(mu, 0) < 1``."""
        if self.steps.max() * max(mu, 0.0) >= 1.0:
            raise ValueError(
                f"time step {self.steps.max():g} too large for monotonicity constant {mu:g}: "
                "need dt * max(mu, 0) < 1"
            )


@dataclass(frozen=True)
class PathBundle:
    """Simulated paths ``X[j, m, i, :]`` and increments ``dB[j, m, i, :]``."""

    points: np.ndarray
    X: np.ndarray
    dB: np.ndarray
    grid: TimeGrid
    seed: int

    @property
    def J(self):
        return self.X.shape[0]

    @property
    def M(self):
        return self.X.shape[1]

    @property
    def N(self):
        return self.grid.N

    @property
    def d(self):
        return self.X.shape[3]

    def dump(self, path):
        """Write the bundle in the flat little-endian binary format."""
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(MAGIC, self.d, self.J, self.M, self.N, self.seed & (2**64 - 1)))
            for arr in (self.grid.knots, self.points, self.X, self.dB):
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            raw = fh.read()
        magic, d, J, M, N, seed = _HEADER.unpack_from(raw)
        if magic != MAGIC:
            raise ValueError(f"{path}: not a path bundle file")
        data = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
        sizes = [N + 1, J * d, J * M * (N + 1) * d, J * M * N * d]
        if data.size != sum(sizes):
            raise ValueError(f"{path}: truncated bundle file")
        parts = np.split(data, np.cumsum(sizes)[:-1])
        return cls(
            points=parts[1].reshape(J, d).astype(float),
            X=parts[2].reshape(J, M, N + 1, d).astype(float),
            dB=parts[3].reshape(J, M, N, d).astype(float),
            grid=TimeGrid(parts[0].astype(float)),
            seed=int(seed),
        )


def _philox_key(seed, j):
    return (int(seed) & (2**64 - 1)) | (int(j) << 64)


def standard_normals(seed, j, start, stop, per_path):
    """Standard normals for paths ``start:stop`` of point ``j``.

    Returns shape ``(stop - start, per_path)``. Each normal consumes one
    64-bit word (inverse-CDF transform), and each path owns
    ``ceil(per_path / 4)`` Philox counter blocks.
    """
    blocks = -(-per_path // 4)
    gen = np.random.Philox(key=_philox_key(seed, j), counter=start * blocks)
    raw = gen.random_raw((stop - start) * blocks * 4).reshape(stop - start, blocks * 4)
    u = ((raw[:, :per_path] >> np.uint64(11)).astype(float) + 0.5) * 2.0**-53
    return ndtri(u)


def _chunks(M, workers):
    size = -(-M // max(1, workers))
    return [(a, min(M, a + size)) for a in range(0, M, size)]


def simulate_bundle(diffusion, grid, initial_points, M, seed, workers=1):
    """Simulate ``M`` Euler-Maruyama paths from every initial point.

    ``X[j, m, i+1] = X[j, m, i] + b(t_i, X) dt_i + sigma(t_i, X) dB[j, m, i]``.
    """
    if M < 1:
        raise ValueError("M must be at least 1")
    d = diffusion.dimension
    points = np.atleast_2d(np.asarray(initial_points, dtype=float))
    if points.shape[1] != d:
        points = points.reshape(-1, d)
    J, N = points.shape[0], grid.N
    dt = grid.steps
    X = np.empty((J, M, N + 1, d))
    dB = np.empty((J, M, N, d))

    def draw(j, a, b):
        z = standard_normals(seed, j, a, b, N * d).reshape(b - a, N, d)
        dB[j, a:b] = z * np.sqrt(dt)[None, :, None]

    jobs = [(j, a, b) for j in range(J) for a, b in _chunks(M, workers)]
    if workers <= 1:
        for job in jobs:
            draw(*job)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for fut in [pool.submit(draw, *job) for job in jobs]:
                fut.result()

    # all paths advance together, so the arithmetic does not depend on workers
    x = np.repeat(points, M, axis=0)
    flat_dB = dB.reshape(J * M, N, d)
    X[:, :, 0] = points[:, None, :]
    for i in range(N):
        t = grid.knots[i]
        x = x + diffusion.b(t, x) * dt[i] + np.einsum("pkl,pl->pk", diffusion.sigma(t, x), flat_dB[:, i])
        bad = ~np.all(np.isfinite(x), axis=1)
        if bad.any():
            j, m = divmod(int(np.argmax(bad)), M)
            raise SimulationError(f"non-finite state at (j={j}, m={m}, i={i + 1})")
        X[:, :, i + 1] = x.reshape(J, M, d)
    return PathBundle(points=points, X=X, dB=dB, grid=grid, seed=int(seed))


def brownian_mean_bound(d, dt, n_paths):
    """Five-sigma bound on the norm of the sample mean of the increments."""
    return 5.0 * math.sqrt(d * dt / n_paths)
