"""Multiplier bootstrap for max-type statistics over an influence matrix.

Every bootstrap replication ``b`` draws its multipliers from its own RNG
substream keyed by ``(seed, b)``, so the bootstrap law is identical whatever
the number of worker threads.
"""

from __future__ import annotations

import itertools
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np

SCHEMES = ("gaussian", "rademacher", "mammen", "multinomial")
CHUNK = 64
MAX_ENUMERATION = 12

# substream tags keep independent uses of one seed apart
TAG_BOOTSTRAP = 0
TAG_SIMULATION = 1

_SQRT5 = math.sqrt(5.0)
MAMMEN_LOW = (1.0 - _SQRT5) / 2.0
MAMMEN_HIGH = (1.0 + _SQRT5) / 2.0
MAMMEN_P_LOW = (_SQRT5 + 1.0) / (2.0 * _SQRT5)


def substream(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator determined by ``seed`` and integer ``keys``."""
    ss = np.random.SeedSequence(int(seed) % 2**64, spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.PCG64(ss))


@dataclass(frozen=True)
class BootstrapConfig:
    B: int = 1000
    scheme: str = "gaussian"
    alpha: float = 0.05
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if int(self.B) < 1:
            raise ValueError(f"B must be at least 1, got {self.B}")
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown bootstrap scheme {self.scheme!r}; choose from {SCHEMES}")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        if int(self.threads) < 1:
            raise ValueError("threads must be positive")

    def echo(self) -> dict:
        """Configuration fields that determine the result (threads excluded)."""
        out = asdict(self)
        out.pop("threads")
        return out


@dataclass(frozen=True, eq=False)
class InfluenceMatrix:
    """Studentized influence contributions ``psi_hat`` (b_eff x q).

    ``raw_stats`` are the studentized moment sums whose largest absolute value
    is the test statistic.
    """

    psi_hat: np.ndarray
    sigma_hat: np.ndarray
    raw_stats: np.ndarray
    labels: tuple[str, ...]
    dropped: tuple[str, ...] = ()
    group_labels: tuple[str, ...] = ()

    def __post_init__(self):
        psi = np.asarray(self.psi_hat, dtype=float)
        if psi.ndim != 2:
            raise ValueError("psi_hat must be a matrix")
        b, q = psi.shape
        if q < 1:
            raise ValueError("influence matrix needs at least one moment")
        if b < 2:
            raise ValueError("influence matrix needs at least two effective observations")
        if not np.all(np.isfinite(psi)):
            raise ValueError("psi_hat has non-finite entries")
        if np.any(np.asarray(self.sigma_hat) <= 0):
            raise ValueError("sigma_hat must be strictly positive")
        if len(self.labels) != q or np.shape(self.raw_stats) != (q,):
            raise ValueError("labels and raw_stats must have one entry per moment")

    @property
    def b_eff(self) -> int:
        return self.psi_hat.shape[0]

    @property
    def q(self) -> int:
        return self.psi_hat.shape[1]


@dataclass
class TestResult:
    """Outcome of a max-statistic overidentification test."""

    T_n: float
    c_hat: float
    p_value: float
    reject: bool
    per_moment: list[tuple[str, float]]
    config: dict
    timing: dict = field(default_factory=dict)
    details: dict = field(default_factory=dict)
    T_star: np.ndarray | None = field(default=None, repr=False)

    __test__ = False  # not a pytest class

    def reject_at(self, alpha: float) -> bool:
        """Decision at another level using the same bootstrap draws."""
        if self.T_star is None:
            raise ValueError("bootstrap draws were not retained")
        return critical_value_and_pvalue(self.T_n, self.T_star, alpha)[2]

    def to_dict(self) -> dict[str, Any]:
        return {
            "statistic": self.T_n,
            "critical_value": self.c_hat,
            "p_value": self.p_value,
            "reject": self.reject,
            "moments": [{"label": k, "studentized_sum": v} for k, v in self.per_moment],
            "details": self.details,
            "config": self.config,
        }


def draw_weights(scheme: str, b_eff: int, rng: np.random.Generator) -> np.ndarray:
    """I.i.d. bootstrap multipliers of length ``b_eff``."""
    if scheme == "gaussian":
        return rng.standard_normal(b_eff)
    if scheme == "rademacher":
        return rng.integers(0, 2, size=b_eff) * 2.0 - 1.0
    if scheme == "mammen":
        return np.where(rng.random(b_eff) < MAMMEN_P_LOW, MAMMEN_LOW, MAMMEN_HIGH)
    if scheme == "multinomial":
        return rng.multinomial(b_eff, np.full(b_eff, 1.0 / b_eff)).astype(float)
    raise ValueError(f"unknown bootstrap scheme {scheme!r}")


def _centered(psi_hat):
    psi = np.asarray(psi_hat, dtype=float)
    return psi - psi.mean(axis=0)


def bootstrap_max_stat(psi_hat, omega) -> float | np.ndarray:
    """``max_j |sum_i omega_i (psi_ij - mean_j psi)|``.

    ``omega`` may be a vector (one replication) or a ``(k, b_eff)`` matrix of
    replications, in which case a length-``k`` array is returned.
    """
    psi = _centered(psi_hat)
    omega = np.asarray(omega, dtype=float)
    if omega.shape[-1] != psi.shape[0]:
        raise ValueError(f"omega has {omega.shape[-1]} entries for {psi.shape[0]} rows of psi")
    if omega.ndim == 1:
        return float(np.max(np.abs(np.einsum("i,ij->j", omega, psi))))
    return np.max(np.abs(np.einsum("ki,ij->kj", omega, psi)), axis=1)


def rademacher_enumeration(b_eff: int) -> np.ndarray:
    """All ``2**b_eff`` sign vectors in lexicographic order (``-1`` before ``+1``)."""
    return np.array(list(itertools.product((-1.0, 1.0), repeat=b_eff)))


def _chunk_stats(psi_c, config, start, stop):
    omega = np.stack([
        draw_weights(config.scheme, psi_c.shape[0], substream(config.seed, TAG_BOOTSTRAP, b))
        for b in range(start, stop)
    ])
    return np.max(np.abs(np.einsum("ki,ij->kj", omega, psi_c)), axis=1)


def bootstrap_distribution(psi_hat, config: BootstrapConfig) -> np.ndarray:
    """Bootstrap draws ``T*_1..T*_B`` of the max statistic.

    With Rademacher weights and ``B == 2**b_eff`` (``b_eff <= 12``) the
    multipliers are the complete set of sign vectors, so the empirical
    bootstrap law is exactly the enumeration law.
    """
    psi_c = _centered(psi_hat)
    b_eff = psi_c.shape[0]
    B = int(config.B)
    if config.scheme == "rademacher" and b_eff <= MAX_ENUMERATION and B == 2**b_eff:
        return np.max(np.abs(np.einsum("ki,ij->kj", rademacher_enumeration(b_eff), psi_c)), axis=1)
    bounds = [(s, min(s + CHUNK, B)) for s in range(0, B, CHUNK)]
    if config.threads == 1 or len(bounds) == 1:
        parts = [_chunk_stats(psi_c, config, s, e) for s, e in bounds]
    else:
        with ThreadPoolExecutor(max_workers=int(config.threads)) as pool:
            parts = list(pool.map(lambda se: _chunk_stats(psi_c, config, *se), bounds))
    return np.concatenate(parts)


def critical_value_and_pvalue(T_n: float, T_star, alpha: float):
    """Bootstrap critical value, p-value and decision.

    ``c_hat`` is the ``ceil((1 - alpha) B)``-th order statistic of ``T_star``;
    the p-value is ``(1 + #{T*_b >= T_n}) / (B + 1)``; reject iff
    ``T_n > c_hat``.
    """
    t = np.sort(np.asarray(T_star, dtype=float))
    B = t.size
    if B < 1:
        raise ValueError("need at least one bootstrap draw")
    # guard against (1 - alpha) * B landing a hair above an integer
    k = math.ceil(round((1.0 - alpha) * B, 9))
    k = min(max(k, 1), B)
    c_hat = float(t[k - 1])
    count = B - int(np.searchsorted(t, T_n, side="left"))
    p_value = (1.0 + count) / (B + 1.0)
    return c_hat, p_value, bool(T_n > c_hat)


def max_stat_test(influence: InfluenceMatrix, config: BootstrapConfig, details=None) -> TestResult:
    """Run the bootstrap on an influence matrix and assemble a :class:`TestResult`."""
    start = time.perf_counter()
    raw = np.asarray(influence.raw_stats, dtype=float)
    T_n = float(np.max(np.abs(raw)))
    T_star = bootstrap_distribution(influence.psi_hat, config)
    c_hat, p_value, reject = critical_value_and_pvalue(T_n, T_star, config.alpha)
    info = {"b_eff": influence.b_eff, "q": influence.q, "dropped_moments": list(influence.dropped),
            "degenerate": False}
    info.update(details or {})
    return TestResult(
        T_n=T_n,
        c_hat=c_hat,
        p_value=p_value,
        reject=reject,
        per_moment=list(zip(influence.labels, raw.tolist())),
        config={"bootstrap": config.echo()},
        timing={"bootstrap_seconds": time.perf_counter() - start},
        details=info,
        T_star=T_star,
    )


def degenerate_result(labels, config: BootstrapConfig, details=None) -> TestResult:
    """Result reported when every moment has zero variance (statistic 0)."""
    info = {"b_eff": None, "q": 0, "dropped_moments": list(labels), "degenerate": True}
    info.update(details or {})
    return TestResult(
        T_n=0.0,
        c_hat=0.0,
        p_value=1.0,
        reject=False,
        per_moment=[],
        config={"bootstrap": config.echo()},
        details=info,
        T_star=np.zeros(int(config.B)),
    )
