"""Linear-transform noise: a B x B quality matrix mixing one layer's batch features.

The transform acts on the batch axis only, so for features ``X[B, T, D]`` the
effective map on the stacked vector is ``Q kron I_{T*D}``. Its log-Jacobian,
``T * D * log|det Q|``, is the exact change in differential entropy of any
continuous batch distribution pushed through it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from nvt.errors import ConfigError, DimensionError, EstimationError
from nvt.tensor import Tensor, lu_logdet, matmul, reshape

KINDS = ("identity", "cyclic_mix", "cyclic_shift_add", "custom")


@dataclass(frozen=True)
class NoiseConfig:
    """Which encoder layer receives noise and which Q family realizes it.

    ``layer_index`` may be ``None`` at construction, meaning "draw it once from
    ``selection_seed`` at setup"; call :meth:`resolve` before use.
    """

    kind: str
    layer_index: int | None = None
    alpha: float | None = None
    custom: tuple[tuple[float, ...], ...] | None = None
    selection_seed: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown kind {self.kind!r}; expected one of {KINDS}", "noise.kind")
        if self.kind in ("cyclic_mix", "cyclic_shift_add"):
            if self.alpha is None:
                raise ConfigError(f"{self.kind} requires an explicit alpha", "noise.alpha")
            if not math.isfinite(self.alpha):
                raise ConfigError("alpha must be finite", "noise.alpha")
        if self.kind == "custom":
            if self.custom is None:
                raise ConfigError("custom kind requires a matrix", "noise.custom")
            m = np.asarray(self.custom, dtype=float)
            if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[0] < 1:
                raise ConfigError(f"custom matrix must be square, got shape {m.shape}", "noise.custom")
            object.__setattr__(self, "custom", tuple(tuple(float(v) for v in row) for row in m))
        if self.layer_index is not None and self.layer_index < 0:
            raise ConfigError("layer_index must be >= 0", "noise.layer_index")

    def resolve(self, depth: int) -> "NoiseConfig":
        """Fix the layer index for a model of ``depth`` layers.

        An unset index is drawn from ``selection_seed`` when given, otherwise
        it defaults to the last layer.
        """
        if self.layer_index is not None:
            if self.layer_index >= depth:
                raise ConfigError(f"layer_index {self.layer_index} >= depth {depth}", "noise.layer_index")
            return self
        if self.selection_seed is not None:
            idx = int(np.random.default_rng(self.selection_seed).integers(depth))
        else:
            idx = depth - 1
        return NoiseConfig(self.kind, idx, self.alpha, self.custom, self.selection_seed)

    def coefficients(self) -> tuple[float, float]:
        """(diagonal, cyclic off-diagonal) weights for the built-in circulant kinds."""
        if self.kind == "identity":
            return 1.0, 0.0
        if self.kind == "cyclic_mix":
            return 1.0 - self.alpha, self.alpha
        if self.kind == "cyclic_shift_add":
            return 1.0, self.alpha
        raise ConfigError("custom matrices have no circulant coefficients", "noise.kind")

    def to_json(self) -> dict[str, Any]:
        out: dict[str, Any] = {"layer_index": self.layer_index, "kind": self.kind}
        if self.alpha is not None:
            out["alpha"] = self.alpha
        if self.custom is not None:
            out["custom"] = [list(r) for r in self.custom]
        if self.selection_seed is not None:
            out["selection_seed"] = self.selection_seed
        return out

    @classmethod
    def from_json(cls, obj: dict[str, Any] | None) -> "NoiseConfig | None":
        if obj is None:
            return None
        allowed = {"layer_index", "kind", "alpha", "custom", "selection_seed"}
        extra = set(obj) - allowed
        if extra:
            raise ConfigError(f"unknown keys {sorted(extra)}", "noise")
        if "kind" not in obj:
            raise ConfigError("missing", "noise.kind")
        custom = obj.get("custom")
        return cls(
            kind=obj["kind"],
            layer_index=obj.get("layer_index"),
            alpha=None if obj.get("alpha") is None else float(obj["alpha"]),
            custom=None if custom is None else tuple(tuple(r) for r in custom),
            selection_seed=obj.get("selection_seed"),
        )


@dataclass(frozen=True)
class QualityMatrix:
    kind: str
    realized: np.ndarray = field(repr=False)

    @property
    def batch_size(self) -> int:
        return self.realized.shape[0]


def cyclic_permutation(batch_size: int) -> np.ndarray:
    """P with row b selecting row (b + 1) mod B."""
    p = np.zeros((batch_size, batch_size))
    p[np.arange(batch_size), (np.arange(batch_size) + 1) % batch_size] = 1.0
    return p


def build_quality_matrix(noise: NoiseConfig, batch_size: int) -> QualityMatrix:
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    if noise.kind == "custom":
        m = np.array(noise.custom, dtype=np.float64)
        if m.shape != (batch_size, batch_size):
            raise ConfigError(
                f"custom Q is {m.shape[0]}x{m.shape[1]} but the batch has {batch_size} samples",
                "noise.custom",
            )
        return QualityMatrix(noise.kind, m)
    if noise.kind == "identity":
        return QualityMatrix(noise.kind, np.eye(batch_size))
    c0, c1 = noise.coefficients()
    q = c0 * np.eye(batch_size) + c1 * cyclic_permutation(batch_size)
    return QualityMatrix(noise.kind, q)


def inject(features: Tensor, q: QualityMatrix) -> Tensor:
    """out[b] = sum_j Q[b, j] * features[j], differentiable in ``features``."""
    if features.ndim < 1 or features.shape[0] != q.batch_size:
        raise DimensionError(
            f"Q realized for batch {q.batch_size} but features have shape {features.shape}"
        )
    if q.kind == "identity":
        return features
    b = features.shape[0]
    flat = reshape(features, (b, -1))
    return reshape(matmul(Tensor(q.realized), flat), features.shape)


@dataclass
class EntropyReport:
    sign: int
    log_abs_det_q: float
    effective_log_det: float
    singular: bool
    tokens: int
    channels: int
    empirical_delta: float | None = None
    std_error: float | None = None
    sample_count: int = 0

    def to_json(self) -> dict[str, Any]:
        def num(x):
            if x is None:
                return None
            return x if math.isfinite(x) else ("-inf" if x < 0 else "inf")

        return {
            "sign": self.sign,
            "log_abs_det_q": num(self.log_abs_det_q),
            "delta_h": num(self.effective_log_det),
            "singular": self.singular,
            "tokens": self.tokens,
            "channels": self.channels,
            "empirical_delta": num(self.empirical_delta),
            "std_error": num(self.std_error),
            "sample_count": self.sample_count,
        }


def entropy_delta_exact(q: QualityMatrix, tokens: int, channels: int) -> EntropyReport:
    sign, logabs = lu_logdet(q.realized)
    singular = sign == 0
    eff = -math.inf if singular else tokens * channels * logabs
    return EntropyReport(sign, logabs, eff, singular, tokens, channels)


def gaussian_entropy(samples: np.ndarray) -> float:
    """0.5 * ln det(2 pi e Sigma_hat) for rows of ``samples`` (n x p)."""
    n, p = samples.shape
    cov = np.cov(samples, rowvar=False).reshape(p, p)
    sign, logabs = lu_logdet(cov)
    if sign <= 0:
        rank = int(np.linalg.matrix_rank(cov))
        raise EstimationError(f"sample covariance is rank {rank} < {p}", rank=rank)
    return 0.5 * (p * math.log(2 * math.pi * math.e) + logabs)


def entropy_delta_empirical(
    q: QualityMatrix, tokens: int, channels: int, trials: int = 100_000, seed: int = 0
) -> EntropyReport:
    """Estimate the entropy change of standard-normal batches under injection.

    Each trial is one batch flattened to a vector of length ``B*T*D``; the
    Gaussian entropy of the sample covariance is compared before and after.
    The standard error comes from ten disjoint chunks of the trials.
    """
    if trials < 1000:
        raise EstimationError(f"need at least 1000 trials, got {trials}")
    b = q.batch_size
    td = tokens * channels
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((trials, b, tokens, channels))
    # batch-major layout so one inject call transforms every trial at once
    batched = Tensor(np.ascontiguousarray(x.transpose(1, 0, 2, 3)).reshape(b, trials * tokens, channels))
    y = inject(batched, q).data.reshape(b, trials, tokens, channels).transpose(1, 0, 2, 3)
    before = x.reshape(trials, b * td)
    after = y.reshape(trials, b * td)
    delta = gaussian_entropy(after) - gaussian_entropy(before)

    chunks = 10
    size = trials // chunks
    parts = [
        gaussian_entropy(after[i * size:(i + 1) * size]) - gaussian_entropy(before[i * size:(i + 1) * size])
        for i in range(chunks)
    ]
    se = float(np.std(parts, ddof=1) / math.sqrt(chunks))

    report = entropy_delta_exact(q, tokens, channels)
    report.empirical_delta = delta
    report.std_error = se
    report.sample_count = trials
    return report
