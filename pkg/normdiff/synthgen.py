"""
Synthetic cohort generator (SYNTH).

Four structures A-D with nonlinear, heteroscedastic age trends. From the
mixture onset age on, each subject carries a latent subgroup sign g shared by
all four structures, giving an equal-weight two-component mixture. Structure D
is skew-normal with location/scale given by its mean/sd formulas.
"""

import math
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator
from scipy.special import expit

from normdiff.dataset import Cohort
from normdiff.errors import ContractError
from normdiff.utils import normdiff_logger, spawn_rngs

STRUCTURES: Tuple[str, ...] = ("A", "B", "C", "D")
CHUNK_SIZE = 10_000


class SynthConfig(BaseModel):
    """Parameters of the synthetic recipe."""

    n_samples: int = Field(default=47_000, ge=0)
    age_range: Tuple[float, float] = (45.0, 82.0)
    seed: int = 0
    mixture_onset_age: float = 65.0
    skew_shape: float = 7.0

    @model_validator(mode='after')
    def validate_ranges(self) -> 'SynthConfig':
        """Check the age range and that every sd formula stays positive on it."""
        lo, hi = self.age_range
        if not lo < hi:
            raise ValueError(f"age_range must satisfy min < max, got {self.age_range}")
        if not lo <= self.mixture_onset_age <= hi:
            raise ValueError(
                f"mixture_onset_age {self.mixture_onset_age} outside age_range {self.age_range}"
            )
        grid = np.arange(lo, hi + 1e-9, 0.1)
        for structure in STRUCTURES:
            for age in grid:
                sign = 1 if age >= self.mixture_onset_age else 0
                _, sigma = mean_sd(structure, float(age), sign, onset=self.mixture_onset_age)
                if sigma <= 0:
                    raise ValueError(f"sd of structure {structure} not positive at age {age:.1f}")
        return self


class SynthRecord(BaseModel):
    """One synthetic subject in native units."""

    age: float
    sex: int = Field(ge=0, le=1)
    subgroup: Optional[int] = None
    y: Tuple[float, float, float, float]

    @model_validator(mode='after')
    def validate_subgroup(self) -> 'SynthRecord':
        if self.subgroup is not None and self.subgroup not in (-1, 1):
            raise ValueError(f"subgroup must be -1 or +1, got {self.subgroup}")
        if not all(math.isfinite(v) for v in self.y):
            raise ValueError("y must be finite")
        return self


def _heaviside(x_shift: float) -> float:
    # H(0) = 1: the onset age belongs to the mixture regime
    return 1.0 if x_shift >= 0 else 0.0


def mean_sd(
    structure: str, age: float, subgroup_sign: int, onset: float = 65.0
) -> Tuple[float, float]:
    """
    Closed-form mean and sd of one structure at a given age.

    Args:
        structure: One of ``A``, ``B``, ``C``, ``D``.
        age: Age in years.
        subgroup_sign: -1 or +1 at or after the onset age, 0 before it.
        onset: Mixture onset age (65 in the reference recipe).

    Returns:
        ``(mu, sigma)`` in native units.

    Raises:
        ContractError: For an unknown structure or a sign inconsistent with the age.
    """
    if structure not in STRUCTURES:
        raise ContractError(f"Unknown structure '{structure}'")
    if subgroup_sign not in (-1, 0, 1):
        raise ContractError(f"subgroup_sign must be -1, 0 or +1, got {subgroup_sign}")
    x = float(age)
    X = x - onset
    H = _heaviside(X)
    if (H == 0.0) != (subgroup_sign == 0):
        raise ContractError(
            f"subgroup_sign {subgroup_sign} inconsistent with age {age} (onset {onset})"
        )
    sign = float(subgroup_sign)

    if structure == "A":
        s = expit(X / 10.0)
        mu = -70.0 * X * s + 20.0 * X + 7000.0 + sign * H * x * X / 5.0
        sigma = 5.0 * X * s + X + 300.0
    elif structure == "B":
        s = expit((x - 73.0) / 8.0)
        mu = -200.0 * (x - 15.0) * s + 45000.0 + sign * H * x * X
        sigma = 25.0 * (x - 15.0) * s + 4500.0
    elif structure == "C":
        s = expit((x - 73.0) / 8.0)
        mu = 7000.0 * math.exp(-0.04 * (x - 73.0)) + 25000.0 + sign * H * x * X
        sigma = 25.0 * (x - 15.0) * s + 4500.0
    else:
        mu = 7000.0 * math.exp(0.02 * (x - 50.0)) + 15000.0 + sign * H * x * X
        sigma = 7000.0 * math.exp(0.03 * (x - 75.0)) + 5000.0
    return float(mu), float(sigma)


def sample_skew_normal(
    loc: float, scale: float, shape: float, rng: np.random.Generator, size: Optional[int] = None
):
    """
    Draw skew-normal variates via the two-Gaussian representation.

    ``z = delta*|u0| + sqrt(1 - delta^2)*u1`` with ``delta = shape/sqrt(1 + shape^2)``,
    returned as ``loc + scale*z``. ``loc``/``scale`` may be arrays of length ``size``.

    Raises:
        ContractError: If any scale is not positive.
    """
    if np.any(np.asarray(scale) <= 0):
        raise ContractError(f"scale must be positive, got {scale}")
    delta = shape / math.sqrt(1.0 + shape * shape)
    u0 = rng.standard_normal(size)
    u1 = rng.standard_normal(size)
    z = delta * np.abs(u0) + math.sqrt(1.0 - delta * delta) * u1
    return loc + scale * z


def _mean_sd_vector(structure: str, ages: np.ndarray, signs: np.ndarray, onset: float):
    mus = np.empty(len(ages))
    sds = np.empty(len(ages))
    for i, (age, sign) in enumerate(zip(ages, signs)):
        mus[i], sds[i] = mean_sd(structure, float(age), int(sign), onset=onset)
    return mus, sds


def _draw_structures(
    ages: np.ndarray, signs: np.ndarray, rng: np.random.Generator, skew_shape: float, onset: float
) -> np.ndarray:
    y = np.empty((len(ages), len(STRUCTURES)))
    for j, structure in enumerate(STRUCTURES):
        mus, sds = _mean_sd_vector(structure, ages, signs, onset)
        if structure == "D":
            y[:, j] = sample_skew_normal(mus, sds, skew_shape, rng, size=len(ages))
        else:
            y[:, j] = mus + sds * rng.standard_normal(len(ages))
    return y


def _draw_signs(ages: np.ndarray, rng: np.random.Generator, onset: float) -> np.ndarray:
    coin = rng.integers(0, 2, size=len(ages)) * 2 - 1
    return np.where(ages >= onset, coin, 0)


def sample_cohort(config: SynthConfig) -> List[SynthRecord]:
    """
    Draw ``config.n_samples`` subjects.

    Ages are uniform over ``age_range``, sex is Bernoulli(0.5), and one
    subgroup sign per subject is shared by all structures from the onset age on.
    Generation proceeds in chunks with RNG streams spawned from the seed.
    """
    n = config.n_samples
    if n == 0:
        return []
    n_chunks = math.ceil(n / CHUNK_SIZE)
    lo, hi = config.age_range
    records: List[SynthRecord] = []
    for chunk, rng in enumerate(spawn_rngs(config.seed, n_chunks)):
        size = min(CHUNK_SIZE, n - chunk * CHUNK_SIZE)
        ages = rng.uniform(lo, hi, size=size)
        sexes = rng.integers(0, 2, size=size)
        signs = _draw_signs(ages, rng, config.mixture_onset_age)
        y = _draw_structures(ages, signs, rng, config.skew_shape, config.mixture_onset_age)
        for i in range(size):
            records.append(
                SynthRecord(
                    age=float(ages[i]),
                    sex=int(sexes[i]),
                    subgroup=int(signs[i]) if signs[i] != 0 else None,
                    y=tuple(float(v) for v in y[i]),
                )
            )
    normdiff_logger.info(f"Generated synthetic cohort | N: {n} | Seed: {config.seed}")
    return records


def sample_conditional(
    age: float,
    n: int,
    rng: np.random.Generator,
    skew_shape: float = 7.0,
    onset: float = 65.0,
) -> np.ndarray:
    """
    True conditional sampler of the recipe at a fixed age (sex has no effect).

    Returns:
        ``n x 4`` matrix in native units.
    """
    ages = np.full(n, float(age))
    signs = _draw_signs(ages, rng, onset)
    return _draw_structures(ages, signs, rng, skew_shape, onset)


def to_cohort(records: Sequence[SynthRecord]) -> Cohort:
    """Convert synthetic records to a :class:`Cohort` with IDP columns A-D."""
    covariates = np.array([[r.age, r.sex] for r in records], dtype=np.float64).reshape(-1, 2)
    idps = np.array([r.y for r in records], dtype=np.float64).reshape(-1, len(STRUCTURES))
    return Cohort(
        covariates=covariates,
        idps=idps,
        idp_names=list(STRUCTURES),
        covariate_names=["age", "sex"],
    )
