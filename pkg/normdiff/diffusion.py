"""
DDPM engine: linear noise schedule, one-shot forward noising, the
noise-prediction loss, reverse steps, ancestral sampling and training.

Steps are 1-based (t = 1..T); schedule arrays are stored 0-based.
"""

import math
from abc import ABC, abstractmethod
from datetime import datetime
from typing import TYPE_CHECKING, Any, Callable, ClassVar, Dict, List, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, Field

from normdiff import ndmath as nd
from normdiff.errors import ContractError, DimensionError, NumericalError
from normdiff.ndmath import Node, Tensor
from normdiff.optim import AdamW, clip_grad_norm
from normdiff.utils import log_training_epoch, normdiff_logger, timed

if TYPE_CHECKING:
    from normdiff.config import OptimizerConfig, ScheduleConfig

Phase = str  # "train" | "eval"
RowMode = Optional[str]  # "intersample" | "degenerate" | None (decided by phase)


class NoiseSchedule(BaseModel):
    """Fixed variance schedule with reverse variance sigma_t^2 = beta_t."""

    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    reverse_var: np.ndarray

    model_config = {"arbitrary_types_allowed": True}

    def check_step(self, t: Union[int, np.ndarray]) -> None:
        t_arr = np.asarray(t)
        if t_arr.size and (t_arr.min() < 1 or t_arr.max() > self.T):
            raise ContractError(f"Diffusion step must lie in [1, {self.T}], got {t}")

    def beta(self, t: int) -> float:
        return float(self.betas[t - 1])

    def alpha_bar(self, t: Union[int, np.ndarray]) -> Union[float, np.ndarray]:
        return self.alpha_bars[np.asarray(t) - 1]


def linear_schedule(T: int = 100, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """
    Linearly spaced betas (inclusive endpoints) with cumulative alpha products.

    Raises:
        ContractError: If ``T < 1`` or not ``0 < beta_start <= beta_end < 1``.
    """
    if T < 1:
        raise ContractError(f"T must be >= 1, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ContractError(f"Need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, T)
    alphas = 1.0 - betas
    return NoiseSchedule(
        T=T,
        betas=betas,
        alphas=alphas,
        alpha_bars=np.cumprod(alphas),
        reverse_var=betas.copy(),
    )


def schedule_from_config(config: "ScheduleConfig") -> NoiseSchedule:
    return linear_schedule(config.T, config.beta_start, config.beta_end)


class Denoiser(ABC):
    """
    Noise predictor eps_theta(y_t, t/T, c).

    Parameters live in ``params`` as trainable leaves in a fixed order, which
    defines the flat parameter vector. ``buffers`` hold non-trainable state.
    """

    backbone: ClassVar[str] = ""

    def __init__(self, d: int, c: int, config: BaseModel):
        self.d = d
        self.c = c
        self.config = config
        self.params: Dict[str, Node] = {}
        self.buffers: Dict[str, np.ndarray] = {}

    def register(self, name: str, value: np.ndarray) -> Node:
        node = nd.parameter(value, name=name)
        self.params[name] = node
        return node

    def parameters(self) -> List[Node]:
        return list(self.params.values())

    @property
    def n_params(self) -> int:
        return int(sum(p.value.size for p in self.params.values()))

    def get_flat(self) -> np.ndarray:
        if not self.params:
            return np.zeros(0)
        return np.concatenate([p.value.reshape(-1) for p in self.params.values()])

    def set_flat(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.n_params:
            raise DimensionError(f"Expected {self.n_params} parameters, got {flat.size}")
        offset = 0
        for p in self.params.values():
            size = p.value.size
            p.value = flat[offset:offset + size].reshape(p.shape).copy()
            offset += size

    def grad_flat(self) -> np.ndarray:
        if not self.params:
            return np.zeros(0)
        return np.concatenate([p.grad.reshape(-1) for p in self.params.values()])

    def zero_grad(self) -> None:
        nd.zero_grad(self.parameters())

    def _check_inputs(self, y_t: np.ndarray, t_norm: np.ndarray, c: np.ndarray) -> None:
        if y_t.ndim != 2 or y_t.shape[1] != self.d:
            raise DimensionError(f"y_t must be (B, {self.d}), got {y_t.shape}")
        if c.ndim != 2 or c.shape != (y_t.shape[0], self.c):
            raise DimensionError(f"c must be ({y_t.shape[0]}, {self.c}), got {c.shape}")
        if t_norm.shape != (y_t.shape[0],):
            raise DimensionError(f"t_norm must be ({y_t.shape[0]},), got {t_norm.shape}")

    @staticmethod
    def dropout_mask(rng: Optional[np.random.Generator], shape, rate: float) -> Optional[np.ndarray]:
        if rng is None or rate <= 0.0:
            return None
        return (rng.random(shape) >= rate).astype(np.float64)

    @abstractmethod
    def forward(
        self,
        y_t: Tensor,
        t_norm: Tensor,
        c: Tensor,
        phase: Phase = "eval",
        rng: Optional[np.random.Generator] = None,
        row_mode: RowMode = None,
    ) -> Node:
        """Predict noise for a batch; ``phase='eval'`` is deterministic and batch-independent."""

    def predict(self, y_t: Tensor, t_norm: Tensor, c: Tensor, chunk_size: int = 4096) -> Tensor:
        """Evaluation-mode prediction, processed in row chunks."""
        outputs = []
        for start in range(0, y_t.shape[0], chunk_size):
            stop = start + chunk_size
            outputs.append(self.forward(y_t[start:stop], t_norm[start:stop], c[start:stop]).value)
        return np.concatenate(outputs, axis=0) if outputs else np.zeros((0, self.d))


def one_shot_noise(
    y0: Tensor, t: Union[int, np.ndarray], eps: Tensor, schedule: NoiseSchedule
) -> Tensor:
    """y_t = sqrt(abar_t) * y0 + sqrt(1 - abar_t) * eps; ``t`` scalar or one step per row."""
    schedule.check_step(t)
    abar = np.asarray(schedule.alpha_bar(t))
    if abar.ndim == 1:
        abar = abar[:, None]
    return np.sqrt(abar) * np.asarray(y0) + np.sqrt(1.0 - abar) * np.asarray(eps)


def forward_step(y_prev: Tensor, t: int, schedule: NoiseSchedule, rng: np.random.Generator) -> Tensor:
    """One step of the forward chain q(y_t | y_{t-1})."""
    schedule.check_step(t)
    beta = schedule.beta(t)
    return math.sqrt(1.0 - beta) * y_prev + math.sqrt(beta) * rng.standard_normal(np.shape(y_prev))


def training_loss(
    denoiser: Denoiser,
    y0: Tensor,
    c: Tensor,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    phase: Phase = "train",
    t: Optional[np.ndarray] = None,
    eps: Optional[Tensor] = None,
    row_mode: RowMode = None,
) -> Node:
    """
    Mean over the batch of ||eps - eps_theta(y_t, t, c)||^2.

    ``t`` ~ Uniform{1..T} and ``eps`` ~ N(0, I) per row unless given.
    """
    batch = y0.shape[0]
    if batch == 0:
        raise ContractError("training_loss needs a non-empty batch")
    if t is None:
        t = rng.integers(1, schedule.T + 1, size=batch)
    if eps is None:
        eps = rng.standard_normal(y0.shape)
    y_t = one_shot_noise(y0, t, eps, schedule)
    eps_hat = denoiser.forward(y_t, np.asarray(t, dtype=np.float64) / schedule.T, c, phase=phase, rng=rng,
                               row_mode=row_mode)
    diff = nd.sub(eps, eps_hat)
    return nd.mul(nd.sum(nd.mul(diff, diff)), 1.0 / batch)


def posterior_mean(y_t: Tensor, eps_hat: Tensor, t: int, schedule: NoiseSchedule) -> Tensor:
    """mu_theta = (y_t - beta_t * eps_hat / sqrt(1 - abar_t)) / sqrt(1 - beta_t)."""
    schedule.check_step(t)
    beta = schedule.beta(t)
    abar = float(schedule.alpha_bar(t))
    return (y_t - beta * eps_hat / math.sqrt(1.0 - abar)) / math.sqrt(1.0 - beta)


def eps_from_mean(y_t: Tensor, mu: Tensor, t: int, schedule: NoiseSchedule) -> Tensor:
    """Invert :func:`posterior_mean` for the noise prediction."""
    schedule.check_step(t)
    beta = schedule.beta(t)
    abar = float(schedule.alpha_bar(t))
    return (y_t - math.sqrt(1.0 - beta) * mu) * math.sqrt(1.0 - abar) / beta


def predict_x0(y_t: Tensor, eps_hat: Tensor, t: int, schedule: NoiseSchedule) -> Tensor:
    """Clean-data estimate implied by a noise prediction."""
    schedule.check_step(t)
    abar = float(schedule.alpha_bar(t))
    return (y_t - math.sqrt(1.0 - abar) * eps_hat) / math.sqrt(abar)


def _broadcast_covariates(c: Tensor, m: int) -> Tensor:
    c = np.asarray(c, dtype=np.float64)
    if c.ndim == 1:
        return np.tile(c, (m, 1))
    if c.shape[0] != m:
        raise DimensionError(f"Covariate rows {c.shape[0]} do not match {m} samples")
    return c


def reverse_step(
    denoiser: Denoiser,
    y_t: Tensor,
    t: int,
    c: Tensor,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    chunk_size: int = 4096,
) -> Tensor:
    """
    Draw y_{t-1} ~ N(mu_theta, sigma_t^2 I); no noise is added at t = 1.
    """
    schedule.check_step(t)
    m = y_t.shape[0]
    c = _broadcast_covariates(c, m)
    eps_hat = denoiser.predict(y_t, np.full(m, t / schedule.T), c, chunk_size=chunk_size)
    mu = posterior_mean(y_t, eps_hat, t, schedule)
    if t > 1:
        return mu + math.sqrt(schedule.reverse_var[t - 1]) * rng.standard_normal(y_t.shape)
    return mu


def ancestral_sample(
    denoiser: Denoiser,
    c: Tensor,
    m: int,
    schedule: NoiseSchedule,
    seed: Union[int, Sequence[int], np.random.Generator] = 0,
    chunk_size: int = 4096,
) -> Tensor:
    """
    Run the reverse chain from y_T ~ N(0, I) down to y_0.

    Args:
        c: One covariate vector shared by all samples, or one row per sample.
        m: Number of samples.
        seed: Seed material or a generator; equal seeds give identical samples.

    Returns:
        ``m x D`` samples in scaled units.
    """
    if m < 1:
        raise ContractError(f"Need at least one sample, got {m}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    c = _broadcast_covariates(c, m)
    y = rng.standard_normal((m, denoiser.d))
    for t in range(schedule.T, 0, -1):
        y = reverse_step(denoiser, y, t, c, schedule, rng, chunk_size=chunk_size)
    return y


class TrainResult(BaseModel):
    """Outcome of a training run."""

    loss_trace: List[float] = Field(default_factory=list)
    epochs_completed: int = 0
    seconds: float = 0.0
    optimizer_state: Dict[str, Any] = Field(default_factory=dict)


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    """RNG for one epoch; depends only on (seed, epoch) so resumed runs replay exactly."""
    return np.random.default_rng([seed, epoch])


@timed()
def train(
    denoiser: Denoiser,
    y0: Tensor,
    c: Tensor,
    schedule: NoiseSchedule,
    config: "OptimizerConfig",
    seed: int = 0,
    start_epoch: int = 0,
    optimizer_state: Optional[Dict[str, Any]] = None,
    on_epoch: Optional[Callable[[int, float], None]] = None,
) -> TrainResult:
    """
    Fit the denoiser with AdamW and global gradient-norm clipping.

    Args:
        y0: Scaled training IDPs (N x D).
        c: Training covariates (N x C).
        start_epoch: First epoch to run (non-zero when resuming).
        optimizer_state: AdamW state from a checkpoint when resuming.
        on_epoch: Callback receiving (epoch, mean loss) after every epoch.

    Raises:
        NumericalError: If the loss becomes non-finite.
    """
    if y0.shape[0] != c.shape[0]:
        raise DimensionError("y0 and c must have the same number of rows")
    if y0.shape[0] == 0:
        raise ContractError("Cannot train on an empty cohort")
    optimizer = AdamW(
        denoiser.parameters(),
        lr=config.lr,
        betas=config.betas,
        eps=config.eps,
        weight_decay=config.weight_decay,
    )
    if optimizer_state:
        optimizer.load_state_dict(optimizer_state)

    result = TrainResult(epochs_completed=start_epoch)
    started = datetime.now()
    n = y0.shape[0]
    for epoch in range(start_epoch, config.epochs):
        epoch_start = datetime.now()
        rng = epoch_rng(seed, epoch)
        order = rng.permutation(n)
        losses = []
        for step, begin in enumerate(range(0, n, config.batch_size)):
            rows = order[begin:begin + config.batch_size]
            denoiser.zero_grad()
            try:
                loss = training_loss(denoiser, y0[rows], c[rows], schedule, rng)
            except NumericalError as exc:
                raise NumericalError(f"Training diverged at epoch {epoch}, step {step}: {exc}")
            nd.backward(loss)
            clip_grad_norm(denoiser.parameters(), config.grad_clip)
            optimizer.step()
            losses.append(float(loss.value))
        mean_loss = float(np.mean(losses))
        if not math.isfinite(mean_loss):
            raise NumericalError(f"Training diverged at epoch {epoch}: mean loss {mean_loss}")
        result.loss_trace.append(mean_loss)
        result.epochs_completed = epoch + 1
        log_training_epoch(epoch, mean_loss, start_time=epoch_start)
        if on_epoch is not None:
            on_epoch(epoch, mean_loss)

    result.seconds = (datetime.now() - started).total_seconds()
    result.optimizer_state = optimizer.state_dict()
    normdiff_logger.info(
        f"Training finished | Backbone: {denoiser.backbone} | Epochs: {result.epochs_completed} "
        f"| Seconds: {result.seconds:.2f}"
    )
    return result
