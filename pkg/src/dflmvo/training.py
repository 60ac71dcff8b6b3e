"""Losses and the mini-batch training loop.

The combined loss is ``alpha * regret + (1 - alpha) * mse_scale * MSE``.
Regret uses the minimisation convention, so it is non-negative, and its
gradient flows through the implicit Jacobian of the MVO solution.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .diffopt import regret_gradient_at
from .errors import DimensionMismatch, NonFiniteLoss
from .market_data import Sample
from .model import MlpModel, backward, forward, init
from .mvo import MvoProblem, mvo_objective, solve_mvo

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class LossConfig:
    alpha: float
    risk_aversion: float
    mse_scale: float = 10.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not self.risk_aversion > 0:
            raise ValueError("risk aversion must be positive")
        if not self.mse_scale > 0:
            raise ValueError("mse_scale must be positive")


@dataclass(frozen=True)
class TrainConfig:
    max_iterations: int = 5000
    patience: int = 100
    learning_rate: float = 1e-3
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if min(self.max_iterations, self.patience, self.batch_size) <= 0:
            raise ValueError("iteration, patience and batch counts must be positive")
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be positive")


@dataclass
class EvalRecord:
    iteration: int
    train_loss: float
    valid_loss: float
    degenerate_events: int

    def to_line(self) -> str:
        return json.dumps(asdict(self))


@dataclass
class TrainRecord:
    history: list = field(default_factory=list)
    stopping_iteration: int = 0
    best_iteration: int = 0
    best_valid_loss: float = math.inf
    degenerate_events: int = 0
    solver_calls: int = 0
    monitor: str = "valid_combined_loss"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["history"] = [asdict(r) for r in self.history]
        return d


def mse_loss(mu_hat, mu_star, scale: float = 10.0) -> float:
    mu_hat = np.asarray(mu_hat, dtype=float)
    mu_star = np.asarray(mu_star, dtype=float)
    if mu_hat.shape != mu_star.shape:
        raise DimensionMismatch(f"{mu_hat.shape} vs {mu_star.shape}")
    return float(scale * np.mean((mu_star - mu_hat) ** 2))


def mse_gradient(mu_hat, mu_star, scale: float = 10.0) -> np.ndarray:
    mu_hat = np.asarray(mu_hat, dtype=float)
    mu_star = np.asarray(mu_star, dtype=float)
    if mu_hat.shape != mu_star.shape:
        raise DimensionMismatch(f"{mu_hat.shape} vs {mu_star.shape}")
    return -2.0 * scale * (mu_star - mu_hat) / mu_hat.size


@dataclass
class LossTerms:
    value: float
    gradient: np.ndarray
    regret: float | None = None
    mse: float = 0.0
    weights: np.ndarray | None = None
    degenerate: bool = False


def combined_loss_terms(
    mu_hat,
    mu_star,
    cov,
    config: LossConfig,
    opt_weights=None,
    warm_start=None,
    strict: bool = True,
) -> LossTerms:
    """Value, gradient and by-products of the combined loss for one sample.

    With ``alpha == 0`` the QP solver is never called.
    """
    mu_hat = np.asarray(mu_hat, dtype=float)
    mu_star = np.asarray(mu_star, dtype=float)
    a = config.alpha
    mse = mse_loss(mu_hat, mu_star, config.mse_scale)
    grad = (1.0 - a) * mse_gradient(mu_hat, mu_star, config.mse_scale)
    if a == 0.0:
        return LossTerms(mse, grad, None, mse)

    lam = config.risk_aversion
    if opt_weights is None:
        opt_weights = solve_mvo(MvoProblem(mu_star, cov, lam)).weights
    problem = MvoProblem(mu_hat, cov, lam)
    report = solve_mvo(problem, warm_start)
    rg, jac = regret_gradient_at(report, problem, mu_star, strict=strict)
    reg = mvo_objective(opt_weights, mu_star, problem.cov, lam) - mvo_objective(
        report.weights, mu_star, problem.cov, lam
    )
    value = a * reg + (1.0 - a) * mse
    return LossTerms(value, grad + a * rg, reg, mse, report.weights, jac.degenerate)


def combined_loss(mu_hat, mu_star, cov, config: LossConfig, strict: bool = True):
    """``(value, gradient)`` of the combined loss with respect to ``mu_hat``."""
    t = combined_loss_terms(mu_hat, mu_star, cov, config, strict=strict)
    return t.value, t.gradient


class _Dataset:
    """Stacked arrays plus per-sample caches for one split.

    ``w*(mu*)`` is computed lazily on first use so pure-MSE training never
    touches the solver.
    """

    def __init__(self, samples: Sequence[Sample], lam: float):
        if not samples:
            raise ValueError("empty sample split")
        self.samples = list(samples)
        self.features = np.stack([s.features for s in samples])
        self.targets = np.stack([s.target_mu for s in samples])
        self.lam = lam
        self._opt = [None] * len(samples)
        self.warm = [None] * len(samples)
        self.solver_calls = 0

    def __len__(self):
        return len(self.samples)

    def opt_weights(self, k: int) -> np.ndarray:
        if self._opt[k] is None:
            s = self.samples[k]
            self._opt[k] = solve_mvo(MvoProblem(s.target_mu, s.cov, self.lam)).weights
            self.solver_calls += 1
        return self._opt[k]

    def sample_loss(self, k: int, mu_hat, config: LossConfig) -> LossTerms:
        s = self.samples[k]
        if config.alpha == 0.0:
            return combined_loss_terms(mu_hat, s.target_mu, s.cov, config)
        terms = combined_loss_terms(
            mu_hat,
            s.target_mu,
            s.cov,
            config,
            opt_weights=self.opt_weights(k),
            warm_start=self.warm[k],
            strict=False,
        )
        self.solver_calls += 1
        self.warm[k] = terms.weights
        return terms


class _Adam:
    def __init__(self, n: int, lr: float):
        self.lr = lr
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = ADAM_BETA1 * self.m + (1 - ADAM_BETA1) * grad
        self.v = ADAM_BETA2 * self.v + (1 - ADAM_BETA2) * grad * grad
        m_hat = self.m / (1 - ADAM_BETA1**self.t)
        v_hat = self.v / (1 - ADAM_BETA2**self.t)
        return theta - self.lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


def _evaluate(model: MlpModel, data: _Dataset, config: LossConfig):
    mu_hat, _ = forward(model, data.features)
    total = 0.0
    degenerate = 0
    for k in range(len(data)):
        t = data.sample_loss(k, mu_hat[k], config)
        total += t.value
        degenerate += t.degenerate
    return total / len(data), degenerate


def train(
    train_samples: Sequence[Sample],
    valid_samples: Sequence[Sample],
    model_seed,
    loss_config: LossConfig,
    train_config: TrainConfig = TrainConfig(),
    log: Callable[[EvalRecord], None] | None = None,
):
    """Adam on shuffled mini-batches with early stopping on validation loss.

    One iteration is one mini-batch step. Validation runs before the first
    step and after every pass over the training split; ``patience`` counts
    validation evaluations without strict improvement. Returns the
    best-validation model and its :class:`TrainRecord`.
    """
    lam = loss_config.risk_aversion
    tr = _Dataset(train_samples, lam)
    va = _Dataset(valid_samples, lam)
    rng = np.random.default_rng([int(train_config.seed), 0x5EED])

    model = init(model_seed, n_input=tr.features.shape[-1])
    theta = model.to_vector()
    n_input, n_hidden = model.n_input, model.n_hidden
    adam = _Adam(theta.size, train_config.learning_rate)
    record = TrainRecord()

    def checkpoint(iteration, train_loss, degenerate):
        nonlocal best_theta, stale
        valid_loss, deg_v = _evaluate(model, va, loss_config)
        if not math.isfinite(valid_loss):
            raise NonFiniteLoss(f"validation loss {valid_loss} at iteration {iteration}")
        rec = EvalRecord(iteration, float(train_loss), float(valid_loss), int(degenerate + deg_v))
        record.history.append(rec)
        record.degenerate_events += rec.degenerate_events
        if log is not None:
            log(rec)
        if valid_loss < record.best_valid_loss:
            record.best_valid_loss = float(valid_loss)
            record.best_iteration = iteration
            best_theta = theta.copy()
            stale = 0
        else:
            stale += 1

    best_theta = theta.copy()
    stale = 0
    initial_train, deg0 = _evaluate(model, tr, loss_config)
    checkpoint(0, initial_train, deg0)

    iteration = 0
    n = len(tr)
    bs = train_config.batch_size
    while iteration < train_config.max_iterations and stale < train_config.patience:
        perm = rng.permutation(n)
        epoch_loss = 0.0
        epoch_count = 0
        degenerate = 0
        for start in range(0, n, bs):
            idx = perm[start:start + bs]
            mu_hat, tape = forward(model, tr.features[idx])
            upstream = np.empty_like(mu_hat)
            batch_loss = 0.0
            for b, k in enumerate(idx):
                t = tr.sample_loss(int(k), mu_hat[b], loss_config)
                batch_loss += t.value
                upstream[b] = t.gradient
                degenerate += t.degenerate
            batch_loss /= len(idx)
            upstream /= len(idx)
            grad = backward(model, tape, upstream).to_vector()
            if not (math.isfinite(batch_loss) and np.all(np.isfinite(grad))):
                raise NonFiniteLoss(
                    f"non-finite loss {batch_loss} or gradient at iteration {iteration + 1}; "
                    f"batch indices {idx.tolist()}"
                )
            theta = adam.step(theta, grad)
            model = MlpModel.from_vector(theta, n_input, n_hidden)
            iteration += 1
            epoch_loss += batch_loss * len(idx)
            epoch_count += len(idx)
            if iteration >= train_config.max_iterations:
                break
        checkpoint(iteration, epoch_loss / epoch_count, degenerate)

    record.stopping_iteration = iteration
    record.solver_calls = tr.solver_calls + va.solver_calls
    return MlpModel.from_vector(best_theta, n_input, n_hidden), record
