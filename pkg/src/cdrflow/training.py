"""Maximum-likelihood training alternated with constraint-loss steps."""

from __future__ import annotations

import copy
import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .constraints import ConstraintWeights, mc_constraint_objective
from .exceptions import ContractError, DimensionError, EmptySplitError, NumericError
from .flow import FlowModel, log_likelihood, make_batch

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0


def adam_step(params, grads, state: AdamState | None, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update on a list of arrays.

    Returns ``(new_params, new_state)``; inputs are not modified.
    """
    if len(params) != len(grads):
        raise DimensionError("params and grads differ in length")
    for p, g in zip(params, grads):
        if np.shape(p) != np.shape(g):
            raise DimensionError(f"gradient shape {np.shape(g)} != parameter shape {np.shape(p)}")
    if state is None:
        state = AdamState(m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params])
    t = state.t + 1
    new_m, new_v, new_p = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        new_p.append(p - lr * m_hat / (np.sqrt(v_hat) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(m=new_m, v=new_v, t=t)


class Adam:
    """Adam bound to a list of parameter tensors."""

    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state: AdamState | None = None

    def step(self, grads=None) -> None:
        if grads is None:
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        new, self.state = adam_step([p.data for p in self.params], grads, self.state, self.lr,
                                    self.betas[0], self.betas[1], self.eps)
        for p, value in zip(self.params, new):
            p.data = value


def clip_gradients(params, max_norm: float) -> tuple[list, float]:
    grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if max_norm is not None and total > max_norm:
        scale = max_norm / (total + 1e-12)
        grads = [g * scale for g in grads]
    return grads, total


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 64
    learning_rate: float = 1e-3
    mc_samples: int | None = None  # defaults to batch_size
    constraint_every: int | None = 1  # None disables constraint learning
    constraint_weights: ConstraintWeights = field(default_factory=ConstraintWeights)
    clip_norm: float | None = 10.0
    shared_optimizer: bool = True
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.constraint_weights, dict):
            self.constraint_weights = ConstraintWeights(**self.constraint_weights)
        elif isinstance(self.constraint_weights, (list, tuple)):
            self.constraint_weights = ConstraintWeights(*self.constraint_weights)
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ContractError("epochs and batch_size must be >= 1 and learning_rate > 0")
        if self.constraint_every is not None and self.constraint_every < 1:
            raise ContractError("constraint_every must be >= 1 or None")

    @property
    def monte_carlo_count(self) -> int:
        return self.mc_samples or self.batch_size

    def to_dict(self) -> dict:
        out = asdict(self)
        out["constraint_weights"] = asdict(self.constraint_weights)
        return out


@dataclass
class EpochRecord:
    epoch: int
    train_nll: float
    validation_nll: float | None
    constraint_loss: float | None
    wall_time: float
    clipped_steps: int = 0


@dataclass
class TrainLog:
    records: list = field(default_factory=list)

    def append(self, record: EpochRecord) -> None:
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def to_jsonl(self, include_timing: bool = True) -> str:
        """One JSON object per epoch; without timing the text is reproducible."""
        lines = []
        for r in self.records:
            row = asdict(r)
            if not include_timing:
                del row["wall_time"]
            lines.append(json.dumps(row) + "\n")
        return "".join(lines)

    def write(self, path, include_timing: bool = True) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_jsonl(include_timing))


def evaluate_nll(model: FlowModel, loops, seed: int = 0, batch_size: int = 256) -> float:
    """Mean negative log-likelihood in inference mode with seeded dequantization noise."""
    loops = list(loops)
    if not loops:
        raise EmptySplitError("cannot evaluate NLL on an empty split")
    was_training = model.training
    model.eval()
    rng = np.random.default_rng(seed)
    total = 0.0
    with ad.no_grad():
        for start in range(0, len(loops), batch_size):
            batch = make_batch(loops[start:start + batch_size], model.n_max)
            total += float(-log_likelihood(model, batch, rng=rng).data.sum())
    model.train(was_training)
    return total / len(loops)


def constraint_estimate(model: FlowModel, weights: ConstraintWeights, m: int = 256, seed: int = 12345) -> float:
    """Fixed-seed Monte-Carlo constraint loss, without recording a graph."""
    was_training = model.training
    model.eval()
    with ad.no_grad():
        value = mc_constraint_objective(model, model.validity, weights, m, rng_seed=seed).item()
    model.train(was_training)
    return value


def train(model: FlowModel, train_loops, config: TrainConfig, validation_loops=(), fit_statistics: bool = True,
          callback=None):
    """Alternate likelihood steps and constraint steps; return ``(model, TrainLog)``.

    Every iteration takes one Adam step on the mean negative log-likelihood of
    a minibatch (batch statistics in the conditioners). Every
    ``constraint_every``-th iteration also takes one step on the Monte-Carlo
    constraint objective, evaluated through the inference-mode inverse flow
    that generation uses. Both steps share one Adam state unless
    ``shared_optimizer`` is False.
    When validation loops are given, the parameters with the best validation
    NLL are restored at the end.
    """
    train_loops = list(train_loops)
    validation_loops = list(validation_loops)
    if not train_loops:
        raise EmptySplitError("training split is empty")
    if fit_statistics:
        model.fit_normalization(train_loops)
    rng = np.random.default_rng(config.seed)
    params = model.parameters()
    mle_opt = Adam(params, lr=config.learning_rate)
    con_opt = mle_opt if config.shared_optimizer else Adam(params, lr=config.learning_rate)
    log = TrainLog()
    best_state, best_val = None, np.inf
    weights = config.constraint_weights
    iteration = 0

    for epoch in range(1, config.epochs + 1):
        started = time.perf_counter()
        order = rng.permutation(len(train_loops))
        nll_sum, con_sum, con_count, clipped = 0.0, 0.0, 0, 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            batch = make_batch([train_loops[i] for i in idx], model.n_max)
            iteration += 1

            model.train()
            model.zero_grad()
            loss = -log_likelihood(model, batch, rng=rng).mean()
            _check_finite(loss, "likelihood", epoch, start // config.batch_size)
            loss.backward()
            grads, norm = clip_gradients(params, config.clip_norm)
            clipped += int(config.clip_norm is not None and norm > config.clip_norm)
            mle_opt.step(grads)
            nll_sum += loss.item() * len(idx)

            if config.constraint_every is not None and iteration % config.constraint_every == 0:
                model.eval()
                model.zero_grad()
                con = mc_constraint_objective(model, model.validity, weights, config.monte_carlo_count,
                                              rng_seed=rng.integers(2**63))
                _check_finite(con, "constraint", epoch, start // config.batch_size)
                con.backward()
                grads, norm = clip_gradients(params, config.clip_norm)
                clipped += int(config.clip_norm is not None and norm > config.clip_norm)
                con_opt.step(grads)
                con_sum += con.item()
                con_count += 1
        model.zero_grad()
        model.eval()

        val_nll = evaluate_nll(model, validation_loops) if validation_loops else None
        if val_nll is not None and val_nll < best_val:
            best_val, best_state = val_nll, copy.deepcopy(model.state_dict())
        record = EpochRecord(
            epoch=epoch,
            train_nll=nll_sum / len(order),
            validation_nll=val_nll,
            constraint_loss=con_sum / con_count if con_count else None,
            wall_time=time.perf_counter() - started,
            clipped_steps=clipped,
        )
        log.append(record)
        if clipped:
            logger.info("epoch %d: gradient norm clipped on %d steps", epoch, clipped)
        logger.debug("epoch %d: %s", epoch, record)
        if callback is not None:
            callback(model, record)

    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return model, log


def _check_finite(loss, what, epoch, batch_index):
    if not np.all(np.isfinite(loss.data)):
        raise NumericError(f"non-finite {what} loss at epoch {epoch}, batch {batch_index}")
