"""Estimator-style wrappers around the flow model and the 3D embedder."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import flow
from .constraints import ConstraintWeights
from .data import CdrLoop, Dataset
from .embed3d import EmbedConfig, EmbedResult, embed
from .exceptions import ContractError, EmptySplitError
from .geometry import ValiditySpec
from .training import TrainConfig, evaluate_nll, train
from .validation import check_distance_matrix


def _resolve_validity(loop_class: str, validity) -> ValiditySpec:
    if validity is None:
        return ValiditySpec.for_class(loop_class)
    if isinstance(validity, ValiditySpec):
        return validity
    return ValiditySpec.for_class(loop_class, **dict(validity))


def _as_loops(X) -> list[CdrLoop]:
    loops = list(X.loops if isinstance(X, Dataset) else X)
    if not loops:
        raise EmptySplitError("no loops given")
    for loop in loops:
        if not isinstance(loop, CdrLoop):
            raise ContractError(f"expected CdrLoop instances, got {type(loop).__name__}")
        if loop.coords is None:
            raise ContractError(f"loop {loop.id!r} has no coordinates")
    return loops


class CDRFlow(BaseEstimator):
    """Joint generative model of loop distance matrices and residue sequences.

    ``fit`` takes a list of :class:`CdrLoop` (or a :class:`Dataset`, whose
    ``train`` and ``validation`` splits are then used). ``transform`` maps
    loops to latents, ``inverse_transform`` decodes latents and ``sample``
    draws new loops. ``score_samples`` is the exact per-loop log-likelihood.
    """

    def __init__(self, loop_class="H3", n_max=16, n_distance_layers=5, n_amino_layers=10, cnn_hidden=128,
                 gnn_hidden=64, mlp_hidden=(128, 64), wgnn_xi=0.3, dequant_scale=0.1, epochs=200,
                 batch_size=64, learning_rate=1e-3, mc_samples=None, constraint_every=1,
                 constraint_weights=(10.0, 50.0, 1.0), clip_norm=10.0, validity=None, random_state=0):
        self.loop_class = loop_class
        self.n_max = n_max
        self.n_distance_layers = n_distance_layers
        self.n_amino_layers = n_amino_layers
        self.cnn_hidden = cnn_hidden
        self.gnn_hidden = gnn_hidden
        self.mlp_hidden = mlp_hidden
        self.wgnn_xi = wgnn_xi
        self.dequant_scale = dequant_scale
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.mc_samples = mc_samples
        self.constraint_every = constraint_every
        self.constraint_weights = constraint_weights
        self.clip_norm = clip_norm
        self.validity = validity
        self.random_state = random_state

    def _flow_config(self) -> flow.FlowConfig:
        return flow.FlowConfig(
            n_max=self.n_max, n_distance_layers=self.n_distance_layers, n_amino_layers=self.n_amino_layers,
            cnn_hidden=self.cnn_hidden, gnn_hidden=self.gnn_hidden, mlp_hidden=tuple(self.mlp_hidden),
            wgnn_xi=self.wgnn_xi, dequant_scale=self.dequant_scale, seed=self.random_state,
        )

    def _train_config(self) -> TrainConfig:
        weights = self.constraint_weights
        if not isinstance(weights, ConstraintWeights):
            weights = ConstraintWeights(**weights) if isinstance(weights, dict) else ConstraintWeights(*weights)
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, learning_rate=self.learning_rate,
            mc_samples=self.mc_samples, constraint_every=self.constraint_every, constraint_weights=weights,
            clip_norm=self.clip_norm, seed=self.random_state,
        )

    def fit(self, X, y=None, validation=None, callback=None):
        if isinstance(X, Dataset) and validation is None:
            train_loops, validation = X.split("train"), X.split("validation")
        else:
            train_loops = _as_loops(X)
        train_loops = _as_loops(train_loops)
        validation = list(validation or [])
        model = flow.FlowModel(self._flow_config(), _resolve_validity(self.loop_class, self.validity),
                               self.loop_class)
        self.model_, self.log_ = train(model, train_loops, self._train_config(), validation, callback=callback)
        return self

    @classmethod
    def from_model(cls, model: flow.FlowModel) -> "CDRFlow":
        cfg = model.config
        est = cls(loop_class=model.loop_class, n_max=cfg.n_max, n_distance_layers=cfg.n_distance_layers,
                  n_amino_layers=cfg.n_amino_layers, cnn_hidden=cfg.cnn_hidden, gnn_hidden=cfg.gnn_hidden,
                  mlp_hidden=cfg.mlp_hidden, wgnn_xi=cfg.wgnn_xi, dequant_scale=cfg.dequant_scale,
                  validity=model.validity, random_state=cfg.seed)
        est.model_ = model
        return est

    @classmethod
    def load(cls, path) -> "CDRFlow":
        return cls.from_model(flow.load_checkpoint(path))

    def save(self, path, extra: dict | None = None) -> None:
        check_is_fitted(self, "model_")
        flow.save_checkpoint(self.model_, path, extra)

    def score_samples(self, X, noise_seed=0) -> np.ndarray:
        """Exact log-likelihood of each loop (seeded dequantization noise)."""
        check_is_fitted(self, "model_")
        loops = _as_loops(X)
        self.model_.eval()
        rng = np.random.default_rng(noise_seed)
        from .autodiff import no_grad
        with no_grad():
            batch = flow.make_batch(loops, self.model_.n_max)
            return flow.log_likelihood(self.model_, batch, rng=rng).data.copy()

    def score(self, X, y=None) -> float:
        return float(np.mean(self.score_samples(X)))

    def nll(self, X, seed: int = 0) -> float:
        check_is_fitted(self, "model_")
        return evaluate_nll(self.model_, _as_loops(X), seed=seed)

    def transform(self, X, noise_seed=0) -> flow.LatentPair:
        check_is_fitted(self, "model_")
        return flow.encode(self.model_, _as_loops(X), noise_seed=noise_seed)

    def inverse_transform(self, Z: flow.LatentPair) -> list:
        check_is_fitted(self, "model_")
        return flow.inverse(self.model_, Z)

    def sample(self, n_samples=1, random_state=None) -> list:
        check_is_fitted(self, "model_")
        seed = self.random_state if random_state is None else random_state
        return flow.sample(self.model_, n_samples, rng=np.random.default_rng(seed))

    def interpolate(self, loop_a: CdrLoop, loop_b: CdrLoop, steps: int = 10, noise_seed=0):
        check_is_fitted(self, "model_")
        return flow.interpolate(self.model_, loop_a, loop_b, steps, noise_seed=noise_seed)


class ConstrainedEmbedder(TransformerMixin, BaseEstimator):
    """Maps distance matrices to 3D coordinates that respect the validity windows.

    Stateless apart from the resolved validity thresholds; ``fit`` only
    validates the configuration.
    """

    def __init__(self, loop_class="H3", lambda1=50.0, lambda2=100.0, max_sweeps=300, inner_steps=8,
                 tolerance=1e-9, validity=None, random_state=0):
        self.loop_class = loop_class
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.max_sweeps = max_sweeps
        self.inner_steps = inner_steps
        self.tolerance = tolerance
        self.validity = validity
        self.random_state = random_state

    def fit(self, X=None, y=None):
        self.spec_ = _resolve_validity(self.loop_class, self.validity)
        self.config_ = EmbedConfig(lambda1=self.lambda1, lambda2=self.lambda2, max_sweeps=self.max_sweeps,
                                   inner_steps=self.inner_steps, tolerance=self.tolerance, seed=self.random_state)
        return self

    def embed_one(self, d) -> EmbedResult:
        check_is_fitted(self, "spec_")
        return embed(check_distance_matrix(d), self.spec_, self.config_)

    def transform(self, X) -> list:
        """List of ``(N, 3)`` coordinate arrays, one per distance matrix."""
        self.results_ = [self.embed_one(d) for d in X]
        return [r.coords for r in self.results_]
