"""Two-stage invertible model over (distance matrix, residue one-hot) pairs.

The distance flow maps a padded, standardized distance matrix through a
stack of affine coupling layers with convolutional conditioners. The
residue flow maps the dequantized one-hot matrix through coupling layers
whose conditioners are weighted-distance graph layers, so it depends on the
distance matrix but never the other way round.

Variable lengths are handled by padding to ``n_max``: entries outside the
true-length block are never transformed and are excluded from the
log-likelihood.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import AMINO_ACIDS, CdrLoop, one_hot
from .exceptions import CapacityError, CheckpointError, ContractError, DimensionError, SchemaError
from .geometry import ValiditySpec
from .nn import BatchNorm, Conv2d, Linear, Module
from .validation import check_rng, symmetrize_distances

LOG_2PI = math.log(2.0 * math.pi)
CHECKPOINT_FORMAT = "cdrflow-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class FlowConfig:
    n_max: int = 16
    n_distance_layers: int = 5
    n_amino_layers: int = 10
    cnn_hidden: int = 128
    gnn_hidden: int = 64
    mlp_hidden: tuple = (128, 64)
    wgnn_xi: float = 0.3
    dequant_scale: float = 0.1
    seed: int = 0

    def __post_init__(self):
        self.mlp_hidden = tuple(int(h) for h in self.mlp_hidden)
        if self.n_max < 2:
            raise ContractError("n_max must be at least 2")
        if self.wgnn_xi <= 0:
            raise ContractError("wgnn_xi must be positive")
        if self.dequant_scale <= 0 or self.dequant_scale >= 0.5:
            raise ContractError("dequant_scale must lie in (0, 0.5) so argmax decoding stays exact")


@dataclass
class LoopBatch:
    """Padded batch: raw distances ``(B, n, n)``, one-hot ``(B, n, V)`` and true lengths."""

    d: np.ndarray
    s: np.ndarray
    lengths: np.ndarray

    @property
    def node_mask(self) -> np.ndarray:
        return node_mask(self.lengths, self.d.shape[1])


@dataclass
class LatentPair:
    z_d: np.ndarray
    z_s: np.ndarray
    lengths: np.ndarray = field(default=None)


def node_mask(lengths, n: int) -> np.ndarray:
    return (np.arange(n)[None, :] < np.asarray(lengths)[:, None]).astype(np.float64)


def make_batch(loops, n_max: int) -> LoopBatch:
    loops = list(loops)
    if not loops:
        raise ContractError("empty batch")
    d = np.zeros((len(loops), n_max, n_max))
    s = np.zeros((len(loops), n_max, len(AMINO_ACIDS)))
    lengths = np.zeros(len(loops), dtype=int)
    for i, loop in enumerate(loops):
        n = loop.length
        if n > n_max:
            raise CapacityError(f"loop {loop.id!r} has {n} residues; model capacity is {n_max}")
        d[i, :n, :n] = loop.distance_matrix()
        s[i, :n] = one_hot(loop.sequence)
        lengths[i] = n
    return LoopBatch(d=d, s=s, lengths=lengths)


# -- conditioners ------------------------------------------------------------
class CNNConditioner(Module):
    """conv3x3 -> batch norm -> ReLU -> conv3x3 on the masked matrix as a 1-channel image."""

    def __init__(self, hidden: int, rng):
        super().__init__()
        self.conv1 = Conv2d(1, hidden, rng)
        self.norm = BatchNorm(hidden, channel_axis=1)
        self.conv2 = Conv2d(hidden, 1, rng, zero_init=True)

    def __call__(self, x: Tensor, condition=None) -> Tensor:
        b, n, q = x.shape
        h = self.conv1(x.reshape(b, 1, n, q))
        h = ad.relu(self.norm(h))
        return self.conv2(h).reshape(b, n, q)


def weighted_adjacency(d: np.ndarray, mask: np.ndarray, xi: float) -> np.ndarray:
    """``exp(-xi * d)`` restricted to pairs of real (non-padding) residues."""
    return np.exp(-xi * d) * mask[..., :, None] * mask[..., None, :]


def wgnn(x: Tensor, adjacency, row_mask, weight: Tensor) -> Tensor:
    """Weighted-distance graph layer: ``adjacency @ (row_mask * x) @ weight``."""
    x = ad.as_tensor(x)
    adjacency = np.asarray(adjacency, dtype=np.float64)
    if adjacency.shape[-1] != x.shape[-2] or adjacency.shape[-2] != adjacency.shape[-1]:
        raise DimensionError(f"adjacency {adjacency.shape} does not match node features {x.shape}")
    if weight.shape[0] != x.shape[-1]:
        raise DimensionError(f"weight {weight.shape} does not match feature width {x.shape[-1]}")
    masked = x * np.asarray(row_mask, dtype=np.float64)
    return ad.matmul(ad.matmul(Tensor(adjacency), masked), weight)


class GNNConditioner(Module):
    """wGNN -> batch norm -> ReLU -> two-layer MLP -> linear projection back to the alphabet."""

    def __init__(self, vocab: int, gnn_hidden: int, mlp_hidden, rng):
        super().__init__()
        bound = 1.0 / math.sqrt(vocab)
        self.weight = Tensor(rng.uniform(-bound, bound, size=(vocab, gnn_hidden)), requires_grad=True)
        self.norm = BatchNorm(gnn_hidden, channel_axis=-1)
        widths = (gnn_hidden,) + tuple(mlp_hidden)
        self.mlp = [Linear(a, b, rng) for a, b in zip(widths[:-1], widths[1:])]
        self.out = Linear(widths[-1], vocab, rng, zero_init=True)

    def __call__(self, x: Tensor, condition) -> Tensor:
        h = ad.relu(self.norm(wgnn(x, condition, 1.0, self.weight)))
        for layer in self.mlp:
            h = ad.relu(layer(h))
        return self.out(h)


# -- coupling ----------------------------------------------------------------
class CouplingLayer(Module):
    """Affine coupling over the rows of a ``(P, Q)`` input.

    The first ``ceil(P/2)`` rows condition the rest, or the reverse when
    ``flip`` is set. ``scale_net`` and ``shift_net`` share an architecture but
    not parameters. Entries where ``valid`` is zero pass through unchanged.
    """

    def __init__(self, n_rows: int, flip: bool, scale_net: Module, shift_net: Module):
        super().__init__()
        if n_rows < 2:
            raise ContractError("coupling needs at least two rows")
        first = np.arange(n_rows) < math.ceil(n_rows / 2)
        self.cond_rows = ~first if flip else first
        self.scale_net = scale_net
        self.shift_net = shift_net

    def _masks(self, valid):
        cond = self.cond_rows.astype(np.float64)[:, None]
        update = np.asarray(valid, dtype=np.float64) * (1.0 - cond)
        return cond, update

    def forward(self, x: Tensor, valid, condition=None):
        cond, update = self._masks(valid)
        x1 = x * cond
        r = self.scale_net(x1, condition)
        t = self.shift_net(x1, condition)
        y = x * (1.0 - update) + (x * ad.sigmoid(r) + t) * update
        logdet = (ad.log_sigmoid(r) * update).sum(axis=(1, 2))
        return y, logdet

    def inverse(self, y: Tensor, valid, condition=None) -> Tensor:
        cond, update = self._masks(valid)
        y1 = y * cond
        r = self.scale_net(y1, condition)
        t = self.shift_net(y1, condition)
        return y * (1.0 - update) + ((y - t) / ad.sigmoid(r)) * update


def coupling_forward(layer: CouplingLayer, x, valid=None, condition=None):
    x = ad.as_tensor(x)
    if valid is None:
        valid = np.ones(x.shape)
    return layer.forward(x, valid, condition)


def coupling_inverse(layer: CouplingLayer, y, valid=None, condition=None) -> Tensor:
    y = ad.as_tensor(y)
    if valid is None:
        valid = np.ones(y.shape)
    return layer.inverse(y, valid, condition)


# -- the model ---------------------------------------------------------------
class FlowModel(Module):
    def __init__(self, config: FlowConfig | None = None, validity: ValiditySpec | None = None,
                 loop_class: str = "H3"):
        super().__init__()
        self.config = config or FlowConfig()
        self.loop_class = loop_class
        self.validity = validity or ValiditySpec.for_class(loop_class)
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)
        n, vocab = cfg.n_max, len(AMINO_ACIDS)
        self.distance_layers = [
            CouplingLayer(n, k % 2 == 1, CNNConditioner(cfg.cnn_hidden, rng), CNNConditioner(cfg.cnn_hidden, rng))
            for k in range(cfg.n_distance_layers)
        ]
        self.amino_layers = [
            CouplingLayer(
                n, k % 2 == 1,
                GNNConditioner(vocab, cfg.gnn_hidden, cfg.mlp_hidden, rng),
                GNNConditioner(vocab, cfg.gnn_hidden, cfg.mlp_hidden, rng),
            )
            for k in range(cfg.n_amino_layers)
        ]
        self.d_mean = np.zeros((n, n))
        self.d_std = np.ones((n, n))
        self.length_counts = np.zeros(n + 1)
        self.length_counts[n] = 1.0

    @property
    def n_max(self) -> int:
        return self.config.n_max

    # -- data statistics --
    def fit_normalization(self, loops) -> None:
        """Per-entry mean/std of training distance matrices and the length histogram."""
        batch = make_batch(loops, self.n_max)
        valid = self.pair_mask(batch.lengths)
        count = valid.sum(axis=0)
        safe = np.maximum(count, 1.0)
        mean = (batch.d * valid).sum(axis=0) / safe
        var = (((batch.d - mean) * valid) ** 2).sum(axis=0) / safe
        std = np.sqrt(var)
        self.d_mean = np.where(count > 0, mean, 0.0)
        self.d_std = np.where((count > 1) & (std > 1e-6), std, 1.0)
        self.length_counts = np.bincount(batch.lengths, minlength=self.n_max + 1).astype(np.float64)

    def pair_mask(self, lengths) -> np.ndarray:
        m = node_mask(lengths, self.n_max)
        return m[:, :, None] * m[:, None, :]

    def normalize(self, d: np.ndarray, lengths) -> np.ndarray:
        return (d - self.d_mean) / self.d_std * self.pair_mask(lengths)

    def denormalize(self, x, lengths):
        """Works on arrays and tensors alike."""
        return (x * self.d_std + self.d_mean) * self.pair_mask(lengths)

    def adjacency(self, d: np.ndarray, lengths) -> np.ndarray:
        return weighted_adjacency(d, node_mask(lengths, self.n_max), self.config.wgnn_xi)

    def sample_lengths(self, count: int, rng) -> np.ndarray:
        probs = self.length_counts / self.length_counts.sum()
        return rng.choice(self.n_max + 1, size=count, p=probs)

    # -- the two flows --
    def forward_distance(self, x: Tensor, lengths):
        valid = self.pair_mask(lengths)
        logdet = Tensor(np.zeros(x.shape[0]))
        for layer in self.distance_layers:
            x, ld = layer.forward(x, valid)
            logdet = logdet + ld
        return x, logdet

    def inverse_distance(self, z: Tensor, lengths) -> Tensor:
        valid = self.pair_mask(lengths)
        for layer in reversed(self.distance_layers):
            z = layer.inverse(z, valid)
        return z

    def forward_amino(self, s: Tensor, adjacency: np.ndarray, lengths):
        valid = node_mask(lengths, self.n_max)[:, :, None]
        logdet = Tensor(np.zeros(s.shape[0]))
        for layer in self.amino_layers:
            s, ld = layer.forward(s, valid, adjacency)
            logdet = logdet + ld
        return s, logdet

    def inverse_amino(self, z: Tensor, adjacency: np.ndarray, lengths) -> Tensor:
        valid = node_mask(lengths, self.n_max)[:, :, None]
        for layer in reversed(self.amino_layers):
            z = layer.inverse(z, valid, adjacency)
        return z

    def sample_distances(self, count: int, rng):
        """Differentiable generated distance matrices (symmetrized) and their lengths."""
        lengths = self.sample_lengths(count, rng)
        valid = self.pair_mask(lengths)
        z = Tensor(rng.standard_normal((count, self.n_max, self.n_max)) * valid)
        x = self.inverse_distance(z, lengths)
        d = self.denormalize(x, lengths)
        off_diagonal = 1.0 - np.eye(self.n_max)
        return (d + d.transpose(0, 2, 1)) * (0.5 * off_diagonal), lengths


def dequantize(s: np.ndarray, lengths, scale: float, rng) -> np.ndarray:
    noise = rng.uniform(0.0, scale, size=s.shape)
    return s + noise * node_mask(lengths, s.shape[1])[:, :, None]


def forward(model: FlowModel, batch: LoopBatch, rng=None, noise: np.ndarray | None = None):
    """Encode a batch. Returns ``(z_d, z_s, logdet_d, logdet_s)`` as tensors.

    ``noise`` overrides the dequantization noise (same shape as ``batch.s``).
    """
    lengths = batch.lengths
    if batch.d.shape[1] != model.n_max:
        raise CapacityError(f"batch is padded to {batch.d.shape[1]}, model expects {model.n_max}")
    if noise is None:
        s_cont = dequantize(batch.s, lengths, model.config.dequant_scale, check_rng(rng))
    else:
        s_cont = batch.s + noise * node_mask(lengths, model.n_max)[:, :, None]
    x = Tensor(model.normalize(batch.d, lengths))
    z_d, logdet_d = model.forward_distance(x, lengths)
    z_s, logdet_s = model.forward_amino(Tensor(s_cont), model.adjacency(batch.d, lengths), lengths)
    return z_d, z_s, logdet_d, logdet_s


def gaussian_log_prob(z: Tensor, valid: np.ndarray) -> Tensor:
    """Standard-normal log density summed over the valid entries of each sample."""
    count = valid.reshape(valid.shape[0], -1).sum(axis=1)
    quad = (ad.square(z) * valid).sum(axis=(1, 2))
    return quad * -0.5 - Tensor(0.5 * LOG_2PI * count)


def log_likelihood(model: FlowModel, batch: LoopBatch, rng=None, noise=None, parts: bool = False):
    """Per-sample exact log-density of (standardized D, dequantized S).

    With ``parts`` the distance and residue contributions are returned separately.
    """
    z_d, z_s, logdet_d, logdet_s = forward(model, batch, rng=rng, noise=noise)
    lengths = batch.lengths
    ll_d = gaussian_log_prob(z_d, model.pair_mask(lengths)) + logdet_d
    s_valid = np.broadcast_to(node_mask(lengths, model.n_max)[:, :, None], z_s.shape)
    ll_s = gaussian_log_prob(z_s, s_valid) + logdet_s
    if parts:
        return ll_d, ll_s
    return ll_d + ll_s


@dataclass
class GeneratedLoop:
    id: str
    sequence: str
    distances: np.ndarray
    logits: np.ndarray
    coords: np.ndarray | None = None

    @property
    def length(self) -> int:
        return len(self.sequence)

    def to_loop(self) -> CdrLoop:
        return CdrLoop(id=self.id, sequence=self.sequence, coords=self.coords)


GENERATED_FORMAT = "cdrflow-generated"
GENERATED_VERSION = 1


def save_generated(loops, path, loop_class: str) -> None:
    """Line-delimited JSON: a header, then one record per generated loop.

    Records hold ``id``, ``sequence``, the flattened distance matrix and,
    when present, flattened coordinates.
    """
    header = {"format": GENERATED_FORMAT, "version": GENERATED_VERSION, "loop_class": loop_class}
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for g in loops:
            rec = {
                "id": g.id,
                "sequence": g.sequence,
                "distances": [float(v) for v in np.asarray(g.distances).reshape(-1)],
                "coords": None if g.coords is None else [float(v) for v in np.asarray(g.coords).reshape(-1)],
            }
            fh.write(json.dumps(rec) + "\n")


def load_generated(path) -> tuple[str, list]:
    """Returns ``(loop_class, loops)``; logits are not stored and come back empty."""
    with open(path) as fh:
        lines = [line for line in fh.read().splitlines() if line.strip()]
    try:
        header = json.loads(lines[0]) if lines else {}
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: header is not JSON ({exc})") from None
    if header.get("format") != GENERATED_FORMAT or header.get("version") != GENERATED_VERSION:
        raise SchemaError(f"{path}: not a {GENERATED_FORMAT} v{GENERATED_VERSION} file")
    out = []
    for index, line in enumerate(lines[1:]):
        try:
            rec = json.loads(line)
            n = len(rec["sequence"])
            d = np.asarray(rec["distances"], dtype=np.float64).reshape(n, n)
            coords = rec.get("coords")
            coords = None if coords is None else np.asarray(coords, dtype=np.float64).reshape(n, 3)
            out.append(GeneratedLoop(id=str(rec["id"]), sequence=rec["sequence"], distances=d,
                                     logits=np.zeros((n, 0)), coords=coords))
        except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
            raise SchemaError(str(exc), index) from None
    return header.get("loop_class", "H3"), out


def postprocess_distances(raw: np.ndarray, lengths) -> np.ndarray:
    """Symmetrize, zero the diagonal, clamp negatives and blank the padding."""
    d = symmetrize_distances(np.asarray(raw, dtype=np.float64))
    n = d.shape[-1]
    m = node_mask(lengths, n)
    return d * m[:, :, None] * m[:, None, :]


def inverse(model: FlowModel, latent: LatentPair, id_prefix: str = "gen") -> list[GeneratedLoop]:
    """Decode latents into distance matrices and argmax-decoded sequences."""
    z_d = np.asarray(latent.z_d, dtype=np.float64)
    z_s = np.asarray(latent.z_s, dtype=np.float64)
    n = model.n_max
    if z_d.ndim == 2:
        z_d, z_s = z_d[None], z_s[None]
    if z_d.shape[1:] != (n, n) or z_s.shape[1:] != (n, len(AMINO_ACIDS)) or z_d.shape[0] != z_s.shape[0]:
        raise DimensionError(f"latent shapes {z_d.shape}, {z_s.shape} do not match model n_max={n}")
    lengths = np.full(z_d.shape[0], n) if latent.lengths is None else np.asarray(latent.lengths, dtype=int)
    with ad.no_grad():
        x = model.inverse_distance(Tensor(z_d * model.pair_mask(lengths)), lengths)
        d = postprocess_distances(model.denormalize(x.data, lengths), lengths)
        s_mask = node_mask(lengths, n)[:, :, None]
        logits = model.inverse_amino(Tensor(z_s * s_mask), model.adjacency(d, lengths), lengths).data
    out = []
    for i, length in enumerate(lengths):
        seq = "".join(AMINO_ACIDS[j] for j in np.argmax(logits[i, :length], axis=-1))
        out.append(GeneratedLoop(id=f"{id_prefix}{i:05d}", sequence=seq,
                                 distances=d[i, :length, :length].copy(), logits=logits[i, :length].copy()))
    return out


def encode(model: FlowModel, loops, noise_seed=0) -> LatentPair:
    """Latents of ``loops`` (inference mode, seeded dequantization noise)."""
    batch = make_batch(loops, model.n_max)
    with ad.no_grad():
        z_d, z_s, _, _ = forward(model, batch, rng=np.random.default_rng(noise_seed))
    return LatentPair(z_d=z_d.data, z_s=z_s.data, lengths=batch.lengths)


def sample(model: FlowModel, count: int, rng=None, id_prefix: str = "gen") -> list[GeneratedLoop]:
    """Draw latents from the standard normal prior and decode them."""
    rng = check_rng(rng)
    lengths = model.sample_lengths(count, rng)
    n = model.n_max
    z_d = rng.standard_normal((count, n, n))
    z_s = rng.standard_normal((count, n, len(AMINO_ACIDS)))
    return inverse(model, LatentPair(z_d=z_d, z_s=z_s, lengths=lengths), id_prefix=id_prefix)


def interpolate(model: FlowModel, loop_a: CdrLoop, loop_b: CdrLoop, steps: int, noise_seed=0):
    """Decode ``(1 - t) z_a + t z_b`` for ``t = 0, 1/steps, ..., 1``."""
    if steps < 1:
        raise ContractError("steps must be >= 1")
    if loop_a.length != loop_b.length:
        raise ContractError(f"interpolation needs equal lengths, got {loop_a.length} and {loop_b.length}")
    lat = encode(model, [loop_a, loop_b], noise_seed=noise_seed)
    ts = np.arange(steps + 1) / steps
    z_d = (1 - ts)[:, None, None] * lat.z_d[0] + ts[:, None, None] * lat.z_d[1]
    z_s = (1 - ts)[:, None, None] * lat.z_s[0] + ts[:, None, None] * lat.z_s[1]
    lengths = np.full(steps + 1, loop_a.length)
    return ts, inverse(model, LatentPair(z_d=z_d, z_s=z_s, lengths=lengths), id_prefix="interp")


# -- checkpoints -------------------------------------------------------------
def _encode_array(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _decode_array(obj: dict) -> np.ndarray:
    raw = base64.b64decode(obj["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(obj["shape"]).astype(np.float64)


def save_checkpoint(model: FlowModel, path, extra: dict | None = None) -> None:
    """Write hyperparameters, parameters, buffers and data statistics as JSON.

    Arrays are stored as little-endian float64 bytes (base64), so reloading
    reproduces every value exactly and identical models give identical files.
    """
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "loop_class": model.loop_class,
        "config": asdict(model.config),
        "validity": model.validity.to_dict(),
        "normalization": {
            "d_mean": _encode_array(model.d_mean),
            "d_std": _encode_array(model.d_std),
            "length_counts": _encode_array(model.length_counts),
        },
        "state": {name: _encode_array(v) for name, v in sorted(model.state_dict().items())},
        "extra": extra or {},
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True))


def load_checkpoint(path) -> FlowModel:
    try:
        payload = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {payload.get('version')!r}")
    try:
        config = FlowConfig(**payload["config"])
        model = FlowModel(config, ValiditySpec(**payload["validity"]), payload["loop_class"])
        norm = payload["normalization"]
        model.d_mean = _decode_array(norm["d_mean"])
        model.d_std = _decode_array(norm["d_std"])
        model.length_counts = _decode_array(norm["length_counts"])
        model.load_state_dict({k: _decode_array(v) for k, v in payload["state"].items()})
    except CheckpointError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from None
    model.eval()
    return model


def checkpoint_extra(path) -> dict:
    return json.loads(Path(path).read_text()).get("extra", {})
