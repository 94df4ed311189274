"""Evaluation metrics for generated loops."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import AMINO_ACIDS
from .exceptions import AlphabetError, ContractError, DomainError
from .geometry import ValiditySpec, check_validity, rmsd

BOS = "^"
EOS = "$"


class NGramLM:
    """Additively smoothed n-gram model over the residue alphabet.

    Contexts are left-padded with ``order - 1`` begin markers and every
    sequence ends with an end marker, which is predicted like any residue.
    Each conditional distribution covers the 20 residues plus the end
    marker.
    """

    name = "ngram"

    def __init__(self, order: int = 3, alpha: float = 0.1):
        if order < 1:
            raise ContractError("order must be >= 1")
        if alpha < 0:
            raise ContractError("alpha must be nonnegative")
        self.order = order
        self.alpha = alpha
        self.symbols = tuple(AMINO_ACIDS) + (EOS,)
        self.context_counts: Counter = Counter()
        self.ngram_counts: Counter = Counter()

    def _events(self, sequence: str):
        _check_sequence(sequence)
        padded = BOS * (self.order - 1) + sequence + EOS
        for t in range(self.order - 1, len(padded)):
            yield padded[t - self.order + 1:t], padded[t]

    def fit(self, sequences) -> "NGramLM":
        self.context_counts.clear()
        self.ngram_counts.clear()
        for seq in sequences:
            for context, symbol in self._events(seq):
                self.context_counts[context] += 1
                self.ngram_counts[context, symbol] += 1
        return self

    def prob(self, context: str, symbol: str) -> float:
        context = context[-(self.order - 1):] if self.order > 1 else ""
        numerator = self.ngram_counts[context, symbol] + self.alpha
        denominator = self.context_counts[context] + self.alpha * len(self.symbols)
        if denominator == 0:
            raise DomainError(f"context {context!r} never seen and smoothing is zero")
        return numerator / denominator

    def log_prob(self, sequence: str) -> tuple[float, int]:
        """Total natural-log probability and the number of predicted symbols."""
        total, count = 0.0, 0
        for context, symbol in self._events(sequence):
            p = self.prob(context, symbol)
            if p <= 0:
                raise DomainError(f"symbol {symbol!r} has zero probability after {context!r}")
            total += math.log(p)
            count += 1
        return total, count


class UniformLM:
    """Every residue equally likely, no end marker."""

    name = "uniform"

    def fit(self, sequences=()) -> "UniformLM":
        return self

    def log_prob(self, sequence: str) -> tuple[float, int]:
        _check_sequence(sequence)
        return -len(sequence) * math.log(len(AMINO_ACIDS)), len(sequence)

    def perplexity(self, sequence: str) -> float:
        # closed form; exp(-log 20) would round to 19.999999999999996
        _check_sequence(sequence)
        return float(len(AMINO_ACIDS))


def _check_sequence(sequence: str) -> None:
    if not sequence:
        raise ContractError("sequence must be nonempty")
    bad = sorted(set(sequence) - set(AMINO_ACIDS))
    if bad:
        raise AlphabetError(f"symbols outside the residue alphabet: {bad}")


def perplexity(lm, sequence: str) -> float:
    """``exp`` of the mean negative log-probability per predicted symbol."""
    if hasattr(lm, "perplexity"):
        return lm.perplexity(sequence)
    total, count = lm.log_prob(sequence)
    return math.exp(-total / count)


@dataclass
class RmsdSummary:
    mean: float
    std: float
    matched: int
    unmatched: int
    per_test: list = field(default_factory=list)


def rmsd_protocol(generated, test, allow_reflection: bool = False) -> RmsdSummary:
    """For every test loop, the smallest RMSD to an equal-length generated loop.

    Test loops with no equal-length partner are counted as unmatched and
    left out of the mean and standard deviation.
    """
    generated = [np.asarray(g, dtype=np.float64) for g in generated]
    test = [np.asarray(t, dtype=np.float64) for t in test]
    if not generated or not test:
        raise ContractError("rmsd_protocol needs nonempty generated and test sets")
    best = []
    unmatched = 0
    for t in test:
        candidates = [rmsd(t, g, allow_reflection=allow_reflection) for g in generated if g.shape == t.shape]
        if candidates:
            best.append(min(candidates))
        else:
            unmatched += 1
    if not best:
        return RmsdSummary(mean=float("nan"), std=float("nan"), matched=0, unmatched=unmatched)
    return RmsdSummary(mean=float(np.mean(best)), std=float(np.std(best)), matched=len(best),
                       unmatched=unmatched, per_test=best)


def validity_rate(distance_matrices, spec: ValiditySpec) -> float:
    matrices = list(distance_matrices)
    if not matrices:
        raise ContractError("validity_rate needs at least one matrix")
    return sum(check_validity(d, spec).valid for d in matrices) / len(matrices)


def lcs_length(s1: str, s2: str) -> int:
    """Longest common subsequence length by dynamic programming."""
    previous = [0] * (len(s2) + 1)
    for a in s1:
        current = [0]
        for j, b in enumerate(s2):
            current.append(previous[j] + 1 if a == b else max(previous[j + 1], current[j]))
        previous = current
    return previous[-1]


def similarity(s1: str, s2: str) -> float:
    if not s1 or not s2:
        raise ContractError("similarity needs nonempty sequences")
    return lcs_length(s1, s2) / max(len(s1), len(s2))


def diversity(sequences) -> float:
    """One minus the mean similarity over ordered pairs of distinct positions."""
    sequences = list(sequences)
    if len(sequences) < 2:
        raise ContractError("diversity needs at least two sequences")
    # similarity is symmetric, so unordered pairs give the same mean
    sims = [similarity(a, b) for i, a in enumerate(sequences) for b in sequences[i + 1:]]
    return 1.0 - float(np.mean(sims))


@dataclass
class EvalReport:
    sample_count: int
    validity_rate: float
    diversity: float | None
    ppl_mean: float | None = None
    ppl_std: float | None = None
    rmsd_mean: float | None = None
    rmsd_std: float | None = None
    rmsd_unmatched: int | None = None
    language_model: str = "ngram(order=3, alpha=0.1)"

    def __post_init__(self):
        if not 0.0 <= self.validity_rate <= 1.0:
            raise ContractError("validity rate must lie in [0, 1]")
        if self.diversity is not None and not -1e-12 <= self.diversity <= 1.0 + 1e-12:
            raise ContractError("diversity must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def to_text(self) -> str:
        def fmt(mean, std):
            return "n/a" if mean is None else f"{mean:.4f} +/- {std:.4f}"
        lines = [
            f"samples       {self.sample_count}",
            f"perplexity    {fmt(self.ppl_mean, self.ppl_std)}  [{self.language_model}]",
            f"rmsd          {fmt(self.rmsd_mean, self.rmsd_std)}"
            + ("" if self.rmsd_unmatched is None else f"  (unmatched test loops: {self.rmsd_unmatched})"),
            f"validity rate {self.validity_rate:.4f}",
            f"diversity     {'n/a' if self.diversity is None else f'{self.diversity:.4f}'}",
        ]
        return "\n".join(lines)


def evaluate(generated_sequences, generated_distances, spec: ValiditySpec, lm=None,
             generated_coords=None, test_coords=None) -> EvalReport:
    """Assemble an :class:`EvalReport`; optional parts are skipped when inputs are missing."""
    sequences = list(generated_sequences)
    report = EvalReport(
        sample_count=len(sequences),
        validity_rate=validity_rate(generated_distances, spec),
        diversity=diversity(sequences) if len(sequences) >= 2 else None,
    )
    if lm is not None:
        ppl = [perplexity(lm, s) for s in sequences]
        report.ppl_mean, report.ppl_std = float(np.mean(ppl)), float(np.std(ppl))
        if isinstance(lm, NGramLM):
            report.language_model = f"ngram(order={lm.order}, alpha={lm.alpha})"
        else:
            report.language_model = getattr(lm, "name", type(lm).__name__)
    if generated_coords is not None and test_coords is not None:
        summary = rmsd_protocol(generated_coords, test_coords)
        report.rmsd_mean, report.rmsd_std, report.rmsd_unmatched = summary.mean, summary.std, summary.unmatched
    return report
