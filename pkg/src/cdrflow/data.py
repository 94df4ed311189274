"""Loop records, PDB alpha-carbon ingestion, synthetic loops and dataset files.

Dataset files are line-delimited JSON. The first line is a header::

    {"format": "cdrflow-dataset", "version": 1, "loop_class": "H3"}

followed by one object per loop::

    {"id": "...", "split": "train", "sequence": "ARDY...", "coords": [x1, y1, z1, x2, ...]}

``coords`` is optional (null when absent) and is stored at full double
precision; ``split`` is one of ``train``, ``validation``, ``test`` or null.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import AlphabetError, ContractError, GapError, ParseError, SchemaError, SynthesisError
from .geometry import ValiditySpec, check_validity, distance_matrix
from .validation import check_coordinates, check_rng

AMINO_ACIDS = "ACDEFGHIKLMNPQRSTVWY"
AA_INDEX = {aa: i for i, aa in enumerate(AMINO_ACIDS)}
THREE_TO_ONE = {
    "ALA": "A", "CYS": "C", "ASP": "D", "GLU": "E", "PHE": "F",
    "GLY": "G", "HIS": "H", "ILE": "I", "LYS": "K", "LEU": "L",
    "MET": "M", "ASN": "N", "PRO": "P", "GLN": "Q", "ARG": "R",
    "SER": "S", "THR": "T", "VAL": "V", "TRP": "W", "TYR": "Y",
}
SPLITS = ("train", "validation", "test")
DATASET_FORMAT = "cdrflow-dataset"
DATASET_VERSION = 1


@dataclass
class CdrLoop:
    """One CDR loop: sequence over the 20 canonical residues plus optional CA coordinates."""

    id: str
    sequence: str
    coords: np.ndarray | None = None
    split: str | None = None

    def __post_init__(self):
        self.sequence = str(self.sequence).upper()
        bad = sorted(set(self.sequence) - set(AMINO_ACIDS))
        if bad:
            raise AlphabetError(f"loop {self.id!r}: letters outside the 20-letter alphabet: {bad}")
        if len(self.sequence) < 2:
            raise ContractError(f"loop {self.id!r}: needs at least 2 residues")
        if self.coords is not None:
            self.coords = check_coordinates(self.coords, f"coords of {self.id!r}")
            if self.coords.shape[0] != len(self.sequence):
                raise ContractError(
                    f"loop {self.id!r}: {len(self.sequence)} residues but {self.coords.shape[0]} coordinates")
        if self.split is not None and self.split not in SPLITS:
            raise ContractError(f"loop {self.id!r}: unknown split {self.split!r}")

    @property
    def length(self) -> int:
        return len(self.sequence)

    def distance_matrix(self) -> np.ndarray:
        if self.coords is None:
            raise ContractError(f"loop {self.id!r} has no coordinates")
        return distance_matrix(self.coords)

    def one_hot(self) -> np.ndarray:
        return one_hot(self.sequence)


def one_hot(sequence: str) -> np.ndarray:
    out = np.zeros((len(sequence), len(AMINO_ACIDS)))
    out[np.arange(len(sequence)), [AA_INDEX[c] for c in sequence]] = 1.0
    return out


def decode_one_hot(matrix) -> str:
    return "".join(AMINO_ACIDS[i] for i in np.argmax(np.asarray(matrix), axis=-1))


# -- PDB ---------------------------------------------------------------------
@dataclass(frozen=True)
class PdbRecord:
    chain: str
    res_seq: int
    res_name: str
    atom_name: str
    x: float
    y: float
    z: float


def parse_pdb(text: str) -> list[PdbRecord]:
    """Alpha-carbon ATOM records from PDB fixed-column text.

    Only the first model is read. Alternate locations other than blank/``A``
    and residues with insertion codes are skipped.
    """
    records = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        tag = line[:6]
        if tag == "ENDMDL":
            break
        if tag != "ATOM  ":
            continue
        if line[12:16].strip() != "CA":
            continue
        if line[16:17] not in (" ", "A", ""):
            continue
        if line[26:27].strip():
            continue
        if len(line) < 54:
            raise ParseError("record truncated inside the coordinate columns", lineno)
        try:
            res_seq = int(line[22:26])
            xyz = [float(line[30:38]), float(line[38:46]), float(line[46:54])]
        except ValueError as exc:
            raise ParseError(f"malformed numeric field ({exc})", lineno) from None
        records.append(PdbRecord(
            chain=line[21:22], res_seq=res_seq, res_name=line[17:20].strip(),
            atom_name="CA", x=xyz[0], y=xyz[1], z=xyz[2],
        ))
    return records


def render_pdb(records) -> str:
    """Write CA records back out in fixed-column layout (3-decimal coordinates)."""
    lines = []
    for serial, r in enumerate(records, start=1):
        lines.append(
            f"ATOM  {serial:5d}  CA  {r.res_name:>3s} {r.chain:1s}{r.res_seq:4d}    "
            f"{r.x:8.3f}{r.y:8.3f}{r.z:8.3f}  1.00  0.00           C"
        )
    lines.append("END")
    return "\n".join(lines) + "\n"


def extract_cdr(records, chain: str, residue_range, three_to_one=THREE_TO_ONE, loop_id: str | None = None) -> CdrLoop:
    """Slice the residues ``start..end`` (inclusive) of ``chain`` into a loop."""
    start, end = (int(v) for v in residue_range)
    if end < start:
        raise ContractError(f"empty residue range {start}..{end}")
    by_number = {}
    for r in records:
        if r.chain == chain and start <= r.res_seq <= end:
            by_number.setdefault(r.res_seq, r)
    missing = [n for n in range(start, end + 1) if n not in by_number]
    if missing:
        raise GapError(missing)
    letters, coords = [], []
    for n in range(start, end + 1):
        r = by_number[n]
        if r.res_name not in three_to_one:
            raise AlphabetError(f"residue {r.res_name!r} at {chain}{n} is not a canonical amino acid")
        letters.append(three_to_one[r.res_name])
        coords.append((r.x, r.y, r.z))
    return CdrLoop(id=loop_id or f"{chain}{start}-{end}", sequence="".join(letters), coords=np.array(coords))


# -- synthetic loops ---------------------------------------------------------
def synthesize_loop(spec: ValiditySpec, n: int, rng=None, loop_id: str | None = None,
                    max_restarts: int = 200, persistence: float = 0.6) -> CdrLoop:
    """Random open chain that satisfies ``spec``, with a random sequence.

    The chain is grown one residue at a time as a persistent random walk.
    Each candidate step must keep the end-to-end window reachable with the
    remaining steps and keep non-bonded residues at least 3 A apart; bond
    lengths and the final end-to-end distance are drawn strictly inside the
    windows.
    """
    rng = check_rng(rng)
    if n < 2:
        raise ContractError("synthetic loops need n >= 2")
    bond_lo = spec.eta1 + 0.02 * spec.eta3
    bond_hi = spec.eta2 - 0.02 * spec.eta3
    end_lo = spec.eps1 + 0.02 * spec.eps3
    end_hi = spec.eps2 - 0.02 * spec.eps3
    if n == 2 and (bond_hi < end_lo or bond_lo > end_hi):
        raise SynthesisError(f"n=2 needs the bond window {spec.eta1}-{spec.eta2} to meet the loop window "
                             f"{spec.eps1}-{spec.eps2}")
    if (n - 1) * bond_hi < end_lo:
        raise SynthesisError(f"{n - 1} bonds of at most {spec.eta2} A cannot span {spec.eps1} A")

    for _ in range(max_restarts):
        coords = _grow_chain(spec, n, rng, bond_lo, bond_hi, end_lo, end_hi, persistence)
        if coords is not None and check_validity(distance_matrix(coords), spec).valid:
            sequence = "".join(rng.choice(list(AMINO_ACIDS), size=n))
            return CdrLoop(id=loop_id or f"synthetic-{n}", sequence=sequence, coords=coords)
    raise SynthesisError(f"no valid chain of length {n} after {max_restarts} restarts for {spec}")


def _grow_chain(spec, n, rng, bond_lo, bond_hi, end_lo, end_hi, persistence, tries: int = 200):
    points = [np.zeros(3)]
    direction = _unit(rng.normal(size=3))
    reach = 0.85 * bond_hi
    for k in range(1, n):
        remaining = n - 1 - k
        for _ in range(tries):
            step_dir = _unit(persistence * direction + (1 - persistence) * _unit(rng.normal(size=3)) * 1.5)
            if n == 2:
                length = rng.uniform(max(bond_lo, end_lo), min(bond_hi, end_hi))
            else:
                length = rng.uniform(bond_lo, bond_hi)
            cand = points[-1] + length * step_dir
            dist0 = float(np.linalg.norm(cand))
            if remaining == 0:
                ok = end_lo <= dist0 <= end_hi
            else:
                ok = dist0 - remaining * reach <= end_hi - 0.5 and dist0 + remaining * reach >= end_lo + 0.5
            if ok and len(points) >= 2:
                others = np.asarray(points[:-1])
                ok = bool(np.all(np.linalg.norm(others - cand, axis=1) >= 3.0)) or (remaining == 0 and n <= 3)
            if ok:
                points.append(cand)
                direction = step_dir
                break
        else:
            return None
    return np.asarray(points)


def _unit(v):
    return v / np.linalg.norm(v)


# -- datasets ----------------------------------------------------------------
@dataclass
class Dataset:
    loops: list = field(default_factory=list)
    loop_class: str = "H3"

    def split(self, name: str) -> list:
        if name not in SPLITS:
            raise ContractError(f"unknown split {name!r}")
        return [loop for loop in self.loops if loop.split == name]

    def assign_splits(self, ratios=(8, 1, 1), seed=0) -> "Dataset":
        """Randomly partition the loops into train/validation/test (in place)."""
        ratios = np.asarray(ratios, dtype=float)
        if ratios.shape != (3,) or np.any(ratios < 0) or ratios.sum() <= 0:
            raise ContractError(f"split ratios must be three nonnegative numbers, got {ratios}")
        n = len(self.loops)
        order = np.random.default_rng(seed).permutation(n)
        n_val = int(math.floor(n * ratios[1] / ratios.sum()))
        n_test = int(math.floor(n * ratios[2] / ratios.sum()))
        labels = ["validation"] * n_val + ["test"] * n_test + ["train"] * (n - n_val - n_test)
        for idx, label in zip(order, labels):
            self.loops[idx].split = label
        return self


def synthetic_dataset(loop_class: str = "H3", count: int = 100, lengths=(8,), seed=0,
                      spec: ValiditySpec | None = None, ratios=(8, 1, 1)) -> Dataset:
    """Dataset of synthetic valid loops with lengths drawn uniformly from ``lengths``."""
    spec = spec or ValiditySpec.for_class(loop_class)
    rng = np.random.default_rng(seed)
    loops = []
    for i in range(count):
        n = int(rng.choice(np.asarray(lengths)))
        loops.append(synthesize_loop(spec, n, rng, loop_id=f"syn{i:05d}"))
    return Dataset(loops=loops, loop_class=loop_class).assign_splits(ratios, seed=seed)


def loop_to_record(loop: CdrLoop) -> dict:
    return {
        "id": loop.id,
        "split": loop.split,
        "sequence": loop.sequence,
        "coords": None if loop.coords is None else [float(v) for v in loop.coords.reshape(-1)],
    }


def save_dataset(dataset: Dataset, path) -> None:
    header = {"format": DATASET_FORMAT, "version": DATASET_VERSION, "loop_class": dataset.loop_class}
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for loop in dataset.loops:
            fh.write(json.dumps(loop_to_record(loop)) + "\n")


def load_dataset(path) -> Dataset:
    path = Path(path)
    with open(path) as fh:
        lines = [line for line in fh.read().splitlines() if line.strip()]
    if not lines:
        raise SchemaError(f"{path}: empty file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: header is not JSON ({exc})") from None
    if header.get("format") != DATASET_FORMAT:
        raise SchemaError(f"{path}: not a {DATASET_FORMAT} file")
    if header.get("version") != DATASET_VERSION:
        raise SchemaError(f"{path}: unsupported version {header.get('version')!r}")
    loops = []
    for index, line in enumerate(lines[1:]):
        try:
            rec = json.loads(line)
            coords = rec.get("coords")
            seq = rec["sequence"]
            if coords is not None:
                coords = np.asarray(coords, dtype=np.float64)
                if coords.size != 3 * len(seq):
                    raise SchemaError(f"{len(seq)} residues but {coords.size / 3:g} coordinate triples", index)
                coords = coords.reshape(-1, 3)
            loops.append(CdrLoop(id=str(rec["id"]), sequence=seq, coords=coords, split=rec.get("split")))
        except SchemaError:
            raise
        except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
            raise SchemaError(str(exc), index) from None
    return Dataset(loops=loops, loop_class=header.get("loop_class", "H3"))
