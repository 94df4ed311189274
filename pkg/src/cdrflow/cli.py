"""``cdrflow`` command-line interface.

Every command that writes ``--out PATH`` also writes ``PATH.manifest.json``
describing the run: the parsed arguments, a snapshot of the resolved
configuration, the seed, SHA-256 digests of inputs and outputs, the tool
version and the wall time. ``cdrflow rerun MANIFEST`` repeats the run into
a scratch directory and checks that every output is byte-identical.

Exit status: 0 success, 2 usage, 3 configuration, 4 data, 5 numeric,
6 rerun mismatch.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import tempfile
import time
from itertools import product
from pathlib import Path

import numpy as np

from . import __version__, flow
from .config import RunConfig, apply_overrides, config_from_dict, load_config
from .data import Dataset, extract_cdr, load_dataset, parse_pdb, save_dataset, synthetic_dataset
from .embed3d import embed
from .geometry import distance_matrix
from .exceptions import (AlphabetError, CapacityError, CheckpointError, ContractError, DimensionError,
                         DomainError, EmptySplitError, GapError, NumericError, ParseError, SchemaError,
                         SynthesisError)
from .metrics import NGramLM, evaluate as evaluate_metrics, validity_rate
from .training import train

logger = logging.getLogger("cdrflow")

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_MISMATCH = 0, 2, 3, 4, 5, 6
MANIFEST_FORMAT = "cdrflow-manifest"
MANIFEST_VERSION = 1

# argument names that hold output paths, per command; rerun redirects these
OUTPUT_ARGS = ("out",)
INPUT_ARGS = ("config", "dataset", "checkpoint", "input", "grid")


class DataFileError(Exception):
    """An input file is missing or unreadable."""


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _require(path, what: str) -> Path:
    if path is None:
        raise ContractError(f"--{what} is required")
    p = Path(path)
    if not p.is_file():
        raise DataFileError(f"{what} not found: {p}")
    return p


def _resolve_config(args) -> tuple[RunConfig, int]:
    config = load_config(args.config)
    seed = args.seed if getattr(args, "seed", None) is not None else config.train.seed
    return config.with_seed(seed), seed


class Run:
    """Collects manifest fields while a command executes."""

    def __init__(self, command: str, args):
        self.command = command
        self.args = {k: v for k, v in vars(args).items() if k != "handler"}
        self.outputs: dict[str, str] = {}
        self.extra: dict = {}
        self.config: dict | None = None
        self.seed = None
        self.started = time.perf_counter()

    def output(self, role: str, path) -> Path:
        self.outputs[role] = str(path)
        return Path(path)

    def write_manifest(self, out) -> Path:
        inputs = {}
        for name in INPUT_ARGS:
            value = self.args.get(name)
            if value is not None and Path(value).is_file():
                inputs[name] = {"path": str(value), "sha256": _sha256(value)}
        manifest = {
            "format": MANIFEST_FORMAT,
            "version": MANIFEST_VERSION,
            "command": self.command,
            "arguments": self.args,
            "config": self.config,
            "seed": self.seed,
            "inputs": inputs,
            "outputs": {role: {"path": p, "sha256": _sha256(p)} for role, p in sorted(self.outputs.items())},
            "tool_version": __version__,
            "wall_time": time.perf_counter() - self.started,
            "extra": self.extra,
        }
        path = Path(f"{out}.manifest.json")
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=_jsonable))
        return path


def _jsonable(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"cannot serialize {type(value).__name__}")


# -- commands ----------------------------------------------------------------
def cmd_synth(args, run: Run) -> int:
    config, seed = _resolve_config(args)
    run.config, run.seed = config.to_dict(), seed
    count = args.count if args.count is not None else config.data.count
    dataset = synthetic_dataset(config.loop_class, count, config.data.lengths, seed=seed,
                                spec=config.validity, ratios=config.data.ratios)
    save_dataset(dataset, run.output("dataset", args.out))
    run.extra["splits"] = {name: len(dataset.split(name)) for name in ("train", "validation", "test")}
    return EXIT_OK


def cmd_ingest(args, run: Run) -> int:
    config, seed = _resolve_config(args)
    run.config, run.seed = config.to_dict(), seed
    if not config.data.ingest:
        raise ContractError("data.ingest lists no files")
    base = Path(args.config).parent if args.config else Path(".")
    loops = []
    for i, entry in enumerate(config.data.ingest):
        path = Path(entry["file"])
        path = (path if path.is_absolute() else base / path).resolve()
        # the snapshot lives elsewhere on rerun, so it must not hold config-relative paths
        run.config["data"]["ingest"][i]["file"] = str(path)
        text = _require(path, "PDB file").read_text()
        run.extra.setdefault("pdb_sha256", {})[str(path)] = _sha256(path)
        loop = extract_cdr(parse_pdb(text), entry["chain"], (entry["start"], entry["end"]),
                           loop_id=entry.get("id") or f"{path.stem}:{entry['chain']}{entry['start']}-{entry['end']}")
        loops.append(loop)
    dataset = Dataset(loops=loops, loop_class=config.loop_class).assign_splits(config.data.ratios, seed=seed)
    save_dataset(dataset, run.output("dataset", args.out))
    return EXIT_OK


def cmd_train(args, run: Run) -> int:
    config, seed = _resolve_config(args)
    run.config, run.seed = config.to_dict(), seed
    dataset = load_dataset(_require(args.dataset, "dataset"))
    _check_class(dataset.loop_class, config.loop_class, "dataset", "config")
    train_loops = dataset.split("train")
    if not train_loops:
        raise EmptySplitError(f"{args.dataset} has no training loops")
    model = flow.FlowModel(config.model, config.validity, config.loop_class)
    model, log = train(model, train_loops, config.train, dataset.split("validation"))
    flow.save_checkpoint(model, run.output("checkpoint", args.out), extra={"train": config.train.to_dict()})
    log.write(run.output("log", f"{args.out}.log.jsonl"), include_timing=False)
    run.extra["epoch_wall_time"] = [r.wall_time for r in log.records]
    run.extra["final_train_nll"] = log.records[-1].train_nll
    return EXIT_OK


def _load_model(path) -> flow.FlowModel:
    return flow.load_checkpoint(_require(path, "checkpoint"))


def _embed_all(loops, spec, embed_config):
    results = []
    for g in loops:
        result = embed(g.distances, spec, embed_config)
        g.coords = result.coords
        results.append(result)
    return results


def cmd_generate(args, run: Run) -> int:
    model = _load_model(args.checkpoint)
    config, seed = _resolve_config(args)
    run.config, run.seed = config.to_dict(), seed
    count = args.count if args.count is not None else 100
    loops = flow.sample(model, count, rng=np.random.default_rng(seed))
    run.extra["distance_validity_rate"] = validity_rate([g.distances for g in loops], model.validity)
    if args.embed:
        results = _embed_all(loops, model.validity, config.embed)
        run.extra["embedded_validity_rate"] = float(np.mean([r.valid for r in results]))
    flow.save_generated(loops, run.output("generated", args.out), model.loop_class)
    return EXIT_OK


def cmd_embed(args, run: Run) -> int:
    loop_class, loops = flow.load_generated(_require(args.input, "input"))
    config, seed = _resolve_config(args)
    run.config, run.seed = config.to_dict(), seed
    _check_class(loop_class, config.loop_class, "input", "config")
    results = _embed_all(loops, config.validity, config.embed)
    run.extra["embedded_validity_rate"] = float(np.mean([r.valid for r in results])) if results else None
    flow.save_generated(loops, run.output("generated", args.out), loop_class)
    return EXIT_OK


def _read_generated_or_sample(args, config_given: bool, config: RunConfig, seed: int):
    """Generated loops, their loop class and the validity thresholds to score them with."""
    path = _require(args.input, "input")
    with open(path) as fh:
        first = fh.readline()
    try:
        is_checkpoint = json.loads(first).get("format") == flow.CHECKPOINT_FORMAT
    except (json.JSONDecodeError, AttributeError):
        is_checkpoint = False
    if is_checkpoint:
        model = flow.load_checkpoint(path)
        count = args.count if args.count is not None else 100
        loops = flow.sample(model, count, rng=np.random.default_rng(seed))
        loop_class, spec = model.loop_class, model.validity
    else:
        loop_class, loops = flow.load_generated(path)
        spec = None
    if config_given:
        _check_class(loop_class, config.loop_class, "input", "config")
        spec = config.validity
    elif spec is None:
        spec = RunConfig(loop_class=loop_class).validity
    return loop_class, loops, spec


def _evaluate(args, raw_config: dict | None, seed: int, reembed: bool):
    config = (config_from_dict(raw_config) if raw_config is not None else RunConfig()).with_seed(seed)
    loop_class, loops, spec = _read_generated_or_sample(args, raw_config is not None, config, seed)
    if not loops:
        raise EmptySplitError(f"{args.input} contains no generated loops")
    dataset = load_dataset(_require(args.dataset, "dataset"))
    _check_class(dataset.loop_class, loop_class, "dataset", "input")

    test = dataset.split("test") or dataset.loops
    train_seqs = [loop.sequence for loop in dataset.split("train")] or [loop.sequence for loop in dataset.loops]
    lm = NGramLM(config.metrics.lm_order, config.metrics.lm_alpha).fit(train_seqs)

    if reembed or (args.embed and any(g.coords is None for g in loops)):
        _embed_all([g for g in loops if reembed or g.coords is None], spec, config.embed)
    coords = [g.coords for g in loops] if all(g.coords is not None for g in loops) else None
    test_coords = [loop.coords for loop in test if loop.coords is not None] or None
    # with coordinates available, validity is judged on the realized structures
    distances = [g.distances for g in loops] if coords is None else [distance_matrix(c) for c in coords]
    report = evaluate_metrics([g.sequence for g in loops], distances, spec, lm=lm,
                              generated_coords=coords, test_coords=test_coords if coords is not None else None)
    return config, report


def cmd_evaluate(args, run: Run) -> int:
    seed = args.seed if args.seed is not None else 0
    raw = json.loads(_require(args.config, "config").read_text()) if args.config else None
    if raw is not None:
        config_from_dict(raw)  # surface config errors before touching data
    config, report = _evaluate(args, raw, seed, args.reembed)
    run.config, run.seed = config.to_dict(), seed
    Path(run.output("report", args.out)).write_text(report.to_json() + "\n")
    print(report.to_text())
    return EXIT_OK


def cmd_interpolate(args, run: Run) -> int:
    model = _load_model(args.checkpoint)
    dataset = load_dataset(_require(args.dataset, "dataset"))
    _check_class(dataset.loop_class, model.loop_class, "dataset", "checkpoint")
    by_id = {loop.id: loop for loop in dataset.loops}
    for name in (args.loop_a, args.loop_b):
        if name not in by_id:
            raise DataFileError(f"loop {name!r} not found in {args.dataset}")
    seed = args.seed if args.seed is not None else 0
    run.seed = seed
    steps = args.steps if args.steps is not None else 10
    ts, loops = flow.interpolate(model, by_id[args.loop_a], by_id[args.loop_b], steps, noise_seed=seed)
    flow.save_generated(loops, run.output("generated", args.out), model.loop_class)
    run.extra["t"] = [float(t) for t in ts]
    return EXIT_OK


def cmd_sweep(args, run: Run) -> int:
    grid = json.loads(_require(args.grid, "grid").read_text())
    if not isinstance(grid, dict) or not grid or not all(isinstance(v, list) and v for v in grid.values()):
        raise ContractError("grid must map dotted config keys to nonempty lists of values")
    base = json.loads(_require(args.config, "config").read_text()) if args.config else {}
    seed = args.seed if args.seed is not None else 0
    run.seed = seed
    run.config = config_from_dict(base).to_dict()
    keys = sorted(grid)
    reembed = args.reembed or any(k.startswith("embed.") for k in keys)
    rows = []
    for values in product(*(grid[k] for k in keys)):
        cell = dict(zip(keys, values))
        row = {"cell": cell}
        try:
            _, report = _evaluate(args, apply_overrides(base, cell), seed, reembed)
            row["report"] = report.to_dict()
        except (ContractError, NumericError, SchemaError, SynthesisError, DomainError) as exc:
            row["error"] = f"{type(exc).__name__}: {exc}"
        rows.append(row)
        print(json.dumps(row, sort_keys=True))
    with open(run.output("table", args.out), "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    run.extra["cells"] = len(rows)
    run.extra["failed_cells"] = sum("error" in r for r in rows)
    return EXIT_OK


def cmd_rerun(args, run: Run) -> int:
    manifest = json.loads(_require(args.manifest, "manifest").read_text())
    if manifest.get("format") != MANIFEST_FORMAT:
        raise SchemaError(f"{args.manifest} is not a run manifest")
    recorded = manifest["arguments"]
    out_dir = Path(args.out_dir) if args.out_dir else Path(tempfile.mkdtemp(prefix="cdrflow-rerun-"))
    out_dir.mkdir(parents=True, exist_ok=True)
    argv = [manifest["command"]]
    replay = dict(recorded)
    if recorded.get("config") is not None and manifest.get("config") is not None:
        snapshot = out_dir / "config.snapshot.json"
        snapshot.write_text(json.dumps(manifest["config"]))
        replay["config"] = str(snapshot)
    if replay.get("seed") is None and manifest.get("seed") is not None:
        replay["seed"] = manifest["seed"]
    replay["out"] = str(out_dir / Path(recorded["out"]).name)
    argv += _to_argv(manifest["command"], replay)
    code = main(argv)
    if code != EXIT_OK:
        return code

    mismatched = []
    for role, entry in sorted(manifest["outputs"].items()):
        produced = out_dir / Path(entry["path"]).name
        same = produced.is_file() and _sha256(produced) == entry["sha256"]
        print(f"{role}: {'identical' if same else 'DIFFERENT'} ({produced})")
        if not same:
            mismatched.append(role)
    return EXIT_MISMATCH if mismatched else EXIT_OK


def _to_argv(command: str, values: dict) -> list[str]:
    parser = build_parser()
    sub = parser._subcommands[command]
    argv = []
    for action in sub._actions:
        if not action.option_strings and action.dest != "help":
            value = values.get(action.dest)
            if value is not None:
                argv.append(str(value))
            continue
        if action.dest == "help":
            continue
        value = values.get(action.dest)
        flag = action.option_strings[-1]
        if isinstance(action, argparse._StoreTrueAction):
            if value:
                argv.append(flag)
        elif value is not None:
            argv += [flag, str(value)]
    return argv


def _check_class(found: str, expected: str, found_what: str, expected_what: str) -> None:
    if found.upper() != expected.upper():
        raise DataFileError(f"loop class mismatch: {found_what} is {found}, {expected_what} is {expected}")


# -- parser ------------------------------------------------------------------
COMMANDS = {
    "synth": (cmd_synth, "write a dataset of synthetic valid loops"),
    "ingest": (cmd_ingest, "extract loops from PDB files listed in the config"),
    "train": (cmd_train, "fit a flow model to a dataset"),
    "generate": (cmd_generate, "sample loops from a checkpoint"),
    "embed": (cmd_embed, "add 3D coordinates to generated loops"),
    "evaluate": (cmd_evaluate, "score generated loops (file or checkpoint) against a dataset"),
    "interpolate": (cmd_interpolate, "decode a latent-space line between two dataset loops"),
    "sweep": (cmd_sweep, "evaluate over a grid of config overrides"),
    "rerun": (cmd_rerun, "repeat a run from its manifest and compare outputs"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cdrflow", description="Generative modelling of antibody CDR loops.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    subparsers = parser.add_subparsers(dest="command", required=True)
    parser._subcommands = {}

    def add(name, *flags):
        handler, help_text = COMMANDS[name]
        sub = subparsers.add_parser(name, help=help_text, description=help_text)
        sub.set_defaults(handler=handler)
        for flag in flags:
            flag(sub)
        parser._subcommands[name] = sub
        return sub

    def config(p): p.add_argument("--config", help="JSON configuration file")
    def seed(p): p.add_argument("--seed", type=int, help="seed for every random component")
    def out(p): p.add_argument("--out", required=True, help="output path")
    def count(p): p.add_argument("--count", type=int, help="number of loops")
    def dataset(p): p.add_argument("--dataset", help="dataset file (JSONL)")
    def checkpoint(p): p.add_argument("--checkpoint", help="model checkpoint")
    def inp(p): p.add_argument("--input", help="generated-loops file or checkpoint")
    def embed_flag(p): p.add_argument("--embed", action="store_true", help="embed loops lacking coordinates")
    def reembed(p): p.add_argument("--reembed", action="store_true", help="re-embed every loop")

    add("synth", config, seed, count, out)
    add("ingest", config, seed, out)
    add("train", config, seed, dataset, out)
    add("generate", checkpoint, config, seed, count, embed_flag, out)
    add("embed", inp, config, seed, out)
    add("evaluate", inp, dataset, config, seed, count, embed_flag, reembed, out)
    sub = add("interpolate", checkpoint, dataset, seed, out)
    sub.add_argument("--loop-a", required=True)
    sub.add_argument("--loop-b", required=True)
    sub.add_argument("--steps", type=int, help="number of intervals (default 10)")
    sub = add("sweep", inp, dataset, config, seed, count, embed_flag, reembed, out)
    sub.add_argument("--grid", required=True, help='JSON object, e.g. {"embed.lambda1": [1, 50]}')
    sub = add("rerun")
    sub.add_argument("manifest")
    sub.add_argument("--out-dir", help="where to write the repeated outputs (default: a new temp dir)")
    return parser


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, (CapacityError, EmptySplitError)):
        return EXIT_DATA
    if isinstance(exc, (ContractError, SynthesisError)):
        return EXIT_CONFIG
    if isinstance(exc, (NumericError, DomainError, FloatingPointError)):
        return EXIT_NUMERIC
    if isinstance(exc, (SchemaError, ParseError, GapError, AlphabetError, CheckpointError, DimensionError,
                        DataFileError, OSError, json.JSONDecodeError, UnicodeDecodeError)):
        return EXIT_DATA
    return 1


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("CDRFLOW_LOG_LEVEL", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    run = Run(args.command, args)
    try:
        code = args.handler(args, run)
        if code == EXIT_OK and args.command != "rerun":
            run.write_manifest(args.out)
        return code
    except Exception as exc:  # every failure becomes a diagnostic and an exit code
        code = _exit_code(exc)
        if code == 1:
            raise
        print(f"cdrflow {args.command}: error: {exc}", file=sys.stderr)
        return code


def entry_point() -> None:
    sys.exit(main())
