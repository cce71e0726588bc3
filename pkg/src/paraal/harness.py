"""Experiment orchestration: config files, the strategy x seed grid, and
result persistence.

Everything one experiment produces lives under a single output directory:

    output_dir/
      config_echo.json           resolved configuration, defaults included
      dataset/                   generated task data (header + jsonl files)
      vs/vs_<seed>.ckpt          per-seed semantic space checkpoints
      runs/<run_id>.csv          per-iteration metric rows
      runs/<run_id>_selections.jsonl
      runs/<run_id>_scores.csv   pool uncertainty scores (opt-in)
      runs/<run_id>.json         RunRecord bookkeeping
      diagnostics_<seed>.csv     per-test-item score dump
      aggregate.csv              mean/std/n over seeds

Result CSVs follow one fixed schema whose header line is part of the
contract, byte for byte:

    run_id, strategy, seed, iteration, labeled_fraction, metric_name, value, question_type

Fields are joined with a comma and one space (readers must strip the
space; parse_result_csv does). question_type is "all" for whole-test-set
rows. Floats are written with repr, so rerunning a cell with the same
config and seed reproduces its CSV byte for byte.

Besides the evaluation metrics, each iteration t >= 1 contributes one
"type_selected_pct" row per question type: the percentage of that
iteration's newly labeled items asking that type of question (0.0 for
types the strategy skipped). These rows carry the selection composition
through the same schema so downstream tables need no second format.

A run_id names one grid cell. It hashes the cell-relevant config (the
four sections plus dataset_seed, mc_samples, entropy_beam) together with
the cell's seed and strategy; the strategies and seeds lists and
output_dir stay out of the hash so that growing the grid or moving the
directory never renames completed cells.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import alloop as al
from . import metrics as mt
from . import qamodel as qm
from . import taskgen as tg
from . import uncertainty as un
from .alloop import AlSchedule
from .autodiff import derive_seed, load_checkpoint, make_rng, save_checkpoint
from .embedspace import SemanticSpace, VsConfig
from .qamodel import QaConfig
from .taskgen import Dataset, TaskConfig

_RESULT_FIELDS = ("run_id", "strategy", "seed", "iteration",
                  "labeled_fraction", "metric_name", "value", "question_type")
_SCORE_FIELDS = ("item_index", "strategy", "value", "question_type",
                 "answer_set_size")
_AGGREGATE_FIELDS = ("strategy", "iteration", "labeled_fraction",
                     "metric_name", "question_type", "mean", "std", "n")

CSV_HEADER = ", ".join(_RESULT_FIELDS)
SCORE_HEADER = ", ".join(_SCORE_FIELDS)
AGGREGATE_HEADER = ", ".join(_AGGREGATE_FIELDS)

# score kinds emitted by diagnose_entropy, in row order per item
DIAGNOSTIC_KINDS = ("entropy", "entropy_corrected", "baye", "baye_deno")

DEFAULT_SEEDS = (0, 1, 2, 3, 4)


class ConfigError(ValueError):
    """Invalid configuration or experiment inputs; maps to exit code 2."""


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


def grid_task_config() -> TaskConfig:
    """Dataset sizing for full strategy x seed grids.

    TaskConfig() alone is sized for single-model runs; a grid retrains and
    rescores dozens of cells, so the default experiment uses a smaller
    world that keeps the whole grid inside a coffee break."""
    return TaskConfig(n_scenes=500, questions_per_scene=4, max_objects=2,
                      feature_dim=48, noise_sigma=0.02)


@dataclass
class ExperimentConfig:
    dataset: TaskConfig = field(default_factory=grid_task_config)
    model: QaConfig = field(default_factory=QaConfig)
    vs: VsConfig = field(default_factory=VsConfig)
    schedule: AlSchedule = field(default_factory=AlSchedule)
    strategies: list[str] = field(default_factory=lambda: list(un.STRATEGIES))
    seeds: list[int] = field(default_factory=lambda: list(DEFAULT_SEEDS))
    dataset_seed: int = 7
    mc_samples: int = un.MC_SAMPLES_DEFAULT
    entropy_beam: int = un.ENTROPY_BEAM_DEFAULT
    output_dir: str | None = None

    def validate(self) -> None:
        if not self.strategies:
            raise ConfigError("strategies must be a non-empty list")
        for s in self.strategies:
            if s not in un.STRATEGIES:
                raise ConfigError(
                    f"unknown strategy {s!r}; choose from {list(un.STRATEGIES)}")
        if len(set(self.strategies)) != len(self.strategies):
            raise ConfigError("strategies contains duplicates")
        if not self.seeds:
            raise ConfigError("seeds must be a non-empty list")
        for s in self.seeds:
            if isinstance(s, bool) or not isinstance(s, int):
                raise ConfigError(f"seeds must be integers, got {s!r}")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds contains duplicates")
        if self.mc_samples < 2:
            raise ConfigError(f"mc_samples must be >= 2, got {self.mc_samples}")
        if self.entropy_beam < 2:
            raise ConfigError(
                f"entropy_beam must be >= 2, got {self.entropy_beam}")
        try:
            tg._validate_config(self.dataset)
            self.model.validate()
            self.vs.validate()
            self.schedule.validate()
        except ValueError as e:
            raise ConfigError(str(e)) from e
        # fail before hours of compute, not at the first embedding-loss step
        needs_space = any(al.strategy_embed_enabled(s, self.model.embed_enabled)
                          for s in self.strategies)
        if needs_space and self.vs.embed_dim != self.model.hidden_dim:
            raise ConfigError(
                f"vs.embed_dim {self.vs.embed_dim} must equal "
                f"model.hidden_dim {self.model.hidden_dim} for "
                "embedding-trained strategies")

    def as_dict(self) -> dict:
        return {
            "dataset": self.dataset.as_dict(),
            "model": self.model.as_dict(),
            "vs": self.vs.as_dict(),
            "schedule": self.schedule.as_dict(),
            "strategies": list(self.strategies),
            "seeds": list(self.seeds),
            "dataset_seed": self.dataset_seed,
            "mc_samples": self.mc_samples,
            "entropy_beam": self.entropy_beam,
            "output_dir": self.output_dir,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        sections = {"dataset": TaskConfig, "model": QaConfig,
                    "vs": VsConfig, "schedule": AlSchedule}
        kwargs = {}
        for name, typ in sections.items():
            if name in d:
                try:
                    kwargs[name] = typ.from_dict(d[name])
                except (TypeError, ValueError) as e:
                    raise ConfigError(f"{name}: {e}") from e
        for name in ("strategies", "seeds", "dataset_seed", "mc_samples",
                     "entropy_beam", "output_dir"):
            if name in d:
                kwargs[name] = d[name]
        return cls(**kwargs)


def load_config(path) -> ExperimentConfig:
    """Parse a JSON experiment config; errors carry the file position."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"{path}: {e}") from e
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from e
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    try:
        return ExperimentConfig.from_dict(d)
    except ConfigError as e:
        raise ConfigError(f"{path}: {e}") from e


def write_config_echo(cfg: ExperimentConfig, out_dir) -> Path:
    """Persist the fully resolved config (defaults included) for traceability."""
    payload = cfg.as_dict()
    payload["output_dir"] = str(out_dir)
    path = Path(out_dir) / "config_echo.json"
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------------------
# Identity hashes
# ---------------------------------------------------------------------------


def _hash12(text: str) -> str:
    return hashlib.blake2b(text.encode("utf-8"), digest_size=16).hexdigest()[:12]


def _canonical(payload) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def _cell_payload(cfg: ExperimentConfig) -> dict:
    return {
        "dataset": cfg.dataset.as_dict(),
        "model": cfg.model.as_dict(),
        "vs": cfg.vs.as_dict(),
        "schedule": cfg.schedule.as_dict(),
        "dataset_seed": cfg.dataset_seed,
        "mc_samples": cfg.mc_samples,
        "entropy_beam": cfg.entropy_beam,
    }


def config_hash(cfg: ExperimentConfig) -> str:
    return _hash12(_canonical(_cell_payload(cfg)))


def dataset_hash(cfg: ExperimentConfig) -> str:
    return _hash12(_canonical({"dataset": cfg.dataset.as_dict(),
                               "dataset_seed": cfg.dataset_seed}))


def run_id(cfg: ExperimentConfig, seed: int, strategy: str) -> str:
    payload = _canonical(_cell_payload(cfg))
    return _hash12(f"{payload}\x1f{seed}\x1f{strategy}")


# ---------------------------------------------------------------------------
# Run records and CSV rows
# ---------------------------------------------------------------------------


@dataclass
class RunRecord:
    run_id: str
    strategy: str
    seed: int
    config_hash: str
    dataset_hash: str
    csv_file: str               # file names relative to runs/, so the
    selection_file: str         # output directory can be moved wholesale
    scores_file: str | None
    wall_seconds: float
    complete: bool

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown run record keys: {sorted(unknown)}")
        return cls(**d)


def format_value(x) -> str:
    """Shortest round-trip decimal form; identical output on every rerun."""
    return repr(float(x))


def metric_rows(run_id_: str, strategy: str, seed: int,
                rec: al.IterationRecord) -> list[str]:
    """One iteration's CSV rows: overall block first, then each type."""
    prefix = (f"{run_id_}, {strategy}, {seed}, {rec.iteration}, "
              f"{format_value(rec.labeled_fraction)}")
    rows = [f"{prefix}, {name}, {format_value(rec.report.overall[name])}, all"
            for name in mt.METRIC_NAMES]
    for qtype in sorted(rec.report.per_type):
        rows.extend(
            f"{prefix}, {name}, "
            f"{format_value(rec.report.per_type[qtype][name])}, {qtype}"
            for name in mt.METRIC_NAMES)
    return rows


SELECTED_PCT_METRIC = "type_selected_pct"


def selection_rows(run_id_: str, strategy: str, seed: int,
                   rec: al.IterationRecord, selection: al.SelectionRecord,
                   all_types: list[str]) -> list[str]:
    """Selection-composition CSV rows for one acquisition iteration."""
    if selection.iteration != rec.iteration:
        raise ValueError(
            f"selection record is for iteration {selection.iteration}, "
            f"metrics for {rec.iteration}")
    prefix = (f"{run_id_}, {strategy}, {seed}, {rec.iteration}, "
              f"{format_value(rec.labeled_fraction)}")
    return [f"{prefix}, {SELECTED_PCT_METRIC}, "
            f"{format_value(selection.type_percentages.get(qtype, 0.0))}, "
            f"{qtype}"
            for qtype in all_types]


def parse_result_csv(path) -> list[dict]:
    """Read a run CSV back into typed row dicts; rejects foreign headers."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh, skipinitialspace=True)
        if tuple(reader.fieldnames or ()) != _RESULT_FIELDS:
            raise ConfigError(
                f"{path}: header {reader.fieldnames} does not match the "
                f"result schema {list(_RESULT_FIELDS)}")
        rows = []
        for d in reader:
            rows.append({
                "run_id": d["run_id"],
                "strategy": d["strategy"],
                "seed": int(d["seed"]),
                "iteration": int(d["iteration"]),
                "labeled_fraction": float(d["labeled_fraction"]),
                "metric_name": d["metric_name"],
                "value": float(d["value"]),
                "question_type": d["question_type"],
            })
    return rows


# ---------------------------------------------------------------------------
# Dataset and per-seed shared pieces
# ---------------------------------------------------------------------------


def _expected_master(dataset_seed: int) -> int:
    # generate_dataset folds its rng into one master draw; replicate it to
    # verify an on-disk dataset without regenerating anything
    return int(make_rng(dataset_seed).integers(0, 2**63))


def ensure_dataset(cfg: ExperimentConfig, out_dir, overwrite: bool = False,
                   log=None) -> Dataset:
    """Load the output directory's dataset, generating it on first use.

    An existing dataset that was generated under different settings is an
    error unless overwrite is set; silently mixing datasets would poison
    every downstream comparison.
    """
    ddir = Path(out_dir) / "dataset"
    if (ddir / "header.json").exists() and not overwrite:
        ds = tg.load_dataset(ddir)
        if (ds.config.as_dict() != cfg.dataset.as_dict()
                or ds.seed != _expected_master(cfg.dataset_seed)):
            raise ConfigError(
                f"{ddir} holds a dataset generated under different settings; "
                "rerun gen-data with --overwrite or use a fresh output dir")
        return ds
    ds = tg.generate_dataset(cfg.dataset, make_rng(cfg.dataset_seed))
    tg.write_dataset(ddir, ds)
    if log is not None:
        log(f"dataset: {len(ds.train_items)} pool / {len(ds.test_items)} "
            f"test items -> {ddir}")
    return ds


def space_checkpoint_path(out_dir, seed: int) -> Path:
    return Path(out_dir) / "vs" / f"vs_{seed}.ckpt"


def _train_space(dataset: Dataset, cfg: ExperimentConfig,
                 seed: int) -> SemanticSpace:
    state = al.bootstrap(dataset, cfg.schedule,
                         make_rng(derive_seed(seed, "bootstrap")))
    return al.train_space_for_run(dataset, None, cfg.vs, seed,
                                  state.labeled_indices)


def space_for_seed(dataset: Dataset, cfg: ExperimentConfig, seed: int,
                   out_dir=None) -> SemanticSpace:
    """The seed's semantic space, loaded from its checkpoint when present."""
    if out_dir is not None:
        ck = space_checkpoint_path(out_dir, seed)
        if ck.exists():
            space = SemanticSpace(len(dataset.vocab),
                                  dataset.config.feature_dim, cfg.vs,
                                  seed=derive_seed(seed, "vs_load"))
            space.load_params(load_checkpoint(ck))
            return space
    return _train_space(dataset, cfg, seed)


def train_vs_checkpoints(cfg: ExperimentConfig, out_dir,
                         overwrite: bool = False, log=None) -> list[Path]:
    """Train and checkpoint one semantic space per seed (train-vs command)."""
    cfg.validate()
    dataset = ensure_dataset(cfg, out_dir, log=log)
    vs_dir = Path(out_dir) / "vs"
    vs_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for seed in cfg.seeds:
        ck = space_checkpoint_path(out_dir, seed)
        if ck.exists() and not overwrite:
            if log is not None:
                log(f"vs seed {seed}: kept existing {ck.name}")
        else:
            t0 = time.perf_counter()
            space = _train_space(dataset, cfg, seed)
            save_checkpoint(ck, space.params_dict())
            if log is not None:
                log(f"vs seed {seed}: trained in "
                    f"{time.perf_counter() - t0:.1f}s -> {ck.name}")
        paths.append(ck)
    return paths


def f0_params_for_seed(dataset: Dataset, cfg: ExperimentConfig, seed: int,
                       embed_enabled: bool, space: SemanticSpace) -> dict:
    """Starting model weights shared by every strategy with this embed mode."""
    qa = dataclasses.replace(cfg.model, embed_enabled=embed_enabled)
    state = al.bootstrap(dataset, cfg.schedule,
                         make_rng(derive_seed(seed, "bootstrap")))
    model = qm.QaModel(len(dataset.vocab), dataset.config.feature_dim, qa,
                       seed=derive_seed(seed, "model_init"))
    qm.train_qa(model, space,
                al.training_triples(dataset, state.labeled_indices), qa,
                make_rng(derive_seed(seed, "train", 0)))
    return model.params_dict()


# ---------------------------------------------------------------------------
# Grid execution
# ---------------------------------------------------------------------------


def _record_path(out_dir, rid: str) -> Path:
    return Path(out_dir) / "runs" / f"{rid}.json"


def _load_record(out_dir, rid: str) -> RunRecord | None:
    path = _record_path(out_dir, rid)
    if not path.exists():
        return None
    try:
        return RunRecord.from_dict(json.loads(path.read_text()))
    except (ValueError, KeyError, TypeError):
        return None


def _cell_complete(out_dir, rid: str) -> bool:
    rec = _load_record(out_dir, rid)
    return (rec is not None and rec.complete
            and (Path(out_dir) / "runs" / rec.csv_file).exists())


def execute_cell(dataset: Dataset, cfg: ExperimentConfig, strategy: str,
                 seed: int, out_dir, overwrite: bool = False,
                 dump_scores: bool = False, space: SemanticSpace | None = None,
                 f0_params: dict | None = None, log=None) -> RunRecord:
    """Run one (strategy, seed) cell and persist its outputs.

    A cell whose RunRecord is already complete is skipped unless overwrite
    is set. Rows stream into a .partial file flushed after every
    iteration, which becomes the final CSV atomically; a crash therefore
    keeps finished iterations on disk and the cell simply recomputes on
    the next invocation (determinism makes the redo byte-identical).
    """
    rid = run_id(cfg, seed, strategy)
    runs_dir = Path(out_dir) / "runs"
    runs_dir.mkdir(parents=True, exist_ok=True)
    csv_path = runs_dir / f"{rid}.csv"

    if not overwrite and _cell_complete(out_dir, rid):
        if log is not None:
            log(f"{rid} {strategy} seed {seed}: complete, skipped")
        return _load_record(out_dir, rid)

    t0 = time.perf_counter()
    all_types = sorted({item.question_type for item in dataset.items})
    partial = Path(str(csv_path) + ".partial")
    with open(partial, "w") as fh:
        fh.write(CSV_HEADER + "\n")

        def on_iteration(state, rec):
            for row in metric_rows(rid, strategy, seed, rec):
                fh.write(row + "\n")
            if rec.iteration >= 1:
                for row in selection_rows(rid, strategy, seed, rec,
                                          state.selection_log[-1], all_types):
                    fh.write(row + "\n")
            fh.flush()

        state = al.run_active_learning(
            dataset, strategy, cfg.schedule, cfg.model, cfg.vs, seed,
            mc_samples=cfg.mc_samples, entropy_beam=cfg.entropy_beam,
            space=space, f0_params=f0_params, on_iteration=on_iteration)
    os.replace(partial, csv_path)

    selection_path = runs_dir / f"{rid}_selections.jsonl"
    with open(selection_path, "w") as fh:
        for s in state.selection_log:
            fh.write(json.dumps({
                "iteration": s.iteration,
                "selected": s.selected,
                "scores": {str(k): v for k, v in sorted(s.scores.items())},
                "type_percentages": s.type_percentages,
            }) + "\n")

    scores_name = None
    if dump_scores:
        scores_path = runs_dir / f"{rid}_scores.csv"
        with open(scores_path, "w") as fh:
            fh.write(SCORE_HEADER + "\n")
            for s in state.selection_log:
                for idx, value in sorted(s.scores.items()):
                    item = dataset.items[idx]
                    size = len(dataset.table.forms[item.canonical_class])
                    fh.write(f"{idx}, {strategy}, {format_value(value)}, "
                             f"{item.question_type}, {size}\n")
        scores_name = scores_path.name

    rec = RunRecord(rid, strategy, seed, config_hash(cfg), dataset_hash(cfg),
                    csv_path.name, selection_path.name, scores_name,
                    round(time.perf_counter() - t0, 3), True)
    _record_path(out_dir, rid).write_text(
        json.dumps(rec.as_dict(), indent=2, sort_keys=True) + "\n")
    if log is not None:
        log(f"{rid} {strategy} seed {seed}: done in {rec.wall_seconds:.1f}s")
    return rec


def _cell_worker(cfg_dict: dict, strategy: str, seed: int, out_dir: str,
                 overwrite: bool, dump_scores: bool) -> dict:
    # parallel cells recompute the per-seed space independently; the extra
    # work buys full independence, and determinism keeps outputs identical
    cfg = ExperimentConfig.from_dict(cfg_dict)
    dataset = tg.load_dataset(Path(out_dir) / "dataset")
    space = None
    if overwrite or not _cell_complete(out_dir, run_id(cfg, seed, strategy)):
        space = space_for_seed(dataset, cfg, seed, out_dir)
    rec = execute_cell(dataset, cfg, strategy, seed, out_dir,
                       overwrite=overwrite, dump_scores=dump_scores,
                       space=space)
    return rec.as_dict()


def run_grid(cfg: ExperimentConfig, out_dir, overwrite: bool = False,
             dump_scores: bool = False, jobs: int = 1,
             log=None) -> list[RunRecord]:
    """Execute every (strategy, seed) cell; returns records in grid order.

    With jobs=1 each seed's semantic space and starting model are trained
    once and shared across that seed's strategies; both are pure speedups
    (run_active_learning recomputes them identically when absent), so
    jobs>1 simply recomputes them per cell in worker processes.
    """
    cfg.validate()
    if jobs < 1:
        raise ConfigError(f"jobs must be >= 1, got {jobs}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_config_echo(cfg, out_dir)
    dataset = ensure_dataset(cfg, out_dir, log=log)

    cells = [(strategy, seed) for seed in cfg.seeds
             for strategy in cfg.strategies]
    if jobs > 1:
        payload = cfg.as_dict()
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_cell_worker, payload, strategy, seed,
                                   str(out_dir), overwrite, dump_scores)
                       for strategy, seed in cells]
            records = []
            for fut in futures:
                rec = RunRecord.from_dict(fut.result())
                if log is not None:
                    log(f"{rec.run_id} {rec.strategy} seed {rec.seed}: "
                        f"finished ({rec.wall_seconds:.1f}s)")
                records.append(rec)
        return records

    records = []
    for seed in cfg.seeds:
        space: SemanticSpace | None = None
        f0_by_mode: dict[bool, dict] = {}
        for strategy in cfg.strategies:
            # train shared pieces lazily: a fully resumed seed trains nothing
            needs = overwrite or not _cell_complete(out_dir,
                                                    run_id(cfg, seed, strategy))
            if needs and space is None:
                space = space_for_seed(dataset, cfg, seed, out_dir)
            mode = al.strategy_embed_enabled(strategy, cfg.model.embed_enabled)
            if needs and mode not in f0_by_mode:
                f0_by_mode[mode] = f0_params_for_seed(dataset, cfg, seed,
                                                      mode, space)
            records.append(execute_cell(
                dataset, cfg, strategy, seed, out_dir, overwrite=overwrite,
                dump_scores=dump_scores, space=space if needs else None,
                f0_params=f0_by_mode.get(mode) if needs else None, log=log))
    return records


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------


def read_records(out_dir) -> list[RunRecord]:
    runs_dir = Path(out_dir) / "runs"
    if not runs_dir.is_dir():
        raise ConfigError(f"no runs directory under {out_dir}")
    records = []
    for path in sorted(runs_dir.glob("*.json")):
        try:
            records.append(RunRecord.from_dict(json.loads(path.read_text())))
        except (ValueError, KeyError, TypeError) as e:
            raise ConfigError(f"{path}: unreadable run record ({e})") from e
    return records


def aggregate(records: list[RunRecord], runs_dir) -> list[dict]:
    """Mean/std/n per (strategy, iteration, metric, question_type).

    Only complete records participate; n counts seeds. All records must
    share one config hash: averaging cells that ran under different
    settings would produce a table that describes no experiment at all.
    std is the population standard deviation, 0 for a single seed.
    """
    done = [r for r in records if r.complete]
    if not done:
        raise ConfigError("no completed runs to aggregate")
    hashes = sorted({r.config_hash for r in done})
    if len(hashes) > 1:
        raise ConfigError(
            f"refusing to aggregate runs with different configs "
            f"(hashes {hashes})")

    values: dict[tuple, list[float]] = {}
    fractions: dict[tuple, float] = {}
    for rec in done:
        for row in parse_result_csv(Path(runs_dir) / rec.csv_file):
            key = (row["strategy"], row["iteration"], row["metric_name"],
                   row["question_type"])
            values.setdefault(key, []).append(row["value"])
            fractions[key] = row["labeled_fraction"]

    metric_order = {m: i for i, m in enumerate(mt.METRIC_NAMES)}
    out = []
    for key in sorted(values, key=lambda k: (k[0], k[1],
                                             metric_order.get(k[2], 99),
                                             k[3] != "all", k[3])):
        strategy, iteration, metric, qtype = key
        arr = np.asarray(values[key], dtype=np.float64)
        out.append({
            "strategy": strategy,
            "iteration": iteration,
            "labeled_fraction": fractions[key],
            "metric_name": metric,
            "question_type": qtype,
            "mean": float(arr.mean()),
            "std": float(arr.std()),
            "n": int(arr.size),
        })
    return out


def write_aggregate(rows: list[dict], path) -> Path:
    path = Path(path)
    with open(path, "w") as fh:
        fh.write(AGGREGATE_HEADER + "\n")
        for r in rows:
            fh.write(f"{r['strategy']}, {r['iteration']}, "
                     f"{format_value(r['labeled_fraction'])}, "
                     f"{r['metric_name']}, {r['question_type']}, "
                     f"{format_value(r['mean'])}, {format_value(r['std'])}, "
                     f"{r['n']}\n")
    return path


def parse_aggregate_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh, skipinitialspace=True)
        if tuple(reader.fieldnames or ()) != _AGGREGATE_FIELDS:
            raise ConfigError(
                f"{path}: header {reader.fieldnames} does not match the "
                f"aggregate schema {list(_AGGREGATE_FIELDS)}")
        rows = []
        for d in reader:
            rows.append({
                "strategy": d["strategy"],
                "iteration": int(d["iteration"]),
                "labeled_fraction": float(d["labeled_fraction"]),
                "metric_name": d["metric_name"],
                "question_type": d["question_type"],
                "mean": float(d["mean"]),
                "std": float(d["std"]),
                "n": int(d["n"]),
            })
    return rows


# ---------------------------------------------------------------------------
# Entropy diagnostics
# ---------------------------------------------------------------------------


def diagnose_entropy(cfg: ExperimentConfig, out_dir, seed: int | None = None,
                     log=None) -> Path:
    """Score every test item four ways under the seed's starting model.

    Rows use the score-dump schema with the strategy column carrying the
    score kind (DIAGNOSTIC_KINDS), so histogram tooling reads run dumps
    and diagnostics interchangeably. The raw and denoised variance scores
    share mask seeds per item, making their difference purely the
    denoiser's doing.
    """
    cfg.validate()
    if seed is None:
        seed = cfg.seeds[0]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = ensure_dataset(cfg, out_dir, log=log)
    space = space_for_seed(dataset, cfg, seed, out_dir)
    model = qm.QaModel(len(dataset.vocab), dataset.config.feature_dim,
                       cfg.model, seed=derive_seed(seed, "model_init"))
    model.load_params(f0_params_for_seed(dataset, cfg, seed,
                                         cfg.model.embed_enabled, space))

    path = out_dir / f"diagnostics_{seed}.csv"
    partial = Path(str(path) + ".partial")
    with open(partial, "w") as fh:
        fh.write(SCORE_HEADER + "\n")
        for i, item in enumerate(dataset.items):
            if item.split != "test":
                continue
            q = item.question_tokens
            img = dataset.scene_features(item.scene_id)
            ent = un.score_entropy(model, q, img, cfg.entropy_beam)
            cor = un.corrected_entropy(model, q, img, cfg.entropy_beam,
                                       dataset.table)
            raw = un.score_bayesian(model, None, q, img, cfg.mc_samples,
                                    make_rng(derive_seed(seed, "diagnose", i)),
                                    use_denoiser=False)
            den = un.score_bayesian(model, space, q, img, cfg.mc_samples,
                                    make_rng(derive_seed(seed, "diagnose", i)),
                                    use_denoiser=True)
            size = len(dataset.table.forms[item.canonical_class])
            for kind, value in zip(DIAGNOSTIC_KINDS, (ent, cor, raw, den)):
                fh.write(f"{i}, {kind}, {format_value(value)}, "
                         f"{item.question_type}, {size}\n")
    os.replace(partial, path)
    if log is not None:
        log(f"diagnostics seed {seed} -> {path}")
    return path


def parse_score_csv(path) -> list[dict]:
    """Read a score dump (run scores or diagnostics) into typed rows."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh, skipinitialspace=True)
        if tuple(reader.fieldnames or ()) != _SCORE_FIELDS:
            raise ConfigError(
                f"{path}: header {reader.fieldnames} does not match the "
                f"score schema {list(_SCORE_FIELDS)}")
        rows = []
        for d in reader:
            rows.append({
                "item_index": int(d["item_index"]),
                "strategy": d["strategy"],
                "value": float(d["value"]),
                "question_type": d["question_type"],
                "answer_set_size": int(d["answer_set_size"]),
            })
    return rows
