"""Batch experiment front end.

Subcommands: run (each method x seed once), grid (Cartesian hyperparameter
search), datagen (materialize benchmark tasks to CSV), report (rebuild the
report from saved run results). Configs are strict JSON: unknown keys are
errors so hyperparameter typos cannot pass silently.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from . import continual, metrics, tasks
from .continual import ArchSpec, RunResult, SequenceConfig, run_sequence
from .errors import ConfigError, FormatError
from .metrics import AccMatrix, emit_report

log = logging.getLogger("afec_lab")

CONFIG_VERSION = 1

_BENCHMARK_FIELDS = {
    "conflicting_pair": {"kind", "num_classes", "samples_per_class",
                         "input_dim", "cluster_spread", "seed"},
    "angular_sequence": {"kind", "num_tasks", "num_classes",
                         "samples_per_class", "input_dim", "cluster_spread",
                         "seed"},
    "split_idx": {"kind", "images", "labels", "classes_per_task", "seed"},
}

_TOP_FIELDS = {"version", "benchmark", "methods", "lambda", "lambda_e",
               "seeds", "epochs", "batch_size", "optimizer", "arch",
               "expansion_epochs", "expansion_init", "out_dir"}


@dataclass
class ExperimentConfig:
    benchmark: dict
    methods: list[str]
    lam_values: list[float]
    lam_e_values: list[float]
    seeds: list[int]
    epochs: int
    batch_size: int
    optimizer: dict
    arch: dict
    out_dir: str
    expansion_epochs: int | None = None
    expansion_init: str = "copy_main"

    def to_json(self) -> dict:
        return {
            "version": CONFIG_VERSION,
            "benchmark": self.benchmark,
            "methods": self.methods,
            "lambda": self.lam_values,
            "lambda_e": self.lam_e_values,
            "seeds": self.seeds,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "optimizer": self.optimizer,
            "arch": self.arch,
            "expansion_epochs": self.expansion_epochs,
            "expansion_init": self.expansion_init,
            "out_dir": self.out_dir,
        }


def _as_list(value, path: str) -> list[float]:
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return [float(value)]
    if (isinstance(value, list) and value
            and all(isinstance(v, (int, float)) and not isinstance(v, bool)
                    for v in value)):
        return [float(v) for v in value]
    raise ConfigError(f"{path}: expected a number or non-empty number list")


def parse_config(doc: dict) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = set(doc) - _TOP_FIELDS
    if unknown:
        raise ConfigError(f"unknown config key(s): {sorted(unknown)}")
    if doc.get("version") != CONFIG_VERSION:
        raise ConfigError(f"version: expected {CONFIG_VERSION}, "
                          f"got {doc.get('version')!r}")
    bench = doc.get("benchmark")
    if not isinstance(bench, dict) or "kind" not in bench:
        raise ConfigError("benchmark: expected an object with a 'kind' field")
    if bench["kind"] not in _BENCHMARK_FIELDS:
        raise ConfigError(f"benchmark.kind: unknown kind {bench['kind']!r}")
    extra = set(bench) - _BENCHMARK_FIELDS[bench["kind"]]
    if extra:
        raise ConfigError(f"benchmark: unknown key(s) {sorted(extra)}")
    if bench["kind"] == "split_idx":
        for key in ("images", "labels"):
            if key not in bench:
                raise ConfigError(f"benchmark.{key}: required for split_idx")
            if not os.path.exists(bench[key]):
                raise ConfigError(f"benchmark.{key}: file not found: {bench[key]}")
    methods = doc.get("methods")
    if not isinstance(methods, list) or not methods:
        raise ConfigError("methods: expected a non-empty list")
    for m in methods:
        if m not in continual.METHODS:
            raise ConfigError(f"methods: unknown method {m!r}")
    seeds = doc.get("seeds")
    if (not isinstance(seeds, list) or not seeds
            or any(not isinstance(s, int) for s in seeds)):
        raise ConfigError("seeds: expected a non-empty list of integers")
    if len(set(seeds)) != len(seeds):
        raise ConfigError("seeds: seeds must be distinct")
    epochs = doc.get("epochs", 10)
    batch_size = doc.get("batch_size", 32)
    if not isinstance(epochs, int) or epochs < 1:
        raise ConfigError("epochs: expected an integer >= 1")
    if not isinstance(batch_size, int) or batch_size < 1:
        raise ConfigError("batch_size: expected an integer >= 1")
    arch = doc.get("arch", {"hidden": [64, 64], "activation": "relu"})
    extra = set(arch) - {"hidden", "activation"}
    if extra:
        raise ConfigError(f"arch: unknown key(s) {sorted(extra)}")
    expansion_init = doc.get("expansion_init", "copy_main")
    if expansion_init not in ("copy_main", "fresh_random"):
        raise ConfigError(f"expansion_init: unknown value {expansion_init!r}")
    return ExperimentConfig(
        benchmark=bench,
        methods=list(methods),
        lam_values=_as_list(doc.get("lambda", 0.0), "lambda"),
        lam_e_values=_as_list(doc.get("lambda_e", 0.0), "lambda_e"),
        seeds=list(seeds),
        epochs=epochs,
        batch_size=batch_size,
        optimizer=doc.get("optimizer", {"kind": "adam", "lr": 0.001}),
        arch=arch,
        out_dir=doc.get("out_dir", "results"),
        expansion_epochs=doc.get("expansion_epochs"),
        expansion_init=expansion_init,
    )


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})")
    return parse_config(doc)


def build_tasks(bench: dict) -> list:
    kind = bench["kind"]
    if kind == "conflicting_pair":
        pair = tasks.make_conflicting_pair(
            bench.get("num_classes", 10), bench.get("seed", 0),
            samples_per_class=bench.get("samples_per_class", 100),
            input_dim=bench.get("input_dim", 16),
            cluster_spread=bench.get("cluster_spread", 0.15))
        return list(pair)
    if kind == "angular_sequence":
        return tasks.make_angular_sequence(
            bench.get("num_tasks", 10), bench.get("num_classes", 10),
            bench.get("seed", 0),
            samples_per_class=bench.get("samples_per_class", 100),
            input_dim=bench.get("input_dim", 16),
            cluster_spread=bench.get("cluster_spread", 0.15))
    if kind == "split_idx":
        images, labels = tasks.load_idx(bench["images"], bench["labels"])
        return tasks.split_tasks(images, labels,
                                 bench.get("classes_per_task", 5),
                                 bench.get("seed", 0))
    raise ConfigError(f"benchmark.kind: unknown kind {kind!r}")


# -- result serialization -----------------------------------------------------

def result_to_json(result: RunResult) -> dict:
    m = result.acc_matrix
    return {
        "config": result.config,
        "acc_matrix": m.a,
        "abar": m.abar.tolist(),
        "pre_train": [None if not np.isfinite(v) else float(v)
                      for v in m.pre_train],
        "per_task_new_accuracy": result.per_task_new_accuracy,
        "wall_time": result.wall_time,
        "state_digest": result.state_digest,
        "start_task": result.start_task,
    }


def result_from_json(doc: dict) -> RunResult:
    pre = np.array([np.nan if v is None else v for v in doc["pre_train"]])
    matrix = AccMatrix(a=doc["acc_matrix"], abar=np.asarray(doc["abar"]),
                       pre_train=pre)
    return RunResult(acc_matrix=matrix,
                     per_task_new_accuracy=doc["per_task_new_accuracy"],
                     wall_time=doc["wall_time"], config=doc["config"],
                     state_digest=doc["state_digest"],
                     start_task=doc.get("start_task", 0))


# -- cell execution -----------------------------------------------------------

def _run_cell(config_json: dict, method: str, lam: float, lam_e: float,
              seed: int) -> dict:
    cfg = parse_config(config_json)
    task_list = build_tasks(cfg.benchmark)
    seq = SequenceConfig(method=method, lam=lam, lam_e=lam_e,
                         epochs=cfg.epochs, batch_size=cfg.batch_size,
                         optimizer=cfg.optimizer, seed=seed,
                         arch=ArchSpec(**cfg.arch),
                         expansion_epochs=cfg.expansion_epochs,
                         expansion_init=cfg.expansion_init)
    return result_to_json(run_sequence(seq, task_list))


def _run_cells(config: ExperimentConfig, cells: list[tuple], jobs: int):
    config_json = config.to_json()
    if jobs <= 1:
        return [_run_cell(config_json, *cell) for cell in cells]
    with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(_run_cell, config_json, *cell) for cell in cells]
        return [f.result() for f in futures]


def _result_filename(method: str, lam: float, lam_e: float, seed: int) -> str:
    return f"result_{method}_lam{lam:g}_lame{lam_e:g}_seed{seed}.json"


# -- subcommands --------------------------------------------------------------

def cmd_run(config: ExperimentConfig, jobs: int) -> int:
    if len(config.lam_values) != 1 or len(config.lam_e_values) != 1:
        raise ConfigError("lambda / lambda_e: run takes single values; "
                          "use the grid subcommand for lists")
    lam, lam_e = config.lam_values[0], config.lam_e_values[0]
    cells = [(m, lam, lam_e, s) for m in config.methods for s in config.seeds]
    docs = _run_cells(config, cells, jobs)
    os.makedirs(config.out_dir, exist_ok=True)
    results = []
    for cell, doc in zip(cells, docs):
        path = os.path.join(config.out_dir, _result_filename(*cell))
        with open(path, "w") as fh:
            json.dump(doc, fh, sort_keys=True)
            fh.write("\n")
        results.append(result_from_json(doc))
    emit_report(results, config.out_dir)
    return 0


def cmd_grid(config: ExperimentConfig, jobs: int) -> int:
    if len(config.lam_values) * len(config.lam_e_values) < 1:
        raise ConfigError("grid needs at least one hyperparameter value")
    cells = [(m, lam, lam_e, s)
             for m in config.methods
             for lam in config.lam_values
             for lam_e in config.lam_e_values
             for s in config.seeds]
    docs = _run_cells(config, cells, jobs)
    os.makedirs(config.out_dir, exist_ok=True)
    by_cell: dict[tuple, list[float]] = {}
    for (method, lam, lam_e, seed), doc in zip(cells, docs):
        result = result_from_json(doc)
        by_cell.setdefault((method, lam, lam_e), []).append(
            metrics.acc(result.acc_matrix))
        path = os.path.join(config.out_dir,
                            _result_filename(method, lam, lam_e, seed))
        with open(path, "w") as fh:
            json.dump(doc, fh, sort_keys=True)
            fh.write("\n")
    lines = ["method,lambda,lambda_e,mean_acc,std_acc,seeds"]
    best = None
    for key in sorted(by_cell, key=lambda k: (k[0], k[1], k[2])):
        accs = by_cell[key]
        mean, std = float(np.mean(accs)), float(np.std(accs))
        lines.append(f"{key[0]},{key[1]:g},{key[2]:g},{mean:.6f},{std:.6f},"
                     f"{len(accs)}")
        # Ties break toward the smallest lambda_e, then the smallest lambda.
        rank = (-mean, key[2], key[1], key[0])
        if best is None or rank < best[0]:
            best = (rank, key, mean)
    with open(os.path.join(config.out_dir, "grid.csv"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    (_, (method, lam, lam_e), mean) = best
    print(f"best: method={method} lambda={lam:g} lambda_e={lam_e:g} "
          f"mean_acc={mean:.6f}")
    return 0


def cmd_datagen(config: ExperimentConfig) -> int:
    task_list = build_tasks(config.benchmark)
    os.makedirs(config.out_dir, exist_ok=True)
    for task in task_list:
        tasks.export_csv(task, os.path.join(config.out_dir, f"{task.name}.csv"))
        print(f"task {task.name}:")
        if task.kind == "regression_angle":
            for k, angle in enumerate(task.class_angles):
                print(f"  class {k}: {math.degrees(angle) % 360.0:.1f} deg")
        else:
            print(f"  {task.head_dim} classes, {task.n_train} train samples")
    return 0


def cmd_report(config: ExperimentConfig) -> int:
    results = []
    for name in sorted(os.listdir(config.out_dir)):
        if name.startswith("result_") and name.endswith(".json"):
            with open(os.path.join(config.out_dir, name)) as fh:
                results.append(result_from_json(json.load(fh)))
    if not results:
        raise ConfigError(f"no result_*.json files in {config.out_dir}")
    emit_report(results, config.out_dir)
    return 0


# -- entry point --------------------------------------------------------------

def _setup_logging() -> None:
    level = {"quiet": logging.ERROR, "info": logging.INFO,
             "debug": logging.DEBUG}.get(os.environ.get("AFEC_LAB_LOG", "info"),
                                         logging.INFO)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
    log.addHandler(handler)
    log.setLevel(level)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="afec-lab",
        description="Continual-learning experiments with active forgetting")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("run", "grid", "datagen", "report"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON config path")
        p.add_argument("--out", default=None, help="override output dir")
        p.add_argument("--jobs", type=int, default=1,
                       help="parallel worker count")
        p.add_argument("--seed-override", type=int, default=None,
                       help="replace the config's seed list with one seed")
    args = parser.parse_args(argv)
    _setup_logging()
    try:
        config = load_config(args.config)
        if args.out is not None:
            config.out_dir = args.out
        if args.seed_override is not None:
            config.seeds = [args.seed_override]
        if args.command == "run":
            return cmd_run(config, args.jobs)
        if args.command == "grid":
            return cmd_grid(config, args.jobs)
        if args.command == "datagen":
            return cmd_datagen(config)
        return cmd_report(config)
    except (ConfigError, FormatError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        log.error("run failed: %s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
