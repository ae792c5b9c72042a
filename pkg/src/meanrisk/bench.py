"""Benchmark harness: config grids, per-cell records, performance profiles.

A run crosses a set of instance files with a grid of solver configurations.
Every (instance, config) cell produces one CSV record; cell failures (time
limit, bad data, crashes) land in the ``status`` column and never abort the
run. Wall time is measured around the solve only, excluding parsing.

Records CSV columns: instance, config, risk, risk_params, budget_mult,
warmstart, monotone, status, wall_time, nodes, fw_iters, objective_max,
return_term, nnz, max_entry (blank numerics on failed cells).
Profile CSV columns: solver_config, tau, fraction_solved.
"""

from __future__ import annotations

import csv
import dataclasses
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

from . import bnb
from .instances import load_instance
from .model import MeanRiskInstance, risk_from_dict

__all__ = [
    "RECORD_FIELDS",
    "PROFILE_FIELDS",
    "CellConfig",
    "load_grid",
    "epsilon_budget_grid",
    "run_bench",
    "performance_profile",
    "write_records_csv",
    "write_profile_csv",
]

RECORD_FIELDS = [
    "instance",
    "config",
    "risk",
    "risk_params",
    "budget_mult",
    "warmstart",
    "monotone",
    "status",
    "wall_time",
    "nodes",
    "fw_iters",
    "objective_max",
    "return_term",
    "nnz",
    "max_entry",
]

PROFILE_FIELDS = ["solver_config", "tau", "fraction_solved"]


@dataclass
class CellConfig:
    """One solver configuration cell of a benchmark grid."""

    risk: dict
    warmstart: str = "x-proj"
    monotone: bool = False
    tol: float = 1e-10
    time_limit: float = 600.0
    budget_multiplier: float | None = None  # overrides b := mult * sum(a)
    name: str = ""

    def label(self) -> str:
        if self.name:
            return self.name
        parts = [self.risk.get("kind", "?")]
        parts += [f"{k}{v:g}" for k, v in sorted(self.risk.items()) if k != "kind"]
        if self.budget_multiplier is not None:
            parts.append(f"b{self.budget_multiplier:g}")
        parts.append(self.warmstart)
        if self.monotone:
            parts.append("monotone")
        return "-".join(parts)

    def risk_params(self) -> str:
        return ",".join(f"{k}={v:g}" for k, v in sorted(self.risk.items()) if k != "kind")


def load_grid(path) -> list[CellConfig]:
    """Grid JSON: {"configs": [{"risk": {...}, "warmstart": ..., ...}, ...]}."""
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    configs = doc.get("configs")
    if not isinstance(configs, list) or not configs:
        raise ValueError("grid file must contain a nonempty 'configs' array")
    return [CellConfig(**cell) for cell in configs]


def epsilon_budget_grid(
    epsilons=(0.91, 0.95, 0.99),
    budget_multipliers=(1.0, 10.0, 100.0),
    warmstart: str = "x-proj",
    tol: float = 1e-10,
    time_limit: float = 600.0,
) -> list[CellConfig]:
    """Standard linear-risk sweep: confidence levels crossed with budgets."""
    return [
        CellConfig(
            risk={"kind": "linear", "epsilon": eps},
            warmstart=warmstart,
            tol=tol,
            time_limit=time_limit,
            budget_multiplier=mult,
            name=f"eps{eps:g}-b{mult:g}",
        )
        for eps in epsilons
        for mult in budget_multipliers
    ]


def _run_cell(task) -> dict:
    path, cell_dict = task
    cell = CellConfig(**cell_dict)
    record = {
        "instance": "",
        "config": cell.label(),
        "risk": cell.risk.get("kind", "?"),
        "risk_params": cell.risk_params(),
        "budget_mult": "" if cell.budget_multiplier is None else cell.budget_multiplier,
        "warmstart": cell.warmstart,
        "monotone": cell.monotone,
        "status": "",
        "wall_time": "",
        "nodes": "",
        "fw_iters": "",
        "objective_max": "",
        "return_term": "",
        "nnz": "",
        "max_entry": "",
    }
    try:
        inst = load_instance(path)
        record["instance"] = inst.name or str(path)
        if cell.budget_multiplier is not None:
            inst = MeanRiskInstance(
                r=inst.r,
                a=inst.a,
                b=cell.budget_multiplier * float(inst.a.sum()),
                M=inst.M,
                integer_set=inst.integer_set,
                name=inst.name,
            )
        h = risk_from_dict(cell.risk)
        cfg = bnb.BnbConfig(
            fw=bnb.fw.FwConfig(p_nm=0 if cell.monotone else 1, gap_tol=cell.tol, drift_window=200),
            warmstart=bnb.WarmstartRule(cell.warmstart),
            time_limit=cell.time_limit,
            abs_tol=cell.tol,
        )
        report = bnb.solve(inst, h, cfg)
        record.update(
            status=report.status.value,
            wall_time=report.wall_time,
            nodes=report.nodes,
            fw_iters=report.fw_iters_total,
            objective_max=report.objective_max,
            return_term=report.return_term,
            nnz=report.nnz,
            max_entry=report.max_entry,
        )
    except Exception as exc:  # cell failures must not abort the run
        if not record["instance"]:
            record["instance"] = str(path)
        record["status"] = f"error:{type(exc).__name__}"
    return record


def run_bench(instance_paths, cells, jobs: int = 1) -> list[dict]:
    """One record per (instance, config) cell, sorted for determinism."""
    tasks = [
        (str(path), dataclasses.asdict(cell)) for path in instance_paths for cell in cells
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(_run_cell, tasks))
    else:
        records = [_run_cell(task) for task in tasks]
    records.sort(key=lambda rec: (rec["instance"], rec["config"]))
    return records


def performance_profile(records: list[dict]) -> list[dict]:
    """Dolan-More time ratios from the records of one run.

    For each config, the fraction of all instances it solved within tau times
    the fastest solved time for that instance. Unsolved cells are excluded
    from the per-instance minima and never counted solved, so a config with
    failures plateaus below 1. Rows are emitted per config (first-seen order)
    for every breakpoint tau, fractions non-decreasing in tau.
    """
    configs: list[str] = []
    for rec in records:
        if rec["config"] not in configs:
            configs.append(rec["config"])
    instances = sorted({rec["instance"] for rec in records})
    solved = [rec for rec in records if rec["status"] == "optimal"]
    best: dict[str, float] = {}
    for rec in solved:
        t = max(float(rec["wall_time"]), 1e-9)
        best[rec["instance"]] = min(best.get(rec["instance"], t), t)
    ratios: dict[str, list[float]] = {cfg: [] for cfg in configs}
    for rec in solved:
        t = max(float(rec["wall_time"]), 1e-9)
        ratios[rec["config"]].append(t / best[rec["instance"]])
    taus = sorted({1.0} | {ratio for rs in ratios.values() for ratio in rs})
    denom = max(len(instances), 1)
    rows = []
    for cfg in configs:
        rs = sorted(ratios[cfg])
        for tau in taus:
            frac = sum(1 for ratio in rs if ratio <= tau * (1.0 + 1e-12)) / denom
            rows.append({"solver_config": cfg, "tau": tau, "fraction_solved": frac})
    return rows


def write_records_csv(records: list[dict], fh) -> None:
    writer = csv.DictWriter(fh, fieldnames=RECORD_FIELDS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(records)


def write_profile_csv(rows: list[dict], fh) -> None:
    writer = csv.DictWriter(fh, fieldnames=PROFILE_FIELDS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
