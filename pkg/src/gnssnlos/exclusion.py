"""NLOS exclusion experiment: positioning with and without flagged satellites.

A pre-trained classifier flags NLOS receptions epoch by epoch; each epoch
is then solved twice, with every satellite and with the flagged ones
removed. Per-epoch position errors against the trajectory truth quantify
whether exclusion keeps the solution consistent. The downstream estimator
here is plain per-epoch least squares, the smallest solver that exhibits
the corrupt-vs-consistent contrast.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import geodesy
from ._svg import line_overlay
from .dataset import NLOS, Epoch, build_windows
from .geodesy import EcefPosition
from .network import Predictor


class ExclusionError(ValueError):
    """The exclusion experiment cannot run on the given epochs."""


@dataclass
class EpochComparison:
    epoch_index: int
    n_sats: int
    n_excluded: int
    error_all_m: float
    error_excluded_m: float | None
    infeasible: bool
    converged_all: bool
    converged_excluded: bool


@dataclass
class ExclusionResult:
    """Per-epoch comparisons plus the aggregate error and ratio statistics.

    Epochs where exclusion leaves fewer than 4 satellites count as
    infeasible; their all-satellite error stands in for the excluded
    error in aggregates, and they are reported, never dropped.
    """

    comparisons: list = field(default_factory=list)
    unclassified_epochs: list = field(default_factory=list)
    r_los_pct: float = float("nan")
    r_nlos_pct: float = float("nan")

    @property
    def n_infeasible(self) -> int:
        return sum(1 for c in self.comparisons if c.infeasible)

    def infeasible_fraction(self) -> float:
        if not self.comparisons:
            return 0.0
        return self.n_infeasible / len(self.comparisons)

    def errors_all(self) -> np.ndarray:
        return np.array([c.error_all_m for c in self.comparisons])

    def errors_after_exclusion(self) -> np.ndarray:
        # infeasible epochs fall back to the all-satellite solution
        return np.array([
            c.error_all_m if c.error_excluded_m is None else c.error_excluded_m
            for c in self.comparisons
        ])

    def median_error_all_m(self) -> float:
        return float(np.median(self.errors_all()))

    def median_error_excluded_m(self) -> float:
        return float(np.median(self.errors_after_exclusion()))

    def p95_error_all_m(self) -> float:
        return float(np.percentile(self.errors_all(), 95))

    def p95_error_excluded_m(self) -> float:
        return float(np.percentile(self.errors_after_exclusion(), 95))

    def format_summary(self) -> str:
        lines = [
            f"epochs compared:        {len(self.comparisons)}",
            f"epochs unclassified:    {len(self.unclassified_epochs)}",
            f"infeasible exclusions:  {self.n_infeasible} ({100 * self.infeasible_fraction():.1f}%)",
            f"predicted R_LOS / R_NLOS:  {self.r_los_pct:.2f}% / {self.r_nlos_pct:.2f}%",
            f"median error, all sats:    {self.median_error_all_m():.2f} m",
            f"median error, excluded:    {self.median_error_excluded_m():.2f} m",
            f"p95 error, all sats:       {self.p95_error_all_m():.2f} m",
            f"p95 error, excluded:       {self.p95_error_excluded_m():.2f} m",
        ]
        return "\n".join(lines)

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch_index", "n_sats", "n_excluded", "error_all_m",
                             "error_excluded_m", "infeasible", "converged_all",
                             "converged_excluded"])
            for c in self.comparisons:
                writer.writerow([
                    c.epoch_index, c.n_sats, c.n_excluded, repr(c.error_all_m),
                    "" if c.error_excluded_m is None else repr(c.error_excluded_m),
                    int(c.infeasible), int(c.converged_all), int(c.converged_excluded),
                ])


def classify_epochs(predictor: Predictor, epochs: list[Epoch]):
    """Flag every classifiable observation as LOS/NLOS.

    Windows are built with the checkpoint's own T and slot capacity; an
    observation is classified when its satellite completes the window
    ending at its epoch. Returns (flags, summary) where flags maps
    (epoch_index, sat_id) -> True for NLOS and summary carries the
    predicted class ratios plus the epochs that had no usable window.
    """
    cfg = predictor.config
    windows = build_windows(epochs, T=cfg.T, N_max=cfg.n_max)
    if not windows:
        raise ExclusionError(f"no windows of length T={cfg.T} fit the given epochs")
    probs, _, valid = predictor.predict_arrays(windows)
    flags: dict[tuple[int, int], bool] = {}
    for wi, window in enumerate(windows):
        for slot, sid in window.slot_to_sat_id.items():
            if valid[wi, slot] and np.isfinite(probs[wi, slot]):
                flags[(window.end_epoch_index, sid)] = bool(probs[wi, slot] < 0.5)
    classified_epochs = {e for e, _ in flags}
    unclassified = [e.epoch_index for e in epochs if e.epoch_index not in classified_epochs]
    n_nlos = sum(1 for v in flags.values() if v)
    total = len(flags)
    r_nlos = 100.0 * n_nlos / total if total else float("nan")
    summary = {
        "n_classified": total,
        "n_nlos": n_nlos,
        "r_los_pct": 100.0 - r_nlos if total else float("nan"),
        "r_nlos_pct": r_nlos,
        "unclassified_epochs": unclassified,
    }
    return flags, summary


def solve_with_exclusion(epoch: Epoch, flags, initial_guess: EcefPosition):
    """Solve one epoch twice: all satellites, then without flagged ones.

    Returns (solution_all, solution_excluded, n_excluded); the excluded
    solve is None when exclusion would leave fewer than 4 satellites.
    """
    if len(epoch.observations) < 4:
        raise geodesy.InsufficientObservationsError(
            f"epoch {epoch.epoch_index} has {len(epoch.observations)} satellites"
        )
    prs = [o.pseudorange_corrected for o in epoch.observations]
    sats = [o.sat_pos for o in epoch.observations]
    solution_all = geodesy.ls_position_solve(prs, sats, initial_guess)
    keep = [o for o in epoch.observations if not flags.get((epoch.epoch_index, o.sat_id), False)]
    n_excluded = len(epoch.observations) - len(keep)
    if len(keep) < 4:
        return solution_all, None, n_excluded
    solution_excl = geodesy.ls_position_solve(
        [o.pseudorange_corrected for o in keep], [o.sat_pos for o in keep], initial_guess
    )
    return solution_all, solution_excl, n_excluded


def trajectory_report(epochs: list[Epoch], predictor: Predictor,
                      csv_path=None, svg_path=None) -> ExclusionResult:
    """Compare positioning with and without model-flagged NLOS satellites.

    Needs truth-bearing epochs (the synthetic generator provides them).
    Optionally writes the per-epoch CSV and an east/north trajectory
    overlay SVG (truth, all satellites, after exclusion).
    """
    flags, summary = classify_epochs(predictor, epochs)
    result = ExclusionResult(
        unclassified_epochs=summary["unclassified_epochs"],
        r_los_pct=summary["r_los_pct"],
        r_nlos_pct=summary["r_nlos_pct"],
    )
    classified = {e for e, _ in flags}
    guess = None
    tracks = {"truth": [], "all": [], "excluded": []}
    origin = None
    for epoch in sorted(epochs, key=lambda e: e.epoch_index):
        if epoch.epoch_index not in classified or len(epoch.observations) < 4:
            continue
        start = guess if guess is not None else epoch.receiver_truth
        sol_all, sol_excl, n_excluded = solve_with_exclusion(epoch, flags, start)
        guess = sol_all.position
        truth = epoch.receiver_truth
        err_all = float(np.linalg.norm(sol_all.position.as_array() - truth.as_array()))
        err_excl = None
        if sol_excl is not None:
            err_excl = float(np.linalg.norm(sol_excl.position.as_array() - truth.as_array()))
        result.comparisons.append(EpochComparison(
            epoch_index=epoch.epoch_index,
            n_sats=len(epoch.observations),
            n_excluded=n_excluded,
            error_all_m=err_all,
            error_excluded_m=err_excl,
            infeasible=sol_excl is None,
            converged_all=sol_all.converged,
            converged_excluded=sol_excl.converged if sol_excl is not None else False,
        ))
        if origin is None:
            origin = truth
        for name, pos in (("truth", truth), ("all", sol_all.position),
                          ("excluded", (sol_excl or sol_all).position)):
            enu = geodesy.ecef_to_enu(pos, origin)
            tracks[name].append((enu.east, enu.north))
    if not result.comparisons:
        raise ExclusionError("no classifiable epochs with enough satellites")
    if csv_path is not None:
        result.to_csv(csv_path)
    if svg_path is not None:
        series = [
            ("truth", "#333333", [p[0] for p in tracks["truth"]], [p[1] for p in tracks["truth"]]),
            ("all sats", "#c0392b", [p[0] for p in tracks["all"]], [p[1] for p in tracks["all"]]),
            ("excluded", "#27ae60", [p[0] for p in tracks["excluded"]],
             [p[1] for p in tracks["excluded"]]),
        ]
        svg = line_overlay(series, title="Trajectory with and without NLOS exclusion",
                           xlabel="east [m]", ylabel="north [m]")
        with open(svg_path, "w", encoding="utf-8") as fh:
            fh.write(svg)
    return result
