"""End-to-end experiment: plan, off-line calibration, then online rounds.

The report has one row per target and stage.  Stages, in order:

``plan``
    the blended movement straight from the planner (round 0)
``offline``
    the same movement after off-line calibration (round 0)
``online``
    the movement made with online-corrected weights (rounds 1..R)
``online_offline``
    that movement after the off-line pass that feeds the next refit

Round 1 reuses the stage-two targets so online and off-line errors can be
compared target by target.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .arm import ArmModel, default_arm, load_arm, simulate_final_positions, standard_initial_state
from .calibration import (
    DEFAULT_RIDGE,
    CalibrationRequest,
    calibrate_batch,
    online_fit,
    online_round,
)
from .errors import ConfigError, DynamicsError
from .planner import DEFAULT_N_TEMPLATES, plan
from .templates import TemplateLibrary, generate_library, load_library

log = logging.getLogger(__name__)

STAGES = ("plan", "offline", "online", "online_offline")
TARGET_SHRINK = 0.9


def _fmt(x) -> str:
    """Shortest round-trip text for a float, so reports are byte-stable."""
    return repr(float(x))


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything that determines an experiment run.

    ``arm`` and ``library`` are file paths; ``None`` means the packaged
    default arm and a freshly generated library.  ``target_region`` is
    ``[[x_min, y_min], [x_max, y_max]]``; ``None`` means the template
    bounding box shrunk by 10% about its centre.  ``targets`` overrides
    sampling altogether.
    """

    seed: int = 0
    arm: str | None = None
    library: str | None = None
    library_count: int = 50
    target_count: int = 25
    target_region: tuple | None = None
    targets: tuple | None = None
    n_templates: int = DEFAULT_N_TEMPLATES
    n_min: int = 0
    n_max: int = 20
    ridge_lambda: float = DEFAULT_RIDGE
    rounds: int = 5

    def __post_init__(self):
        for name in ("library_count", "target_count", "n_templates"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.rounds < 0:
            raise ConfigError("rounds must be >= 0")
        if not 0 <= self.n_min <= self.n_max:
            raise ConfigError("need 0 <= n_min <= n_max")
        if self.ridge_lambda < 0:
            raise ConfigError("ridge_lambda must be >= 0")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if self.target_region is not None:
            region = np.asarray(self.target_region, dtype=float)
            if region.shape != (2, 2) or np.any(region[0] > region[1]):
                raise ConfigError("target_region must be [[x_min, y_min], [x_max, y_max]]")
            object.__setattr__(self, "target_region", tuple(map(tuple, region.tolist())))
        if self.targets is not None:
            t = np.asarray(self.targets, dtype=float)
            if t.ndim != 2 or t.shape[1] != 2 or len(t) == 0:
                raise ConfigError("targets must be a non-empty list of [x, y]")
            object.__setattr__(self, "targets", tuple(map(tuple, t.tolist())))

    @property
    def n_grid(self) -> tuple[int, ...]:
        return tuple(range(self.n_min, self.n_max + 1))

    def to_dict(self) -> dict:
        doc = asdict(self)
        for k in ("target_region", "targets"):
            if doc[k] is not None:
                doc[k] = [list(p) for p in doc[k]]
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(doc)

    def digest(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()


@dataclass(frozen=True)
class ReportRow:
    round: int
    stage: str
    target: tuple[float, float]
    actual: tuple[float, float]
    weights: tuple[float, ...]
    chosen_n: int | None
    error: float

    def csv_fields(self) -> list[str]:
        if self.stage in ("offline", "online_offline"):
            n = "none" if self.chosen_n is None else str(self.chosen_n)
        else:
            n = ""
        return ([str(self.round), _fmt(self.target[0]), _fmt(self.target[1]), self.stage,
                 _fmt(self.actual[0]), _fmt(self.actual[1])]
                + [_fmt(w) for w in self.weights] + [n, _fmt(self.error)])

    def to_dict(self) -> dict:
        return {"round": self.round, "stage": self.stage, "target": list(self.target),
                "actual": list(self.actual), "weights": list(self.weights),
                "chosen_n": self.chosen_n, "error": self.error}

    @classmethod
    def from_dict(cls, doc: dict) -> "ReportRow":
        return cls(int(doc["round"]), str(doc["stage"]), tuple(doc["target"]), tuple(doc["actual"]),
                   tuple(doc["weights"]), doc["chosen_n"], float(doc["error"]))


def csv_header(n_templates: int) -> list[str]:
    return (["round", "target_x", "target_y", "stage", "actual_x", "actual_y"]
            + [f"w{i + 1}" for i in range(n_templates)] + ["chosen_n", "error"])


@dataclass
class ExperimentReport:
    config_digest: str
    seed: int
    n_templates: int
    rows: list[ReportRow] = field(default_factory=list)
    partial: bool = False
    failure: str | None = None
    skipped: list[dict] = field(default_factory=list)

    def stage_rows(self, stage: str, round_: int | None = None) -> list[ReportRow]:
        return [r for r in self.rows if r.stage == stage and (round_ is None or r.round == round_)]

    def mean_error(self, stage: str, round_: int | None = None) -> float:
        rows = self.stage_rows(stage, round_)
        return float(np.mean([r.error for r in rows])) if rows else float("nan")

    @property
    def rounds(self) -> list[int]:
        return sorted({r.round for r in self.rows if r.stage == "online"})

    def round_means(self) -> dict:
        """Mean errors per stage; online stages are keyed by round."""
        return {
            "plan": self.mean_error("plan"),
            "offline": self.mean_error("offline"),
            "online": {str(k): self.mean_error("online", k) for k in self.rounds},
            "online_offline": {str(k): self.mean_error("online_offline", k) for k in self.rounds},
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(csv_header(self.n_templates))
        for row in self.rows:
            w.writerow(row.csv_fields())
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {"config_digest": self.config_digest, "seed": self.seed,
                "n_templates": self.n_templates, "partial": self.partial,
                "failure": self.failure, "skipped": self.skipped,
                "means": _json_safe(self.round_means()),
                "rows": [r.to_dict() for r in self.rows]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentReport":
        return cls(doc["config_digest"], int(doc["seed"]), int(doc["n_templates"]),
                   [ReportRow.from_dict(r) for r in doc["rows"]], bool(doc["partial"]),
                   doc["failure"], list(doc["skipped"]))


def _json_safe(obj):
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, float) and math.isnan(obj):
        return None
    return obj


# ---------------------------------------------------------------------------
# setup
# ---------------------------------------------------------------------------


def resolve_arm(config: ExperimentConfig) -> ArmModel:
    return default_arm() if config.arm is None else load_arm(config.arm)


def resolve_library(config: ExperimentConfig, model: ArmModel) -> TemplateLibrary:
    if config.library is not None:
        library = load_library(config.library, model)
    else:
        library = generate_library(model, config.library_count, config.seed)
    if len(library) < config.n_templates:
        raise ConfigError(f"library has {len(library)} templates, need at least {config.n_templates}")
    return library


def default_region(library: TemplateLibrary) -> np.ndarray:
    """Template bounding box shrunk by 10% about its centre."""
    lo, hi = library.positions.min(0), library.positions.max(0)
    c, h = (lo + hi) / 2, (hi - lo) / 2 * TARGET_SHRINK
    return np.array([c - h, c + h])


def check_region(region, model: ArmModel) -> None:
    """Reject rectangles that reach outside the arm's annular workspace."""
    (x0, y0), (x1, y1) = np.asarray(region, dtype=float)
    l1, l2 = model.link_lengths
    r_in, r_out = abs(l1 - l2), l1 + l2
    far = max(math.hypot(x, y) for x in (x0, x1) for y in (y0, y1))
    near = math.hypot(min(max(0.0, x0), x1), min(max(0.0, y0), y1))
    if far > r_out or near < r_in:
        raise ConfigError(f"target region {np.asarray(region).tolist()} leaves the reachable annulus "
                          f"[{r_in:g}, {r_out:g}] m")


def sample_targets(region, count: int, rng: np.random.Generator,
                   model: ArmModel | None = None) -> np.ndarray:
    """Uniform targets in ``region``; with ``model``, only reachable ones are kept."""
    lo, hi = np.asarray(region, dtype=float)
    if model is None:
        return rng.uniform(lo, hi, size=(count, 2))
    l1, l2 = model.link_lengths
    out = []
    for _ in range(1000 * count):
        p = rng.uniform(lo, hi)
        if abs(l1 - l2) <= math.hypot(*p) <= l1 + l2:
            out.append(p)
            if len(out) == count:
                return np.array(out)
    raise ConfigError("target region hardly overlaps the reachable workspace")


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------


def run_experiment(config: ExperimentConfig, model: ArmModel | None = None,
                   library: TemplateLibrary | None = None) -> ExperimentReport:
    """Run all three stages.

    A simulation failure stops the run; the rows gathered so far are kept
    and the report is flagged ``partial``.
    """
    model = resolve_arm(config) if model is None else model
    library = resolve_library(config, model) if library is None else library
    rng = np.random.default_rng([config.seed, 1])
    if config.targets is not None:
        targets = np.array(config.targets, dtype=float)
        for t in targets:
            check_region([t, t], model)
    elif config.target_region is not None:
        check_region(config.target_region, model)
        targets = sample_targets(config.target_region, config.target_count, rng)
    else:
        # the template box can poke out of the workspace at its corners
        targets = sample_targets(default_region(library), config.target_count, rng, model)

    report = ExperimentReport(config.digest(), config.seed, config.n_templates)
    try:
        _run_stages(config, model, library, targets, report)
    except DynamicsError as exc:
        report.partial = True
        report.failure = str(exc)
        log.error("experiment aborted: %s", exc)
    return report


def _row(round_, stage, target, actual, weights, chosen_n, error) -> ReportRow:
    return ReportRow(round_, stage, tuple(map(float, target)), tuple(map(float, actual)),
                     tuple(map(float, weights)), chosen_n, float(error))


def _run_stages(config, model, library, targets, report):
    initial = standard_initial_state()
    n = config.n_templates

    # stage 1: habitual plan
    plans = [plan(t, library, n) for t in targets]
    batch = np.stack([p.blended_excitations.samples for p in plans])
    achieved, failed_at = simulate_final_positions(batch, model, initial)
    if np.any(failed_at >= 0):
        i = int(np.argmax(failed_at >= 0))
        raise DynamicsError(f"planned movement to target {i} failed", int(failed_at[i]))
    for p, a in zip(plans, achieved):
        report.rows.append(_row(0, "plan", p.target, a, p.weights, None, np.linalg.norm(a - p.target)))

    # stage 2: off-line calibration of every planned movement
    results = calibrate_batch([CalibrationRequest(p, None, a) for p, a in zip(plans, achieved)],
                              model, library, config.n_grid, initial)
    records = [rec for _, rec in results]
    for rec in records:
        report.rows.append(_row(0, "offline", rec.target, rec.achieved_after, rec.offline_weights,
                                rec.chosen_n, rec.error_after))
    if config.rounds == 0:
        return

    # stage 3: bootstrap from the off-line records, then online rounds
    online = online_fit(records, config.ridge_lambda)
    for r in range(1, config.rounds + 1):
        online, rep = online_round(targets, library, model, online, records,
                                   config.n_grid, config.ridge_lambda, initial)
        records.extend(rep.records)
        for (i, reason) in rep.skipped:
            report.skipped.append({"round": r, "target_index": i, "reason": reason})
        for t, w, a, e in zip(rep.targets, rep.online_weights, rep.online_positions, rep.online_errors):
            report.rows.append(_row(r, "online", t, a, w, None, e))
        for rec in rep.records:
            report.rows.append(_row(r, "online_offline", rec.target, rec.achieved_after,
                                    rec.offline_weights, rec.chosen_n, rec.error_after))


# ---------------------------------------------------------------------------
# plot data
# ---------------------------------------------------------------------------

PLOT_COLUMNS = ("kind", "round", "stage", "target_x", "target_y", "actual_x", "actual_y", "error")


def plot_data_csv(report: ExperimentReport | dict) -> str:
    """Tidy CSV for a learning-curve plot: per-round means, then every row.

    ``kind`` is ``mean`` for stage means (position columns empty) and
    ``target`` for individual movements.
    """
    if isinstance(report, dict):
        missing = {"rows", "n_templates"} - set(report)
        if missing:
            raise KeyError(f"report is missing {sorted(missing)}")
        report = ExperimentReport.from_dict({"config_digest": "", "seed": 0, "partial": False,
                                             "failure": None, "skipped": [], **report})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PLOT_COLUMNS)
    seen = []
    for row in report.rows:
        key = (row.round, row.stage)
        if key not in seen:
            seen.append(key)
    for round_, stage in seen:
        w.writerow(["mean", round_, stage, "", "", "", "", _fmt(report.mean_error(stage, round_))])
    for row in report.rows:
        w.writerow(["target", row.round, row.stage, _fmt(row.target[0]), _fmt(row.target[1]),
                    _fmt(row.actual[0]), _fmt(row.actual[1]), _fmt(row.error)])
    return buf.getvalue()
