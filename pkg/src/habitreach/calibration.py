"""Endpoint-error correction of planner weights.

Two layers:

* off-line calibration splits the endpoint error over the templates in
  proportion to how well each template direction lines up with the error,
  then tries a small sweep of gains by re-simulation and keeps the best;
* online calibration predicts that correction before the movement with a
  linear model fitted to past off-line results.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .arm import ArmModel, ArmState, simulate_final_positions, standard_initial_state
from .errors import DegenerateGeometryError, DimensionError, RankDeficiencyError, SchemaError
from .planner import Plan, blend_samples, plan as make_plan
from .templates import TemplateLibrary

log = logging.getLogger(__name__)

DEFAULT_N_GRID = tuple(range(21))
DEFAULT_RIDGE = 1e-6
FEATURE_LAYOUT = "bias,target[2],template_positions[2N],planner_weights[N]/v1"


# ---------------------------------------------------------------------------
# records
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CalibrationRecord:
    """One movement before and after off-line calibration.

    ``start_weights`` are the weights the calibration started from: the
    planner weights for a plain off-line pass, the online-corrected weights
    inside an online round.  ``chosen_n`` is None when the uncorrected
    baseline won.
    """

    target: np.ndarray
    template_ids: tuple[str, ...]
    template_positions: np.ndarray
    planner_weights: np.ndarray
    start_weights: np.ndarray
    offline_weights: np.ndarray
    achieved_before: np.ndarray
    achieved_after: np.ndarray
    error_before: float
    error_after: float
    chosen_n: int | None

    @property
    def weight_correction(self) -> np.ndarray:
        """Regression target of the online model: total change from the planner weights."""
        return self.offline_weights - self.planner_weights

    def to_dict(self) -> dict:
        return {
            "target": self.target.tolist(),
            "template_ids": list(self.template_ids),
            "template_positions": self.template_positions.tolist(),
            "planner_weights": self.planner_weights.tolist(),
            "start_weights": self.start_weights.tolist(),
            "offline_weights": self.offline_weights.tolist(),
            "achieved_before": self.achieved_before.tolist(),
            "achieved_after": self.achieved_after.tolist(),
            "error_before": self.error_before,
            "error_after": self.error_after,
            "chosen_n": self.chosen_n,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "CalibrationRecord":
        arr = lambda k: np.array(doc[k], dtype=float)  # noqa: E731
        return cls(
            target=arr("target"),
            template_ids=tuple(doc["template_ids"]),
            template_positions=arr("template_positions").reshape(-1, 2),
            planner_weights=arr("planner_weights"),
            start_weights=arr("start_weights"),
            offline_weights=arr("offline_weights"),
            achieved_before=arr("achieved_before"),
            achieved_after=arr("achieved_after"),
            error_before=float(doc["error_before"]),
            error_after=float(doc["error_after"]),
            chosen_n=None if doc["chosen_n"] is None else int(doc["chosen_n"]),
        )


def append_records(path, records: Iterable[CalibrationRecord]) -> None:
    """Append records to a JSON-lines log."""
    with open(path, "a") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), separators=(",", ":")) + "\n")


def read_records(path) -> list[CalibrationRecord]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(CalibrationRecord.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise SchemaError(f"{path}:{lineno}: bad calibration record ({exc})") from exc
    return out


# ---------------------------------------------------------------------------
# off-line calibration
# ---------------------------------------------------------------------------


def offline_delta(error_vec, p_a, p_t, template_positions, n) -> np.ndarray:
    """Weight corrections for gain ``n``.

    Each template gets ``k_i cos(theta_i)``, with ``theta_i`` the angle
    between the error and the direction from the achieved position to the
    template, and ``k_i = (|e| / |p_a|) (1 + n (|p_t| - |p_i|) / |p_i|)``.
    All norms are taken from the shoulder origin.
    """
    e = np.asarray(error_vec, dtype=float)
    p_a = np.asarray(p_a, dtype=float)
    p_t = np.asarray(p_t, dtype=float)
    p_i = np.asarray(template_positions, dtype=float).reshape(-1, 2)

    d_e = np.linalg.norm(e)
    if d_e == 0.0:
        return np.zeros(len(p_i))
    d_a = np.linalg.norm(p_a)
    r = p_i - p_a
    r_norm = np.linalg.norm(r, axis=1)
    if d_a == 0.0 or np.any(r_norm == 0.0):
        raise DegenerateGeometryError("achieved position at the origin or on a template")
    d_i = np.linalg.norm(p_i, axis=1)
    if np.any(d_i == 0.0):
        raise DegenerateGeometryError("template at the origin")

    cos_theta = (r @ e) / (r_norm * d_e)
    k = (d_e / d_a) * (1.0 + n * (np.linalg.norm(p_t) - d_i) / d_i)
    return k * cos_theta


@dataclass(frozen=True)
class CalibrationRequest:
    """What :func:`calibrate_batch` needs to know about one movement."""

    plan: Plan
    start_weights: np.ndarray | None = None
    achieved: np.ndarray | None = None


def _template_samples(library: TemplateLibrary, ids) -> np.ndarray:
    return np.stack([library.by_id[i].excitations.samples for i in ids])


def candidate_weights(target, achieved, start_weights, template_positions,
                      n_grid: Sequence[int]) -> list[np.ndarray]:
    """Weights tried by off-line calibration: one per gain, then the unchanged baseline."""
    start = np.asarray(start_weights, dtype=float)
    try:
        deltas = [offline_delta(np.asarray(target) - achieved, achieved, target,
                                template_positions, n) for n in n_grid]
    except DegenerateGeometryError as exc:
        log.info("off-line calibration falls back to zero correction: %s", exc)
        deltas = [np.zeros_like(start) for _ in n_grid]
    return [start + d for d in deltas] + [start]


def calibrate_batch(requests: Sequence[CalibrationRequest], model: ArmModel,
                    library: TemplateLibrary, n_grid: Sequence[int] = DEFAULT_N_GRID,
                    initial: ArmState | None = None) -> list[tuple[np.ndarray, CalibrationRecord]]:
    """Off-line calibration of several movements, simulated as one batch.

    For every request the candidates are the start weights corrected with
    each gain in ``n_grid`` plus the uncorrected start weights.  The candidate
    with the smallest endpoint error wins; ties go to the smaller gain and the
    baseline comes last, so the error can never get worse.
    """
    initial = standard_initial_state() if initial is None else initial
    n_grid = tuple(int(n) for n in n_grid)
    if not n_grid:
        raise ValueError("n_grid must not be empty")
    requests = list(requests)
    if not requests:
        return []

    starts = [np.asarray(r.plan.weights if r.start_weights is None else r.start_weights, dtype=float)
              for r in requests]
    tsamples = [_template_samples(library, r.plan.template_ids) for r in requests]

    # movements whose achieved position is not known yet are simulated first
    achieved = [None if r.achieved is None else np.asarray(r.achieved, dtype=float) for r in requests]
    missing = [i for i, a in enumerate(achieved) if a is None]
    if missing:
        batch = np.stack([blend_samples(starts[i], tsamples[i])[0] for i in missing])
        pos, failed_at = simulate_final_positions(batch, model, initial)
        for j, i in enumerate(missing):
            if failed_at[j] >= 0:
                raise RuntimeError(f"request {i}: starting weights fail to simulate")
            achieved[i] = pos[j]

    cands = [candidate_weights(r.plan.target, achieved[i], starts[i],
                               r.plan.template_positions, n_grid)
             for i, r in enumerate(requests)]
    # the baseline (last candidate) is the start weights: its outcome is already known
    per = len(n_grid) + 1
    batch = np.stack([blend_samples(w, tsamples[i])[0]
                      for i in range(len(requests)) for w in cands[i][:-1]])
    pos, failed_at = simulate_final_positions(batch, model, initial)
    pos = pos.reshape(len(requests), per - 1, 2)
    failed_at = failed_at.reshape(len(requests), per - 1)

    out = []
    for i, r in enumerate(requests):
        target = np.asarray(r.plan.target, dtype=float)
        cand_pos = np.vstack([pos[i], achieved[i]])
        err = np.linalg.norm(cand_pos - target, axis=1)
        bad = np.append(failed_at[i] >= 0, False)
        if bad.any():
            log.info("off-line calibration: discarded %d candidates that failed to simulate",
                     int(bad.sum()))
            err[bad] = np.inf
        # a zero correction is the baseline itself, so let the baseline take it
        same = np.array([np.array_equal(w, starts[i]) for w in cands[i][:-1]] + [False])
        err[same] = np.inf
        best = int(np.argmin(err))
        weights = cands[i][best]
        record = CalibrationRecord(
            target=target,
            template_ids=tuple(r.plan.template_ids),
            template_positions=np.asarray(r.plan.template_positions, dtype=float),
            planner_weights=np.asarray(r.plan.weights, dtype=float),
            start_weights=starts[i],
            offline_weights=weights,
            achieved_before=achieved[i],
            achieved_after=cand_pos[best].copy(),
            error_before=float(np.linalg.norm(achieved[i] - target)),
            error_after=float(err[best]),
            chosen_n=None if best == per - 1 else n_grid[best],
        )
        out.append((weights, record))
    return out


def offline_calibrate(target, plan: Plan, model: ArmModel, library: TemplateLibrary,
                      n_grid: Sequence[int] = DEFAULT_N_GRID, start_weights=None,
                      achieved=None, initial: ArmState | None = None
                      ) -> tuple[np.ndarray, CalibrationRecord]:
    """Trial-and-error correction of one movement's template weights."""
    if not np.array_equal(np.asarray(target, dtype=float), plan.target):
        raise ValueError("plan was made for a different target")
    return calibrate_batch([CalibrationRequest(plan, start_weights, achieved)],
                           model, library, n_grid, initial)[0]


# ---------------------------------------------------------------------------
# online calibration
# ---------------------------------------------------------------------------


def online_features(target, template_positions, planner_weights) -> np.ndarray:
    """Regressor vector ``[1, p_t, p_1 .. p_N, w_1 .. w_N]`` (length 3 + 3N)."""
    target = np.asarray(target, dtype=float)
    positions = np.asarray(template_positions, dtype=float)
    weights = np.asarray(planner_weights, dtype=float)
    if target.shape != (2,):
        raise DimensionError("target must be a 2-vector")
    if positions.ndim != 2 or positions.shape[1] != 2 or weights.shape != (len(positions),):
        raise DimensionError("need N template positions (N, 2) and N weights")
    return np.concatenate([[1.0], target, positions.ravel(), weights])


def decode_features(features, n_templates: int):
    """Inverse of :func:`online_features`: ``(target, positions, weights)``."""
    phi = np.asarray(features, dtype=float)
    if phi.shape != (3 + 3 * n_templates,):
        raise DimensionError(f"expected {3 + 3 * n_templates} features, got {phi.shape}")
    n = n_templates
    return phi[1:3], phi[3:3 + 2 * n].reshape(n, 2), phi[3 + 2 * n:]


def record_features(record: CalibrationRecord) -> np.ndarray:
    return online_features(record.target, record.template_positions, record.planner_weights)


@dataclass(frozen=True, eq=False)
class OnlineCalibrationModel:
    coefficients: np.ndarray  # (N, feature_dim)
    ridge_lambda: float = DEFAULT_RIDGE
    training_record_count: int = 0
    layout: str = FEATURE_LAYOUT

    def __post_init__(self):
        c = np.asarray(self.coefficients, dtype=float)
        if c.ndim != 2 or c.shape[1] != 3 + 3 * c.shape[0]:
            raise DimensionError(f"coefficients must be N x (3 + 3N), got {c.shape}")
        if not np.all(np.isfinite(c)):
            raise ValueError("coefficients must be finite")
        object.__setattr__(self, "coefficients", c)

    @property
    def n_templates(self) -> int:
        return self.coefficients.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.coefficients.shape[1]

    @classmethod
    def zeros(cls, n_templates: int) -> "OnlineCalibrationModel":
        return cls(np.zeros((n_templates, 3 + 3 * n_templates)))

    def to_dict(self) -> dict:
        return {"layout": self.layout,
                "feature_dim": self.feature_dim,
                "ridge_lambda": self.ridge_lambda,
                "training_record_count": self.training_record_count,
                "coefficients": self.coefficients.tolist()}

    @classmethod
    def from_dict(cls, doc: dict) -> "OnlineCalibrationModel":
        if doc.get("layout") != FEATURE_LAYOUT:
            raise SchemaError(f"unsupported feature layout {doc.get('layout')!r}")
        model = cls(np.array(doc["coefficients"], dtype=float), float(doc["ridge_lambda"]),
                    int(doc["training_record_count"]))
        if model.feature_dim != doc["feature_dim"]:
            raise SchemaError("feature_dim does not match coefficient shape")
        return model

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "OnlineCalibrationModel":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise SchemaError(f"{path}: bad online calibration model ({exc})") from exc


def online_predict(model: OnlineCalibrationModel, features) -> np.ndarray:
    phi = np.asarray(features, dtype=float)
    if phi.shape != (model.feature_dim,):
        raise DimensionError(f"expected {model.feature_dim} features, got {phi.shape}")
    return model.coefficients @ phi


def online_fit(records: Sequence[CalibrationRecord],
               ridge_lambda: float = DEFAULT_RIDGE) -> OnlineCalibrationModel:
    """Ridge regression of weight corrections on movement features.

    Solves ``min_C sum ||dw - C phi||^2 + lambda ||C||^2`` for every output
    at once.  Rows are put in a canonical order first so the result depends
    on the set of records only, bit for bit.
    """
    records = list(records)
    if not records:
        raise ValueError("need at least one calibration record")
    if ridge_lambda < 0:
        raise ValueError("ridge_lambda must be >= 0")
    X = np.array([record_features(r) for r in records])
    Y = np.array([r.weight_correction for r in records])
    if Y.shape[1] * 3 + 3 != X.shape[1]:
        raise DimensionError("records disagree on the number of templates")

    order = np.lexsort(np.hstack([X, Y]).T[::-1])
    X, Y = X[order], Y[order]
    return OnlineCalibrationModel(_ridge_solve(X, Y, ridge_lambda), ridge_lambda, len(records))


def _ridge_solve(X, Y, lam):
    d = X.shape[1]
    if lam == 0.0:
        if np.linalg.matrix_rank(X) < d:
            raise RankDeficiencyError("features are rank deficient; use ridge_lambda > 0")
        return np.linalg.lstsq(X, Y, rcond=None)[0].T
    gram = X.T @ X + lam * np.eye(d)
    return np.linalg.solve(gram, X.T @ Y).T


# ---------------------------------------------------------------------------
# online rounds
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class OnlineRoundReport:
    """Outcome of one round of online movements.

    ``online_*`` describe the movement made with the online-corrected
    weights; ``records`` hold the off-line pass that followed each of them.
    Targets that could not be simulated are listed in ``skipped`` as
    ``(index, reason)`` and have no entries elsewhere.
    """

    targets: np.ndarray
    plans: tuple[Plan, ...]
    online_weights: np.ndarray
    online_positions: np.ndarray
    online_errors: np.ndarray
    records: tuple[CalibrationRecord, ...]
    skipped: tuple[tuple[int, str], ...] = ()

    @property
    def mean_error(self) -> float:
        """Mean endpoint error of the online-corrected movements."""
        return float(np.mean(self.online_errors)) if len(self.online_errors) else float("nan")

    @property
    def mean_offline_error(self) -> float:
        errs = [r.error_after for r in self.records]
        return float(np.mean(errs)) if errs else float("nan")


def online_round(targets, library: TemplateLibrary, model: ArmModel,
                 online_model: OnlineCalibrationModel,
                 history: Sequence[CalibrationRecord] = (),
                 n_grid: Sequence[int] = DEFAULT_N_GRID,
                 ridge_lambda: float | None = None,
                 initial: ArmState | None = None
                 ) -> tuple[OnlineCalibrationModel, OnlineRoundReport]:
    """Move to every target with online-corrected weights, then learn from it.

    Each target is planned, its weights are shifted by the online model's
    prediction and the movement is simulated.  The remaining error is then
    corrected off-line starting from those weights, and the online model is
    refitted on ``history`` plus the new records.
    """
    if online_model.training_record_count < 1:
        raise ValueError("online model must be trained on at least one record")
    initial = standard_initial_state() if initial is None else initial
    lam = online_model.ridge_lambda if ridge_lambda is None else ridge_lambda
    targets = np.asarray(targets, dtype=float).reshape(-1, 2)
    n = online_model.n_templates

    plans = [make_plan(t, library, n) for t in targets]
    weights = np.array([p.weights + online_predict(online_model, online_features(
        p.target, p.template_positions, p.weights)) for p in plans])
    batch = np.stack([blend_samples(w, _template_samples(library, p.template_ids))[0]
                      for w, p in zip(weights, plans)])
    pos, failed_at = simulate_final_positions(batch, model, initial)

    skipped = []
    keep = []
    for i in range(len(targets)):
        if failed_at[i] >= 0:
            skipped.append((i, f"online movement left the muscle model domain at step {failed_at[i]}"))
            log.warning("online round: target %d skipped (%s)", i, skipped[-1][1])
        else:
            keep.append(i)

    results = calibrate_batch([CalibrationRequest(plans[i], weights[i], pos[i]) for i in keep],
                              model, library, n_grid, initial)
    records = tuple(rec for _, rec in results)
    new_model = online_fit(list(history) + list(records), lam) if (history or records) else online_model
    report = OnlineRoundReport(
        targets=targets[keep],
        plans=tuple(plans[i] for i in keep),
        online_weights=weights[keep],
        online_positions=pos[keep],
        online_errors=np.linalg.norm(pos[keep] - targets[keep], axis=1),
        records=records,
        skipped=tuple(skipped),
    )
    return new_model, report
