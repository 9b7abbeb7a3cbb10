"""Habitual planning: reach a new target by blending stored excitations."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .arm import ExcitationProfile
from .errors import GridMismatchError
from .templates import TemplateLibrary, nearest_templates

log = logging.getLogger(__name__)

DEFAULT_N_TEMPLATES = 4
# distances below this count as an exact hit on a template
ZERO_DISTANCE = 1e-12


@dataclass(frozen=True, eq=False)
class Plan:
    target: np.ndarray
    template_ids: tuple[str, ...]
    template_positions: np.ndarray
    weights: np.ndarray
    blended_excitations: ExcitationProfile
    predicted_position: np.ndarray
    clamped_samples: int = 0

    def __eq__(self, other):
        if not isinstance(other, Plan):
            return NotImplemented
        return (self.template_ids == other.template_ids
                and np.array_equal(self.target, other.target)
                and np.array_equal(self.template_positions, other.template_positions)
                and np.array_equal(self.weights, other.weights)
                and self.blended_excitations == other.blended_excitations
                and np.array_equal(self.predicted_position, other.predicted_position))

    def to_dict(self) -> dict:
        return {"target": self.target.tolist(),
                "template_ids": list(self.template_ids),
                "template_positions": self.template_positions.tolist(),
                "weights": self.weights.tolist(),
                "predicted_position": self.predicted_position.tolist(),
                "clamped_samples": self.clamped_samples,
                "blended_excitations": self.blended_excitations.to_dict()}


def compute_weights(target, template_positions) -> np.ndarray:
    """Inverse-distance weights of each template for ``target``.

    A target sitting on one or more templates gives those templates equal
    shares and every other template zero.
    """
    target = np.asarray(target, dtype=float)
    positions = np.asarray(template_positions, dtype=float).reshape(-1, 2)
    if len(positions) == 0:
        raise ValueError("need at least one template position")
    d = np.linalg.norm(positions - target, axis=1)
    hit = d <= ZERO_DISTANCE
    if hit.any():
        return hit / np.count_nonzero(hit)
    inv = 1.0 / d
    return inv / inv.sum()


def blend_samples(weights, samples) -> tuple[np.ndarray, int]:
    """Weighted sum over the leading axis of ``samples``, clamped to [0, 1].

    Returns the blended array and how many entries had to be clamped.
    """
    weights = np.asarray(weights, dtype=float)
    samples = np.asarray(samples, dtype=float)
    out = np.tensordot(weights, samples, axes=1)
    clamped = int(np.count_nonzero((out < 0.0) | (out > 1.0)))
    return np.clip(out, 0.0, 1.0), clamped


def blend_excitations(weights, excitations) -> ExcitationProfile:
    excitations = list(excitations)
    weights = np.asarray(weights, dtype=float)
    if len(weights) != len(excitations) or not excitations:
        raise ValueError("need one weight per excitation profile")
    dt, shape = excitations[0].dt, excitations[0].samples.shape
    for e in excitations[1:]:
        if e.dt != dt or e.samples.shape != shape:
            raise GridMismatchError("excitation profiles do not share a time grid")
    blended, clamped = blend_samples(weights, np.stack([e.samples for e in excitations]))
    if clamped:
        log.warning("blend_excitations: clamped %d samples to [0, 1]", clamped)
    return ExcitationProfile(dt, blended)


def estimate_position(weights, template_positions) -> np.ndarray:
    weights = np.asarray(weights, dtype=float)
    return weights @ np.asarray(template_positions, dtype=float).reshape(-1, 2)


def plan(target, library: TemplateLibrary, n: int = DEFAULT_N_TEMPLATES) -> Plan:
    target = np.asarray(target, dtype=float)
    chosen = nearest_templates(library, target, n)
    positions = np.array([t.final_position for t in chosen])
    weights = compute_weights(target, positions)
    blended, clamped = blend_samples(weights, np.stack([t.excitations.samples for t in chosen]))
    return Plan(
        target=target,
        template_ids=tuple(t.id for t in chosen),
        template_positions=positions,
        weights=weights,
        blended_excitations=ExcitationProfile(chosen[0].excitations.dt, blended),
        predicted_position=estimate_position(weights, positions),
        clamped_samples=clamped,
    )
