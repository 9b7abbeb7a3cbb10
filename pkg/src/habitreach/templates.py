"""Library of past movements that the habitual planner blends from."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from .arm import (
    N_MUSCLES,
    ArmModel,
    ArmState,
    ExcitationProfile,
    simulate,
    simulate_final_positions,
    standard_initial_state,
)
from .errors import EmptyLibraryError, HashMismatchError, SchemaError

log = logging.getLogger(__name__)

LIBRARY_KEYS = {"arm_model_hash", "generation_seed", "templates"}
TEMPLATE_KEYS = {"id", "final_position", "excitations"}


@dataclass(frozen=True)
class WaveformSpec:
    """Single-bump excitation family ``u(t) = A sin^2(pi t / T)``.

    Each muscle draws its own amplitude ``A`` uniformly from
    ``[0, max_amplitude]``.  Samples are taken at step midpoints.
    """

    max_amplitude: float = 0.6

    def __post_init__(self):
        if not 0.0 <= self.max_amplitude <= 1.0:
            raise ValueError("max_amplitude must lie in [0, 1]")

    def shape(self, model: ArmModel) -> np.ndarray:
        n = model.n_steps
        t = (np.arange(n) + 0.5) * model.integrator_dt
        return np.sin(np.pi * t / model.movement_duration) ** 2

    def draw_amplitudes(self, rng: np.random.Generator, count: int) -> np.ndarray:
        return rng.uniform(0.0, self.max_amplitude, size=(count, N_MUSCLES))

    def samples(self, amplitudes, model: ArmModel) -> np.ndarray:
        """(B, K, 6) excitation samples for a (B, 6) array of amplitudes."""
        amplitudes = np.asarray(amplitudes, dtype=float)
        return amplitudes[:, None, :] * self.shape(model)[None, :, None]


@dataclass(frozen=True, eq=False)
class Template:
    id: str
    excitations: ExcitationProfile
    final_position: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.final_position, dtype=float)
        if p.shape != (2,):
            raise ValueError("final_position must be a 2-vector")
        object.__setattr__(self, "final_position", p)

    def __eq__(self, other):
        if not isinstance(other, Template):
            return NotImplemented
        return (self.id == other.id and self.excitations == other.excitations
                and np.array_equal(self.final_position, other.final_position))

    def to_dict(self) -> dict:
        return {"id": self.id,
                "final_position": self.final_position.tolist(),
                "excitations": self.excitations.to_dict()}


@dataclass(frozen=True, eq=False)
class TemplateLibrary:
    arm_model_hash: str
    templates: tuple[Template, ...]
    generation_seed: int

    def __post_init__(self):
        object.__setattr__(self, "templates", tuple(self.templates))
        ids = [t.id for t in self.templates]
        if len(set(ids)) != len(ids):
            raise ValueError("template ids must be unique")

    def __len__(self):
        return len(self.templates)

    def __eq__(self, other):
        if not isinstance(other, TemplateLibrary):
            return NotImplemented
        return (self.arm_model_hash == other.arm_model_hash
                and self.generation_seed == other.generation_seed
                and self.templates == other.templates)

    @cached_property
    def positions(self) -> np.ndarray:
        """(M, 2) array of template final positions in storage order."""
        if not self.templates:
            return np.zeros((0, 2))
        return np.array([t.final_position for t in self.templates])

    @cached_property
    def by_id(self) -> dict[str, Template]:
        return {t.id: t for t in self.templates}

    def to_dict(self) -> dict:
        return {"arm_model_hash": self.arm_model_hash,
                "generation_seed": self.generation_seed,
                "templates": [t.to_dict() for t in self.templates]}

    def verify(self, model: ArmModel, atol: float = 1e-9) -> None:
        """Re-simulate every template and check its stored final position."""
        if model.digest() != self.arm_model_hash:
            raise HashMismatchError("library was generated with a different arm model")
        for t in self.templates:
            p = simulate(t.excitations, model).final_position
            if np.max(np.abs(p - t.final_position)) > atol:
                raise ValueError(f"template {t.id}: stored final position does not re-simulate")


def generate_library(model: ArmModel, count: int, seed: int,
                     waveform: WaveformSpec | None = None,
                     initial: ArmState | None = None) -> TemplateLibrary:
    """Draw ``count`` random single-bump movements and record where they end.

    Profiles whose simulation leaves the muscle model's domain are redrawn
    from the same generator, so the result depends only on the arguments.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    waveform = WaveformSpec() if waveform is None else waveform
    initial = standard_initial_state() if initial is None else initial
    rng = np.random.default_rng(seed)

    samples = np.empty((0, model.n_steps, N_MUSCLES))
    positions = np.empty((0, 2))
    resampled = 0
    while len(samples) < count:
        need = count - len(samples)
        batch = waveform.samples(waveform.draw_amplitudes(rng, need), model)
        pos, failed_at = simulate_final_positions(batch, model, initial)
        ok = failed_at < 0
        resampled += int(np.count_nonzero(~ok))
        samples = np.concatenate([samples, batch[ok]])
        positions = np.concatenate([positions, pos[ok]])
        if resampled > 100 * count:
            raise RuntimeError("waveform family keeps driving the arm out of its domain")
    if resampled:
        log.info("generate_library: resampled %d profiles that failed to simulate", resampled)

    width = max(4, len(str(count - 1)))
    templates = tuple(
        Template(f"t{i:0{width}d}", ExcitationProfile(model.integrator_dt, samples[i]), positions[i])
        for i in range(count))
    return TemplateLibrary(model.digest(), templates, int(seed))


def nearest_templates(library: TemplateLibrary, target, n: int) -> list[Template]:
    """The ``n`` templates closest to ``target``; ties are broken by id."""
    if len(library) == 0:
        raise EmptyLibraryError("template library is empty")
    if not 1 <= n <= len(library):
        raise ValueError(f"need 1 <= n <= {len(library)}, got {n}")
    target = np.asarray(target, dtype=float)
    dist = np.linalg.norm(library.positions - target, axis=1)
    order = sorted(range(len(library)), key=lambda i: (dist[i], library.templates[i].id))
    return [library.templates[i] for i in order[:n]]


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def save_library(library: TemplateLibrary, path) -> None:
    Path(path).write_text(json.dumps(library.to_dict(), separators=(",", ":")))


def library_from_dict(doc) -> TemplateLibrary:
    if not isinstance(doc, dict):
        raise SchemaError("library: expected an object")
    if set(doc) != LIBRARY_KEYS:
        raise SchemaError(f"library: expected keys {sorted(LIBRARY_KEYS)}, got {sorted(doc)}")
    if not isinstance(doc["arm_model_hash"], str) or not isinstance(doc["generation_seed"], int):
        raise SchemaError("library: bad arm_model_hash or generation_seed")
    if not isinstance(doc["templates"], list):
        raise SchemaError("library: templates must be a list")
    templates = []
    for i, t in enumerate(doc["templates"]):
        if not isinstance(t, dict) or set(t) != TEMPLATE_KEYS:
            raise SchemaError(f"templates[{i}]: expected keys {sorted(TEMPLATE_KEYS)}")
        exc = t["excitations"]
        if not isinstance(exc, dict) or set(exc) != {"dt", "samples"}:
            raise SchemaError(f"templates[{i}].excitations: expected keys ['dt', 'samples']")
        try:
            templates.append(Template(str(t["id"]), ExcitationProfile.from_dict(exc),
                                      np.array(t["final_position"], dtype=float)))
        except (TypeError, ValueError) as exc_:
            raise SchemaError(f"templates[{i}]: {exc_}") from exc_
    try:
        return TemplateLibrary(doc["arm_model_hash"], tuple(templates), doc["generation_seed"])
    except ValueError as exc:
        raise SchemaError(str(exc)) from exc


def load_library(path, model: ArmModel | None = None, verify: bool = False) -> TemplateLibrary:
    """Read a library file.

    With ``model`` given, the stored arm digest must match it; ``verify``
    additionally re-simulates every template.
    """
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: {exc.msg} at byte {exc.pos}", offset=exc.pos) from exc
    library = library_from_dict(doc)
    if model is not None:
        if library.arm_model_hash != model.digest():
            raise HashMismatchError(
                f"{path}: library arm hash {library.arm_model_hash[:12]} does not match "
                f"arm {model.digest()[:12]}")
        if verify:
            library.verify(model)
    return library

