"""Synthetic class-structured embeddings on the unit sphere.

Each class c has a true direction mu_c.  A sample of class c is
``normalize(concentration * mu_c + g)`` with g standard Gaussian, so
``concentration`` is a tightness knob rather than a von Mises-Fisher
parameter.  The "zero-shot" prototypes handed to the classifier are
``normalize(mu_c + perturbation * g')``.
"""
from __future__ import annotations

import json
from dataclasses import MISSING, asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .classifier import PrototypeClassifier
from .embeddings import EmbeddingSet, LabelMarginal

# Logit spread of roughly 2-3 nats across classes at the default geometry,
# comparable to contrastive VLM zero-shot logits at logit scale 100.
SYNTH_TEMPERATURE = 0.05


@dataclass(frozen=True)
class SynthSpec:
    num_classes: int
    dim: int
    concentration: float
    n_samples: int
    seed: int
    prototype_perturbation: float = 0.0
    class_marginal: tuple[float, ...] | None = None
    temperature: float = SYNTH_TEMPERATURE

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.dim < 2:
            raise ValueError("dim must be >= 2")
        if self.n_samples < 1:
            raise ValueError("n_samples must be positive")
        for name in ("concentration", "prototype_perturbation"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and >= 0")
        if self.class_marginal is not None:
            m = tuple(float(x) for x in self.class_marginal)
            if len(m) != self.num_classes:
                raise ValueError("class_marginal length must equal num_classes")
            LabelMarginal(np.array(m))
            object.__setattr__(self, "class_marginal", m)

    @property
    def marginal(self) -> LabelMarginal:
        if self.class_marginal is None:
            return LabelMarginal.uniform(self.num_classes)
        return LabelMarginal(np.array(self.class_marginal))

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["class_marginal"] is not None:
            d["class_marginal"] = list(d["class_marginal"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown synth field(s): {sorted(unknown)}")
        required = [f.name for f in fields(cls) if f.default is MISSING]
        missing = [name for name in required if name not in d]
        if missing:
            raise ValueError(f"synth spec is missing required field(s): {', '.join(missing)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "SynthSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _unit_rows(A: np.ndarray) -> np.ndarray:
    return A / np.linalg.norm(A, axis=1, keepdims=True)


class SynthWorld:
    """Fixed class geometry from which independent samples can be drawn."""

    def __init__(self, spec: SynthSpec):
        self.spec = spec
        rng = np.random.default_rng([spec.seed, 0])
        C, D = spec.num_classes, spec.dim
        G = rng.standard_normal((D, C))
        if D >= C:
            Q, _ = np.linalg.qr(G)
            self.directions = np.ascontiguousarray(Q.T)
        else:
            self.directions = _unit_rows(G.T)
        noisy = self.directions + spec.prototype_perturbation * rng.standard_normal((C, D))
        self.zero_shot = PrototypeClassifier(_unit_rows(noisy), spec.temperature)

    def sample(self, n: int, seed) -> EmbeddingSet:
        """Draw ``n`` i.i.d. labeled samples from the stream ``seed``."""
        if n < 1:
            raise ValueError("n must be positive")
        spec = self.spec
        rng = np.random.default_rng(seed)
        y = rng.choice(spec.num_classes, size=n, p=spec.marginal.probs)
        X = spec.concentration * self.directions[y] + rng.standard_normal((n, spec.dim))
        return EmbeddingSet(_unit_rows(X), y, spec.num_classes)

    def source(self, n: int):
        """A per-trial data source: ``seed -> fresh sample of size n``."""
        return lambda seed: self.sample(n, seed)


def generate(spec: SynthSpec):
    """Returns ``(pool, zero_shot_classifier, true_directions)``."""
    world = SynthWorld(spec)
    return world.sample(spec.n_samples, [spec.seed, 1]), world.zero_shot, world.directions
