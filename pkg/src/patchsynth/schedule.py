"""Synthesis schedules and the built-in presets.

A schedule is stored as JSON. Layer 0 is the finest layer (it produces the
final image); layer ``depth - 1`` upsamples the seed.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field

from .dictionary import ContextSpec
from .epll import IterationParams, location_set
from .errors import ConfigurationError

SCHEMA = "patchsynth.schedule/1"


@dataclass(frozen=True)
class LayerSchedule:
    overlap: int
    window: int
    iterations: tuple[IterationParams, ...]
    context: ContextSpec = field(default_factory=ContextSpec)

    @property
    def n_iterations(self) -> int:
        return len(self.iterations)


@dataclass(frozen=True)
class SynthesisSchedule:
    name: str
    image_size: tuple[int, int]
    patch_side: int
    layers: tuple[LayerSchedule, ...]
    candidates: int = 16
    originality_mask: tuple[int, int, int, int] | None = None  # (y0, y1, x0, x1)

    def __post_init__(self):
        self.validate()

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def layer_sizes(self) -> list[tuple[int, int]]:
        """Image size produced at each layer, ``[0 .. depth]`` (the last one is the seed)."""
        h, w = self.image_size
        return [(h >> l, w >> l) for l in range(self.depth + 1)]

    @property
    def seed_size(self) -> tuple[int, int]:
        return self.layer_sizes[-1]

    @property
    def overlaps(self) -> list[int]:
        return [l.overlap for l in self.layers]

    @property
    def windows(self) -> list[int]:
        return [l.window for l in self.layers]

    @property
    def iteration_counts(self) -> list[int]:
        return [l.n_iterations for l in self.layers]

    def validate(self) -> None:
        h, w = self.image_size
        if self.patch_side < 2 or self.patch_side % 2:
            raise ConfigurationError(f"patch side must be even and >= 2, got {self.patch_side}")
        if self.candidates < 1:
            raise ConfigurationError("candidates must be >= 1")
        if h % (1 << self.depth) or w % (1 << self.depth):
            raise ConfigurationError(f"image size {h}x{w} is not divisible by 2^{self.depth}")
        for l, layer in enumerate(self.layers):
            if not layer.iterations:
                raise ConfigurationError(f"layer {l} has no iterations")
            if layer.window < 0:
                raise ConfigurationError(f"layer {l}: negative neighbour window")
            lh, lw = self.layer_sizes[l]
            if lh < self.patch_side or lw < self.patch_side:
                raise ConfigurationError(f"layer {l} ({lh}x{lw}) is smaller than the patch")
            for it in layer.iterations:
                location_set((lh, lw), self.patch_side, layer.overlap, it.offset, l)

    def locations(self, layer: int, iteration: int):
        it = self.layers[layer].iterations[iteration]
        return location_set(self.layer_sizes[layer], self.patch_side, self.layers[layer].overlap, it.offset, layer)

    def all_locations(self, layer: int):
        """Union of the location sets of every iteration of ``layer`` (ordered, unique)."""
        seen = {}
        for k in range(self.layers[layer].n_iterations):
            for loc in self.locations(layer, k):
                seen.setdefault(loc, None)
        return list(seen)

    def to_dict(self) -> dict:
        return {
            "schema": SCHEMA,
            "name": self.name,
            "image_size": list(self.image_size),
            "patch_side": self.patch_side,
            "candidates": self.candidates,
            "originality_mask": list(self.originality_mask) if self.originality_mask else None,
            "layers": [
                {
                    "overlap": l.overlap,
                    "window": l.window,
                    "context": l.context.to_dict(),
                    "iterations": [
                        {"lambda": it.lam, "rho": it.rho, "h": it.h, "offset": list(it.offset)}
                        for it in l.iterations
                    ],
                }
                for l in self.layers
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SynthesisSchedule":
        if d.get("schema", SCHEMA) != SCHEMA:
            raise ConfigurationError(f"unsupported schedule schema {d.get('schema')!r}")
        try:
            layers = tuple(
                LayerSchedule(
                    overlap=int(l["overlap"]),
                    window=int(l.get("window", 0)),
                    context=ContextSpec.from_dict(l.get("context")),
                    iterations=tuple(
                        IterationParams(
                            lam=float(it["lambda"]),
                            rho=float(it["rho"]),
                            h=float(it["h"]),
                            offset=tuple(int(v) for v in it.get("offset", (0, 0))),
                        )
                        for it in l["iterations"]
                    ),
                )
                for l in d["layers"]
            )
            mask = d.get("originality_mask")
            return cls(
                name=str(d.get("name", "custom")),
                image_size=tuple(int(v) for v in d["image_size"]),
                patch_side=int(d["patch_side"]),
                layers=layers,
                candidates=int(d.get("candidates", 16)),
                originality_mask=tuple(int(v) for v in mask) if mask else None,
            )
        except (KeyError, TypeError) as exc:
            raise ConfigurationError(f"malformed schedule: {exc!r}") from None

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()


def _its(hs, lams, rhos, offsets):
    if not len(hs) == len(lams) == len(rhos) == len(offsets):
        raise ValueError("per-iteration lists differ in length")
    return [
        {"lambda": lam, "rho": rho, "h": h, "offset": list(off)}
        for h, lam, rho, off in zip(hs, lams, rhos, offsets)
    ]


def _p2(*exps):
    return [2.0**e for e in exps]


_DIGIT_CONTEXT = {"kind": "square", "extent": 2, "weight": 0.5}
_FACE_CONTEXT = {"kind": "horizontal", "extent": 2, "weight": 0.5}
_SPIN4 = [(0, 0), (1, 0), (0, 1), (1, 1)]
_SPIN9 = [(0, 0), (1, 2), (2, 0), (0, 1), (2, 2), (1, 0), (0, 2), (2, 1), (1, 1)]

PRESETS = {
    "mnist-digit": {
        "schema": SCHEMA,
        "name": "mnist-digit",
        "image_size": [32, 32],
        "patch_side": 6,
        "candidates": 16,
        "originality_mask": None,
        "layers": [
            {
                "overlap": 2,
                "window": 2,
                "context": _DIGIT_CONTEXT,
                "iterations": _its(_p2(3, 4, 5, 6), _p2(-4, -4, -4, -4), _p2(-10, -5, 0, 5), _SPIN4),
            },
            {
                "overlap": 2,
                "window": 1,
                "context": _DIGIT_CONTEXT,
                "iterations": _its(_p2(3, 4, 5, 6), _p2(-4, -4, -4, -4), _p2(-10, -6.67, -3.33, 0), _SPIN4),
            },
            {
                "overlap": 2,
                "window": 0,
                "context": _DIGIT_CONTEXT,
                "iterations": _its([100.0, 100.0], [0.0, 0.1], [0.01, 100.0], [(0, 0), (0, 0)]),
            },
        ],
    },
    "aligned-face": {
        "schema": SCHEMA,
        "name": "aligned-face",
        "image_size": [128, 128],
        "patch_side": 8,
        "candidates": 16,
        "originality_mask": [16, 112, 16, 112],
        "layers": [
            {
                "overlap": 2,
                "window": 0,
                "context": _FACE_CONTEXT,
                "iterations": _its(
                    _p2(1, -0.25, -1.5, -2.75, -4),
                    _p2(-3, -2.25, -1.5, -0.75, 0),
                    _p2(-3, -1.25, 0.5, 2.25, 4),
                    [(0, 0), (2, 0), (1, 1), (0, 2), (2, 2)],
                ),
            },
            {
                "overlap": 2,
                "window": 0,
                "context": _FACE_CONTEXT,
                "iterations": _its(
                    _p2(2, 1.25, 0.5, -0.25, -1, -1.75, -2.5, -3.25, -4),
                    _p2(-3, -2.625, -2.25, -1.875, -1.5, -1.125, -0.75, -0.375, 0),
                    _p2(-3, -2.125, -1.25, -0.375, 0.5, 1.375, 2.25, 3.125, 4),
                    _SPIN9,
                ),
            },
            {
                "overlap": 2,
                "window": 0,
                "context": _FACE_CONTEXT,
                "iterations": _its(
                    _p2(0, -0.25, -0.5, -0.75, -1, -1.25, -1.5, -1.75, -2),
                    _p2(-3, -2.625, -2.25, -1.875, -1.5, -1.125, -0.75, -0.375, 0),
                    _p2(-3, -2.375, -1.75, -1.125, -0.5, 0.125, 0.75, 1.375, 2),
                    _SPIN9,
                ),
            },
            {
                "overlap": 4,
                "window": 0,
                "context": _FACE_CONTEXT,
                "iterations": _its([10.0] * 4, [0.001] * 4, [0.001] * 4, _SPIN4),
            },
        ],
    },
}


def _merge(base, over):
    if isinstance(base, dict) and isinstance(over, dict):
        out = dict(base)
        for k, v in over.items():
            out[k] = _merge(base.get(k), v) if k in base else copy.deepcopy(v)
        return out
    if isinstance(base, list) and isinstance(over, list) and len(base) == len(over) and all(
        isinstance(b, dict) for b in base
    ):
        return [_merge(b, o) if o is not None else copy.deepcopy(b) for b, o in zip(base, over)]
    return copy.deepcopy(over)


def load_schedule(preset: str | None = None, path=None, overrides: dict | None = None) -> SynthesisSchedule:
    """Build a schedule from a preset name and/or a JSON file, then apply overrides.

    Overrides merge field by field; a list of layer dicts of the same length
    merges element-wise, ``null`` entries leaving that layer untouched.
    """
    if preset is None and path is None:
        raise ConfigurationError("need a preset name or a schedule file")
    base = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigurationError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        base = copy.deepcopy(PRESETS[preset])
    if path is not None:
        with open(path) as f:
            base = _merge(base, json.load(f)) if base else json.load(f)
    if overrides:
        base = _merge(base, overrides)
    return SynthesisSchedule.from_dict(base)
