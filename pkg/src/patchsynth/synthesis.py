"""Layer-by-layer synthesis from a tiny seed image."""
from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .dictionary import LayerBank, PatchDictionary, build_dictionaries
from .epll import AdmmState, admm_terms, u_step, x_step, z_step
from .errors import ConfigurationError, DimensionError
from .image import build_pyramid, downsample, upsample_bilinear
from .schedule import SynthesisSchedule

# on_iteration(layer, iteration, estimate (B, H, W), info dict)
IterationCallback = Callable[[int, int, np.ndarray, dict], None]


@dataclass
class RunRecord:
    seed_id: str
    root_seed: int
    schedule_hash: str
    layer_outputs: list[str] = field(default_factory=list)
    wall_time: float = 0.0
    schedule_name: str = ""
    corpus_checksum: str | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(**d)


def make_seed(test_image, pad_to=None, seed_size=(4, 4)) -> np.ndarray:
    """Zero-pad ``test_image`` centred to ``pad_to`` and downsample to ``seed_size``."""
    img = np.asarray(test_image, dtype=np.float64)
    h, w = img.shape
    ph, pw = pad_to if pad_to is not None else (h, w)
    if ph < h or pw < w:
        raise ConfigurationError(f"cannot pad {h}x{w} to smaller {ph}x{pw}")
    top, left = (ph - h) // 2, (pw - w) // 2
    padded = np.zeros((ph, pw))
    padded[top : top + h, left : left + w] = img
    sh, sw = seed_size
    if ph % sh or pw % sw or ph // sh != pw // sw:
        raise ConfigurationError(f"{ph}x{pw} -> {sh}x{sw} is not a uniform power-of-2 reduction")
    ratio = ph // sh
    steps = int(round(math.log2(ratio)))
    if 2**steps != ratio:
        raise ConfigurationError(f"reduction factor {ratio} is not a power of 2")
    out = padded
    for _ in range(steps):
        out = downsample(out)
    return out


def gaussian_seeds(training_seeds, count: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``count`` seeds from a Gaussian fitted to ``training_seeds`` ``(N, h, w)``."""
    t = np.asarray(training_seeds, dtype=np.float64)
    if t.ndim != 3 or t.shape[0] < 2:
        raise ConfigurationError("need at least two training seeds to fit a Gaussian")
    flat = t.reshape(t.shape[0], -1)
    draws = rng.multivariate_normal(flat.mean(axis=0), np.cov(flat, rowvar=False), size=count, method="eigh")
    return draws.reshape((count,) + t.shape[1:])


class SynthesisModel:
    """Training corpus of one image class, turned into per-layer dictionaries."""

    def __init__(self, schedule: SynthesisSchedule, training_images, corpus_checksum: str | None = None):
        imgs = np.asarray(training_images, dtype=np.float64)
        if imgs.ndim != 3 or imgs.shape[0] == 0:
            raise ConfigurationError(f"training images must be a non-empty (N, H, W) stack, got {imgs.shape}")
        if tuple(imgs.shape[1:]) != tuple(schedule.image_size):
            raise DimensionError(f"training images are {imgs.shape[1:]}, schedule expects {schedule.image_size}")
        self.schedule = schedule
        self.corpus_checksum = corpus_checksum
        self.levels = build_pyramid(imgs, schedule.depth)
        self.banks = []
        self.dicts: list[dict] = []
        for l, layer in enumerate(schedule.layers):
            bank = LayerBank(self.levels[l], self.levels[l + 1], l, schedule.patch_side, layer.context)
            self.banks.append(bank)
            self.dicts.append(
                build_dictionaries(bank, l, schedule.all_locations(l), schedule.patch_side, layer.window, layer.context)
            )

    @property
    def n_images(self) -> int:
        return self.levels[0].shape[0]

    def synthesize(self, seed, root_seed: int, **kw):
        return synthesize(seed, self.schedule, self.dicts, root_seed, corpus_checksum=self.corpus_checksum, **kw)

    def synthesize_batch(self, seeds, root_seeds, **kw):
        return synthesize_batch(seeds, self.schedule, self.dicts, root_seeds, **kw)


def layer_synthesis(
    lr_image,
    layer: int,
    dicts: dict[PatchDictionary],
    schedule: SynthesisSchedule,
    root_seeds,
    backend: str = "scan",
    on_iteration: IterationCallback | None = None,
    record: list | None = None,
) -> np.ndarray:
    """Upscale ``lr_image`` (``(h, w)`` or ``(B, h, w)``) by 2 with randomised EPLL.

    Duals are reset whenever the active location set changes between
    iterations (a cycle-spinning offset change).
    """
    y = np.asarray(lr_image, dtype=np.float64)
    squeeze = y.ndim == 2
    if squeeze:
        y = y[None]
    expect = schedule.layer_sizes[layer + 1]
    if tuple(y.shape[-2:]) != tuple(expect):
        raise DimensionError(f"layer {layer} expects a {expect} input, got {y.shape[-2:]}")
    lay = schedule.layers[layer]
    n = schedule.patch_side
    state = AdmmState.fresh(upsample_bilinear(y), (), n)
    for k, it in enumerate(lay.iterations):
        locs = tuple(schedule.locations(layer, k))
        if locs != state.locations:
            state.reset_duals(locs, n)
        state.iteration = k
        trace = {} if record is not None else None
        z = z_step(state, dicts, y, it, root_seeds, layer, schedule.candidates, backend, record=trace)
        duals_before = state.duals
        x_new = x_step(z, state.duals, y, it.lam, it.rho, locs, state.estimate)
        state.duals = u_step(state.duals, z, x_new, locs)
        state.estimate = x_new
        if record is not None:
            record.append({"layer": layer, "iteration": k, "choices": trace})
        if on_iteration is not None:
            terms = admm_terms(x_new, y, z, duals_before, it.lam, it.rho, locs)
            info = {
                "layer": layer,
                "iteration": k,
                "lambda": it.lam,
                "rho": it.rho,
                "h": it.h,
                "offset": list(it.offset),
                **{key: v.tolist() for key, v in terms.items()},
            }
            on_iteration(layer, k, x_new, info)
    return state.estimate[0] if squeeze else state.estimate


def synthesize_batch(
    seeds,
    schedule: SynthesisSchedule,
    dicts_by_layer,
    root_seeds,
    backend: str = "scan",
    on_iteration: IterationCallback | None = None,
) -> tuple[np.ndarray, list[np.ndarray]]:
    """Run ``B`` syntheses in lockstep.

    Returns the final images ``(B, H, W)`` and the per-layer outputs
    ``[X_0, ..., X_L]`` (each ``(B, h_l, w_l)``; ``X_L`` is the seed batch).
    """
    x = np.asarray(seeds, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if tuple(x.shape[-2:]) != tuple(schedule.seed_size):
        raise DimensionError(f"seed must be {schedule.seed_size}, got {x.shape[-2:]}")
    root_seeds = np.broadcast_to(np.asarray(root_seeds, dtype=np.int64), (x.shape[0],))
    outputs = [x]
    for l in range(schedule.depth - 1, -1, -1):
        x = layer_synthesis(x, l, dicts_by_layer[l], schedule, root_seeds, backend, on_iteration)
        outputs.append(x)
    return x, outputs[::-1]


def synthesize(
    seed,
    schedule: SynthesisSchedule,
    dicts_by_layer,
    root_seed: int,
    seed_id: str = "",
    corpus_checksum: str | None = None,
    backend: str = "scan",
    on_iteration: IterationCallback | None = None,
) -> tuple[np.ndarray, RunRecord]:
    """Single-run synthesis; returns the final image and its :class:`RunRecord`."""
    t0 = time.perf_counter()
    final, layers = synthesize_batch(seed, schedule, dicts_by_layer, [root_seed], backend, on_iteration)
    rec = RunRecord(
        seed_id=seed_id,
        root_seed=int(root_seed),
        schedule_hash=schedule.hash(),
        schedule_name=schedule.name,
        corpus_checksum=corpus_checksum,
        wall_time=time.perf_counter() - t0,
    )
    rec.layers = [l[0] for l in layers]  # in-memory only, not serialised
    return final[0], rec
