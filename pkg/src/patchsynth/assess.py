"""Scoring generated images against a training corpus.

Three scores, in order of importance:

* log-likelihood under a Parzen-window patch prior built from the
  training images (every fully-overlapping patch location has its own
  kernel set),
* originality, the distance to the nearest training image relative to
  how close that training image is to its own nearest neighbour,
* spread, which compares how densely generated and training images
  populate the neighbourhood of each training image.

A rank-aware variant of the patch density replaces the patch dimension
in the kernel normaliser by the numerical rank of a local covariance.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .dictionary import exact_sqdist, nearest_rows
from .errors import ConfigurationError, DimensionError, NumericalError
from .image import PatchLocation

DEFAULT_SIGMA = 1.0 / math.sqrt(2.0 * math.pi)
REPORT_SCHEMA = "patchsynth.report/1"


# -- Parzen log-likelihood ---------------------------------------------------------


@dataclass(frozen=True)
class LlConfig:
    """Parzen settings. ``shortlist=None`` sums over every training patch."""

    sigma: float = DEFAULT_SIGMA
    patch_side: int = 6
    shortlist: int | None = None

    def __post_init__(self):
        if not self.sigma > 0:
            raise ConfigurationError(f"sigma must be positive, got {self.sigma}")
        if self.patch_side < 1:
            raise ConfigurationError("patch side must be positive")
        if self.shortlist is not None and self.shortlist < 1:
            raise ConfigurationError("shortlist size must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def _log_kernel_terms(sqdist, sigma: float, dim) -> np.ndarray:
    # log of (2 pi sigma^2)^(-dim/2) exp(-d / 2 sigma^2); dim may be per-row
    return -0.5 * np.asarray(dim, dtype=np.float64) * math.log(2.0 * math.pi * sigma * sigma) - np.asarray(
        sqdist
    ) / (2.0 * sigma * sigma)


def patch_log_density(x, patches, sigma: float = DEFAULT_SIGMA) -> float:
    """Log Parzen density of patch ``x`` under the kernel set ``patches``."""
    patches = np.atleast_2d(np.asarray(patches, dtype=np.float64))
    x = np.asarray(x, dtype=np.float64).ravel()
    if patches.shape[0] == 0:
        raise ConfigurationError("patch density needs a non-empty kernel set")
    if patches.shape[1] != x.size:
        raise DimensionError(f"patch has {x.size} values, kernels have {patches.shape[1]}")
    if not sigma > 0:
        raise ConfigurationError("sigma must be positive")
    terms = _log_kernel_terms(exact_sqdist(x, patches), sigma, x.size)
    return float(logsumexp(terms) - math.log(patches.shape[0]))


def full_overlap_locations(image_size, patch_side: int) -> list[PatchLocation]:
    h, w = image_size
    return [PatchLocation(x, y, 0) for y in range(h - patch_side + 1) for x in range(w - patch_side + 1)]


def _patch_rows(stack: np.ndarray, loc: PatchLocation, n: int) -> np.ndarray:
    return np.ascontiguousarray(stack[:, loc.y : loc.y + n, loc.x : loc.x + n].reshape(stack.shape[0], n * n))


class ParzenModel:
    """Per-location Parzen kernels taken from a stack of training images.

    By default every fully-overlapping location of the image holds a kernel
    set; ``locations`` may restrict that, in which case scoring an image
    that needs a missing location is a configuration error.
    """

    def __init__(self, training, config: LlConfig = LlConfig(), locations=None):
        t = np.asarray(training, dtype=np.float64)
        if t.ndim == 2:
            t = t[None]
        if t.ndim != 3 or t.shape[0] == 0:
            raise ConfigurationError(f"training set must be a non-empty (N, H, W) stack, got {t.shape}")
        n = config.patch_side
        if t.shape[1] < n or t.shape[2] < n:
            raise DimensionError(f"{t.shape[1]}x{t.shape[2]} images are smaller than the {n}x{n} patch")
        self.training = t
        self.config = config
        grid = full_overlap_locations(t.shape[1:], n)
        self.locations = list(grid) if locations is None else [PatchLocation(l.x, l.y, 0) for l in locations]
        self._available = set(self.locations)
        self._eig_cache: dict = {}

    @property
    def image_size(self) -> tuple[int, int]:
        return self.training.shape[1], self.training.shape[2]

    def __len__(self) -> int:
        return self.training.shape[0]

    def kernels(self, loc: PatchLocation) -> np.ndarray:
        if loc not in self._available:
            raise ConfigurationError(f"no dictionary for location x={loc.x}, y={loc.y}")
        return _patch_rows(self.training, loc, self.config.patch_side)

    def required_locations(self, image_size) -> list[PatchLocation]:
        if tuple(image_size) != self.image_size:
            raise DimensionError(f"model covers {self.image_size} images, got {tuple(image_size)}")
        need = full_overlap_locations(image_size, self.config.patch_side)
        for loc in need:
            if loc not in self._available:
                raise ConfigurationError(f"no dictionary for location x={loc.x}, y={loc.y}")
        return need

    def sqdists(self, loc: PatchLocation, probes: np.ndarray) -> np.ndarray:
        """``(B, N)`` squared distances from probe patches to the kernels at ``loc``.

        Uses the BLAS expansion clamped at zero; the absolute error is a
        few ulps of ``|q|^2 + |a|^2``, far below what moves a log-density.
        """
        a = self.kernels(loc)
        an = np.einsum("ij,ij->i", a, a)
        qn = np.einsum("ij,ij->i", probes, probes)
        return np.maximum(qn[:, None] + an[None, :] - 2.0 * (probes @ a.T), 0.0)

    def location_log_density(self, loc: PatchLocation, probes) -> np.ndarray:
        """Log density of each probe row at ``loc`` (exact or shortlisted)."""
        probes = np.atleast_2d(np.asarray(probes, dtype=np.float64))
        cfg = self.config
        dim = cfg.patch_side**2
        if cfg.shortlist is None or cfg.shortlist >= len(self):
            d = self.sqdists(loc, probes)
        else:
            _, d = nearest_rows(probes, self.kernels(loc), cfg.shortlist)
        return logsumexp(_log_kernel_terms(d, cfg.sigma, dim), axis=1) - math.log(len(self))

    def eigenvalues(self, loc: PatchLocation, neighbours: int, neighbour_sigma: float) -> np.ndarray:
        key = (loc, neighbours, neighbour_sigma)
        if key not in self._eig_cache:
            self._eig_cache[key] = local_covariance_eigenvalues(self.kernels(loc), neighbours, neighbour_sigma)
        return self._eig_cache[key]

    def clear_cache(self) -> None:
        self._eig_cache.clear()


def _as_batch(images) -> np.ndarray:
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3:
        raise DimensionError(f"expected an image or an (N, H, W) stack, got shape {x.shape}")
    return x


def log_likelihoods(images, model: ParzenModel) -> np.ndarray:
    """Image log-likelihood of every image in a stack.

    The per-pixel value is the summed patch log-density divided by the
    total patch coverage (locations times patch pixels); the image score
    multiplies that back by the pixel count.
    """
    x = _as_batch(images)
    need = model.required_locations(x.shape[1:])
    n = model.config.patch_side
    total = np.zeros(x.shape[0])
    for loc in need:
        total += model.location_log_density(loc, _patch_rows(x, loc, n))
    per_pixel = total / (len(need) * n * n)
    return per_pixel * (x.shape[1] * x.shape[2])


def image_log_likelihood(image, model: ParzenModel) -> float:
    return float(log_likelihoods(np.asarray(image)[None], model)[0])


def seed_log_likelihoods(seeds, training_seeds, sigma: float = DEFAULT_SIGMA) -> np.ndarray:
    """Log-likelihood of seed-scale images with one whole-image kernel per training seed."""
    s = _as_batch(seeds)
    t = _as_batch(training_seeds)
    if s.shape[1] != s.shape[2]:
        raise DimensionError("seed log-likelihood needs square seeds")
    model = ParzenModel(t, LlConfig(sigma=sigma, patch_side=s.shape[1]))
    return log_likelihoods(s, model)


SHORTLIST_TOLERANCE = 0.1


def validate_shortlist(calibration, model: ParzenModel, tolerance: float = SHORTLIST_TOLERANCE) -> float:
    """Check a shortlisted model against exact scores on a calibration stack.

    Returns the largest per-image gap; raises :class:`NumericalError` if it
    exceeds ``tolerance``. A model without a shortlist passes trivially.
    """
    if model.config.shortlist is None or model.config.shortlist >= len(model):
        return 0.0
    exact = ParzenModel(model.training, replace(model.config, shortlist=None), model.locations)
    gap = float(np.max(np.abs(log_likelihoods(calibration, model) - log_likelihoods(calibration, exact))))
    if gap > tolerance:
        raise NumericalError(
            f"shortlist of {model.config.shortlist} deviates from exact scores by {gap:.4g} per image "
            f"(allowed {tolerance})",
            residual=gap,
        )
    return gap


# -- rank-aware density ------------------------------------------------------------


@dataclass(frozen=True)
class RankConfig:
    """Local covariance settings: ``neighbours`` nearest kernels weighted at width ``neighbour_sigma``."""

    neighbours: int = 64
    neighbour_sigma: float = DEFAULT_SIGMA

    def __post_init__(self):
        if self.neighbours < 1:
            raise ConfigurationError("neighbours must be >= 1")
        if not self.neighbour_sigma > 0:
            raise ConfigurationError("neighbour sigma must be positive")


def local_covariance_eigenvalues(patches, neighbours: int = 64, neighbour_sigma: float = DEFAULT_SIGMA) -> np.ndarray:
    """Eigenvalues (ascending, per row) of each kernel's local covariance.

    For kernel ``y`` the covariance is ``sum_z p(z|y) (z - y)(z - y)^T``
    over its ``neighbours`` nearest other kernels, with weights
    ``p(z|y)`` proportional to ``exp(-|z - y|^2 / 2 s^2)`` and normalised
    over those neighbours.
    """
    y = np.atleast_2d(np.asarray(patches, dtype=np.float64))
    m, dim = y.shape
    if m < 2:
        raise ConfigurationError("local covariance needs at least two kernels")
    k = min(neighbours, m - 1)
    idx, d = nearest_rows(y, y, k + 1)
    # drop each row's own index; if it was crowded out by duplicates, drop the last
    own = idx == np.arange(m)[:, None]
    has_own = own.any(axis=1)
    own[~has_own, -1] = True
    keep = ~own
    idx = idx[keep].reshape(m, k)
    d = d[keep].reshape(m, k)
    logw = -d / (2.0 * neighbour_sigma**2)
    w = np.exp(logw - logw.max(axis=1, keepdims=True))
    w /= w.sum(axis=1, keepdims=True)
    out = np.empty((m, dim))
    chunk = max(1, 2**22 // (k * dim))
    for s in range(0, m, chunk):
        e = slice(s, s + chunk)
        diff = (y[idx[e]] - y[e, None, :]) * np.sqrt(w[e])[:, :, None]
        cov = np.matmul(diff.transpose(0, 2, 1), diff)
        try:
            out[e] = np.linalg.eigvalsh(cov)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"local covariance eigendecomposition failed: {exc}") from None
    return out


def numerical_rank(eigenvalues, epsilon: float) -> np.ndarray:
    return np.sum(np.asarray(eigenvalues) > epsilon, axis=-1)


def rank_aware_log_density(
    x,
    patches,
    sigma: float = DEFAULT_SIGMA,
    epsilon: float = 0.1,
    neighbours: int = 64,
    neighbour_sigma: float = DEFAULT_SIGMA,
    eigenvalues=None,
) -> float:
    """Parzen log density with each kernel normalised in its numerical rank."""
    patches = np.atleast_2d(np.asarray(patches, dtype=np.float64))
    x = np.asarray(x, dtype=np.float64).ravel()
    if patches.shape[0] < 2:
        raise ConfigurationError("rank-aware density needs at least two kernels")
    if not sigma > 0:
        raise ConfigurationError("sigma must be positive")
    if eigenvalues is None:
        eigenvalues = local_covariance_eigenvalues(patches, neighbours, neighbour_sigma)
    ranks = numerical_rank(eigenvalues, epsilon)
    terms = _log_kernel_terms(exact_sqdist(x, patches), sigma, ranks)
    return float(logsumexp(terms) - math.log(patches.shape[0]))


@dataclass
class SweepTable:
    sigmas: list[float]
    epsilons: list[float]
    per_image: np.ndarray  # (n_sigma, n_epsilon, n_images)

    @property
    def mean(self) -> np.ndarray:
        return self.per_image.mean(axis=-1)

    def rows(self):
        for a, s in enumerate(self.sigmas):
            for b, e in enumerate(self.epsilons):
                yield s, e, float(self.mean[a, b])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["sigma", "epsilon", "mean_ll", "n_images"])
            for s, e, v in self.rows():
                w.writerow([repr(float(s)), repr(float(e)), repr(v), self.per_image.shape[-1]])


def ll_sweep(
    images,
    model: ParzenModel,
    sigmas: Sequence[float],
    epsilons: Sequence[float],
    rank: RankConfig = RankConfig(),
) -> SweepTable:
    """Rank-aware image log-likelihood over a ``sigma x epsilon`` grid.

    Distances and local covariance spectra are computed once per location
    and reused for every grid point.
    """
    sigmas = [float(s) for s in sigmas]
    epsilons = [float(e) for e in epsilons]
    if not sigmas or not epsilons:
        raise ConfigurationError("sweep grids must be non-empty")
    if any(not s > 0 for s in sigmas):
        raise ConfigurationError("sweep sigmas must be positive")
    x = _as_batch(images)
    need = model.required_locations(x.shape[1:])
    n = model.config.patch_side
    logn = math.log(len(model))
    total = np.zeros((len(sigmas), len(epsilons), x.shape[0]))
    for loc in need:
        d = model.sqdists(loc, _patch_rows(x, loc, n))
        eig = model.eigenvalues(loc, rank.neighbours, rank.neighbour_sigma)
        for b, eps in enumerate(epsilons):
            ranks = numerical_rank(eig, eps)
            for a, s in enumerate(sigmas):
                total[a, b] += logsumexp(_log_kernel_terms(d, s, ranks[None, :]), axis=1) - logn
        model.clear_cache()
    per_image = total / (len(need) * n * n) * (x.shape[1] * x.shape[2])
    return SweepTable(sigmas, epsilons, per_image)


# -- originality -------------------------------------------------------------------


def _flatten(stack: np.ndarray, mask) -> np.ndarray:
    if mask is not None:
        y0, y1, x0, x1 = mask
        if not (0 <= y0 < y1 <= stack.shape[1] and 0 <= x0 < x1 <= stack.shape[2]):
            raise ConfigurationError(f"mask {tuple(mask)} does not fit {stack.shape[1:]} images")
        stack = stack[:, y0:y1, x0:x1]
    flat = stack.reshape(stack.shape[0], -1)
    # pad rows to a multiple of 8 values so equal rows reduce identically
    pad = (-flat.shape[1]) % 8
    return np.ascontiguousarray(np.pad(flat, ((0, 0), (0, pad))) if pad else flat)


@dataclass
class OriginalityResult:
    ratio: np.ndarray
    d_generated: np.ndarray
    d_training: np.ndarray
    nearest: np.ndarray

    def to_csv(self, path, ids=None) -> None:
        ids = list(ids) if ids is not None else list(range(len(self.ratio)))
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["image_id", "d_generated", "d_training", "originality", "nearest_training"])
            for row in zip(ids, self.d_generated, self.d_training, self.ratio, self.nearest):
                w.writerow([row[0], repr(float(row[1])), repr(float(row[2])), repr(float(row[3])), int(row[4])])


def originality_batch(images, training, mask=None) -> OriginalityResult:
    """Originality ``d_G / d_T`` for every image of a stack.

    ``d_G`` is the distance to the nearest training image ``X_NN`` and
    ``d_T`` the distance from ``X_NN`` to its nearest other training image
    (excluded by index, so a duplicate of ``X_NN`` gives ``d_T = 0``).
    An image at distance zero scores 0. ``mask = (y0, y1, x0, x1)``
    restricts the comparison to that window.
    """
    t = _as_batch(training)
    if t.shape[0] < 2:
        raise ConfigurationError("originality needs at least two training images")
    x = _as_batch(images)
    if x.shape[1:] != t.shape[1:]:
        raise DimensionError(f"images are {x.shape[1:]}, training images are {t.shape[1:]}")
    tf = _flatten(t, mask)
    xf = _flatten(x, mask)
    tn = np.einsum("ij,ij->i", tf, tf)
    nn, dg = nearest_rows(xf, tf, 1, row_norms=tn)
    nn, dg = nn[:, 0], np.sqrt(dg[:, 0])
    uniq = np.unique(nn)
    pair_i, pair_d = nearest_rows(tf[uniq], tf, 2, row_norms=tn)
    first_other = np.where(pair_i[:, 0] == uniq, 1, 0)
    dt_u = np.sqrt(pair_d[np.arange(len(uniq)), first_other])
    dt = dt_u[np.searchsorted(uniq, nn)]
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(dg == 0, 0.0, dg / dt)
    return OriginalityResult(ratio, dg, dt, nn)


def originality(image, training, mask=None) -> tuple[float, float, float]:
    """``(ratio, d_G, d_T)`` for a single image."""
    r = originality_batch(np.asarray(image)[None], training, mask)
    return float(r.ratio[0]), float(r.d_generated[0]), float(r.d_training[0])


# -- spread ------------------------------------------------------------------------


@dataclass(frozen=True)
class SpreadConfig:
    perplexity: float = 30.0
    tolerance: float = 1e-6  # relative to the perplexity
    max_steps: int = 200
    sigma_bounds: tuple[float, float] = (1e-8, 1e8)

    def __post_init__(self):
        if self.perplexity < 2:
            raise ConfigurationError(f"perplexity must be >= 2, got {self.perplexity}")
        lo, hi = self.sigma_bounds
        if not 0 < lo < hi:
            raise ConfigurationError("sigma bounds must satisfy 0 < low < high")
        if self.tolerance <= 0 or self.max_steps < 1:
            raise ConfigurationError("tolerance and step count must be positive")


def neighbour_probabilities(sqdist, sigma: float) -> tuple[np.ndarray, float]:
    """``p_j`` proportional to ``exp(-d_j / 2 sigma^2)`` and the perplexity ``exp(H(P))``."""
    a = -np.asarray(sqdist, dtype=np.float64) / (2.0 * sigma * sigma)
    a = a - a.max()
    e = np.exp(a)
    z = e.sum()
    p = e / z
    entropy = math.log(z) - float(np.dot(p, a))
    return p, math.exp(entropy)


def calibrate_sigma(sqdist, config: SpreadConfig = SpreadConfig()) -> tuple[float, float]:
    """Bisect ``log sigma`` until the perplexity matches ``config.perplexity``.

    Returns ``(sigma, achieved perplexity)``; raises :class:`NumericalError`
    when the target is not reached within ``config.max_steps`` steps.
    """
    target = config.perplexity
    lo, hi = (math.log(b) for b in config.sigma_bounds)
    perp = float("nan")
    for _ in range(config.max_steps):
        mid = 0.5 * (lo + hi)
        sigma = math.exp(mid)
        _, perp = neighbour_probabilities(sqdist, sigma)
        if abs(perp - target) <= config.tolerance * target:
            return sigma, perp
        if perp < target:
            lo = mid
        else:
            hi = mid
    raise NumericalError(f"perplexity bisection stalled at {perp:.6g} (target {target})")


@dataclass
class SpreadResult:
    values: np.ndarray  # per training image, NaN where calibration failed
    sigmas: np.ndarray
    failed: list[int] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def aggregate(self) -> float:
        ok = ~np.isnan(self.values)
        return float(np.mean(np.abs(self.values[ok]))) if ok.any() else float("nan")


def spread(training, generated, config: SpreadConfig = SpreadConfig(), mask=None) -> SpreadResult:
    """Spread of ``generated`` around every training image.

    For training image ``i`` the neighbour weights ``p(j|i)`` run over
    ``T ∪ G`` without ``i`` itself, at the width that gives the configured
    perplexity. ``Spread(i)`` is the log ratio of the weighted squared
    distances to generated neighbours over those to training neighbours.
    Both sums are exactly rounded, so a generated set that duplicates the
    training set scores exactly zero.
    """
    t = _flatten(_as_batch(training), mask)
    g = _flatten(_as_batch(generated), mask)
    if t.shape[1] != g.shape[1]:
        raise DimensionError("training and generated images differ in size")
    nt, ng = t.shape[0], g.shape[0]
    if config.perplexity >= nt + ng - 1:
        raise ConfigurationError(f"perplexity {config.perplexity} must be below the neighbour count {nt + ng - 1}")
    notes = []
    ratio = ng / nt
    if not 0.5 <= ratio <= 2.0:
        msg = f"generated/training size ratio {ratio:.3g} is outside [0.5, 2]"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        notes.append(msg)
    both = np.concatenate([t, g])
    values = np.full(nt, np.nan)
    sigmas = np.full(nt, np.nan)
    failed = []
    for i in range(nt):
        d = exact_sqdist(both[i], both)
        d_t, d_g = d[:nt].copy(), d[nt:]
        others = np.concatenate([np.delete(d_t, i), d_g])
        try:
            s, _ = calibrate_sigma(others, config)
        except NumericalError:
            failed.append(i)
            continue
        sigmas[i] = s
        p, _ = neighbour_probabilities(others, s)
        p_t = np.insert(p[: nt - 1], i, 0.0)
        p_g = p[nt - 1 :]
        d_t[i] = 0.0
        num = math.fsum(p_g * d_g)
        den = math.fsum(p_t * d_t)
        with np.errstate(divide="ignore"):
            values[i] = np.log(num) - np.log(den) if num != den else 0.0
    if failed:
        msg = f"perplexity calibration failed for {len(failed)} training images; excluded"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        notes.append(msg)
    return SpreadResult(values, sigmas, failed, notes)


# -- exports -----------------------------------------------------------------------


def pairwise_sqdist(images, mask=None) -> np.ndarray:
    f = _flatten(_as_batch(images), mask)
    return np.stack([exact_sqdist(row, f) for row in f])


def write_matrix(path, matrix, **meta) -> None:
    """Row-major float32 binary at ``path`` plus a JSON header at ``path + '.json'``."""
    m = np.ascontiguousarray(np.asarray(matrix, dtype="<f4"))
    if m.ndim != 2:
        raise DimensionError("matrix export takes a 2-D array")
    path = Path(path)
    path.write_bytes(m.tobytes(order="C"))
    header = {"rows": m.shape[0], "cols": m.shape[1], "dtype": "float32", "byte_order": "little", "order": "row-major"}
    header.update(meta)
    Path(str(path) + ".json").write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")


def read_matrix(path) -> tuple[np.ndarray, dict]:
    header = json.loads(Path(str(path) + ".json").read_text())
    data = np.frombuffer(Path(path).read_bytes(), dtype="<f4")
    if data.size != header["rows"] * header["cols"]:
        raise DimensionError(f"matrix file holds {data.size} values, header says {header['rows']}x{header['cols']}")
    return data.reshape(header["rows"], header["cols"]), header


def export_distances(path, images, ids=None, mask=None) -> None:
    """Squared Euclidean distance matrix for external embedding tools."""
    d = pairwise_sqdist(images, mask)
    write_matrix(path, d, metric="squared_euclidean", ids=list(ids) if ids is not None else None)


# -- reports -----------------------------------------------------------------------


@dataclass
class ImageScore:
    image_id: str
    label: int | None
    ll: float
    originality: float
    d_generated: float
    d_training: float


@dataclass
class SpreadTerm:
    training_id: str
    value: float  # NaN when the perplexity calibration failed


def _mean(values) -> float:
    v = [x for x in values if x is not None and not math.isnan(x)]
    return float(np.mean(v)) if v else float("nan")


@dataclass
class ScoreReport:
    """Per-image scores and the three aggregates derived from them."""

    per_image: list[ImageScore]
    spread_terms: list[SpreadTerm] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    @property
    def mean_ll(self) -> float:
        return _mean(r.ll for r in self.per_image)

    @property
    def mean_originality(self) -> float:
        return _mean(r.originality for r in self.per_image)

    @property
    def spread(self) -> float:
        return _mean(abs(t.value) for t in self.spread_terms)

    @property
    def config_hash(self) -> str:
        canon = json.dumps(self.config, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    def aggregates(self) -> dict:
        return {"mean_ll": self.mean_ll, "mean_originality": self.mean_originality, "spread": self.spread}

    def to_dict(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "config_hash": self.config_hash,
            "aggregates": self.aggregates(),
            "per_image": [asdict(r) for r in self.per_image],
            "spread_terms": [asdict(t) for t in self.spread_terms],
            "config": self.config,
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScoreReport":
        if d.get("schema") != REPORT_SCHEMA:
            raise ConfigurationError(f"unsupported report schema {d.get('schema')!r}")
        return cls(
            per_image=[ImageScore(**r) for r in d["per_image"]],
            spread_terms=[SpreadTerm(**t) for t in d.get("spread_terms", [])],
            config=d.get("config", {}),
            provenance=d.get("provenance", {}),
        )

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=True) + "\n"
        if path is not None:
            Path(path).write_text(text)
        return text

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["image_id", "label", "ll", "originality", "d_generated", "d_training"])
            for r in self.per_image:
                w.writerow(
                    [r.image_id, "" if r.label is None else r.label]
                    + [repr(float(v)) for v in (r.ll, r.originality, r.d_generated, r.d_training)]
                )


def score_images(
    images,
    training,
    image_ids=None,
    label: int | None = None,
    ll_config: LlConfig = LlConfig(),
    spread_config: SpreadConfig | None = SpreadConfig(),
    mask=None,
    spread_reference=None,
    provenance: dict | None = None,
    model: ParzenModel | None = None,
) -> ScoreReport:
    """Score a stack of same-class images against its training corpus.

    ``spread_reference`` selects the training images whose neighbourhoods
    are examined for spread (all of ``training`` by default); pass
    ``spread_config=None`` to skip spread.
    """
    x = _as_batch(images)
    t = _as_batch(training)
    ids = [str(i) for i in (image_ids if image_ids is not None else range(x.shape[0]))]
    if len(ids) != x.shape[0]:
        raise ConfigurationError("image id count does not match the image count")
    model = model if model is not None else ParzenModel(t, ll_config)
    ll = log_likelihoods(x, model)
    org = originality_batch(x, t, mask)
    rows = [
        ImageScore(i, label, float(a), float(b), float(c), float(d))
        for i, a, b, c, d in zip(ids, ll, org.ratio, org.d_generated, org.d_training)
    ]
    terms = []
    if spread_config is not None:
        ref = t if spread_reference is None else _as_batch(spread_reference)
        sp = spread(ref, x, spread_config, mask)
        terms = [SpreadTerm(str(i), float(v)) for i, v in enumerate(sp.values)]
    config = {
        "ll": model.config.to_dict(),
        "spread": asdict(spread_config) if spread_config is not None else None,
        "mask": list(mask) if mask is not None else None,
        "label": label,
    }
    return ScoreReport(rows, terms, config, dict(provenance or {}))
