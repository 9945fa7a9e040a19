"""Randomised EPLL via ADMM for one pyramid layer.

All state arrays carry a leading batch axis ``B`` so that many independent
synthesis runs can advance in lockstep and share one dictionary scan per
location. Every run draws from its own random stream, keyed by
``(root_seed, layer, iteration, y, x)``, and the linear solve is done per
run, so results do not depend on how runs are batched together.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator, cg

from .dictionary import PatchDictionary, knn_batch
from .errors import ConfigurationError, DimensionError, NumericalError
from .image import PatchLocation, downsample_matrix
from .sampler import inverse_cdf, log_weights, normalize_log_weights, stream

CG_TOL = 1e-6  # largest relative residual an x-step may return
CG_TARGET = 1e-10  # residual CG iterates towards
CG_MAXITER = 200


@dataclass(frozen=True)
class IterationParams:
    lam: float
    rho: float
    h: float
    offset: tuple[int, int] = (0, 0)

    def __post_init__(self):
        if self.lam < 0 or self.rho < 0:
            raise ConfigurationError("lambda and rho must be non-negative")
        if not self.h > 0:
            raise ConfigurationError("temperature h must be positive")


@dataclass
class AdmmState:
    """Current estimate ``(B, H, W)`` and the duals of the active location set."""

    estimate: np.ndarray
    locations: tuple[PatchLocation, ...]
    duals: dict[PatchLocation, np.ndarray] = field(default_factory=dict)
    iteration: int = 0

    @classmethod
    def fresh(cls, estimate, locations, patch_side: int, iteration: int = 0) -> "AdmmState":
        est = np.asarray(estimate, dtype=np.float64)
        if est.ndim == 2:
            est = est[None]
        b = est.shape[0]
        duals = {loc: np.zeros((b, patch_side * patch_side)) for loc in locations}
        return cls(est, tuple(locations), duals, iteration)

    def reset_duals(self, locations, patch_side: int) -> None:
        """Start a new splitting: duals only exist for the active constraint set."""
        b = self.estimate.shape[0]
        self.locations = tuple(locations)
        self.duals = {loc: np.zeros((b, patch_side * patch_side)) for loc in self.locations}


def location_set(image_size, patch_side: int, overlap: int, offset=(0, 0), layer: int = 0) -> list[PatchLocation]:
    """Patch grid with stride ``patch_side - overlap`` shifted by ``offset = (dx, dy)``.

    ``image_size`` is ``(height, width)``. Patches leaving the image are dropped.
    """
    h, w = image_size
    stride = patch_side - overlap
    if stride <= 0 or overlap < 0:
        raise ConfigurationError(f"overlap {overlap} must be in [0, {patch_side})")
    dx, dy = offset
    if not (0 <= dx < stride and 0 <= dy < stride):
        raise ConfigurationError(f"offset {tuple(offset)} must lie in [0, {stride})")
    return [
        PatchLocation(x, y, layer)
        for y in range(dy, h - patch_side + 1, stride)
        for x in range(dx, w - patch_side + 1, stride)
    ]


def _patches(estimate: np.ndarray, loc: PatchLocation, n: int) -> np.ndarray:
    return estimate[:, loc.y : loc.y + n, loc.x : loc.x + n].reshape(estimate.shape[0], n * n)


def z_step(
    state: AdmmState,
    dicts: dict[PatchLocation, PatchDictionary],
    lr_image,
    params: IterationParams,
    root_seeds,
    layer: int,
    k: int = 16,
    backend: str = "scan",
    record: dict | None = None,
) -> dict[PatchLocation, np.ndarray]:
    """Draw a dictionary HR patch for every active location.

    ``lr_image`` is the coarser layer ``X_{l+1}`` (``(B, h, w)``); it supplies
    the LR probe, which stays fixed across the iterations of a layer.
    ``record``, if given, receives ``loc -> (pair indices, source images)``.
    """
    est = state.estimate
    lr = np.asarray(lr_image, dtype=np.float64)
    if lr.ndim == 2:
        lr = lr[None]
    if lr.shape[0] != est.shape[0]:
        raise DimensionError("LR batch and estimate batch differ in size")
    seeds = np.broadcast_to(np.asarray(root_seeds, dtype=np.int64), (est.shape[0],))
    probe_src = None
    z = {}
    for loc in state.locations:
        d = dicts.get(loc)
        if d is None:
            raise ConfigurationError(f"no dictionary for location x={loc.x}, y={loc.y}, layer={loc.layer}")
        if probe_src is None:
            probe_src = d.bank.probe_source(lr)
        n = d.bank.patch_side
        probes = probe_src(loc.x // 2, loc.y // 2)
        idx, lr_d = knn_batch(d, probes, k, backend)
        hr_c = d.hr_rows(idx)
        hr_probe = _patches(est, loc, n) + state.duals[loc]
        diff = hr_c - hr_probe[:, None, :]
        hr_d = np.einsum("bkj,bkj->bk", diff, diff)
        w = normalize_log_weights(log_weights(lr_d, hr_d, params.h, params.rho))
        u = np.array([stream(s, layer, state.iteration, loc.y, loc.x).random() for s in seeds])
        choice = inverse_cdf(w, u)
        rows = np.arange(est.shape[0])
        z[loc] = hr_c[rows, choice]
        if record is not None:
            picked = idx[rows, choice]
            record[loc] = (picked, d.decode(picked)[1])
    return z


def _accumulate(shape, z, duals, locations, n):
    canvas = np.zeros(shape)
    counts = np.zeros(shape[-2:])
    for loc in locations:
        canvas[:, loc.y : loc.y + n, loc.x : loc.x + n] += (z[loc] - duals[loc]).reshape(-1, n, n)
        counts[loc.y : loc.y + n, loc.x : loc.x + n] += 1
    return canvas, counts


def x_step(
    z,
    duals,
    lr_target,
    lam: float,
    rho: float,
    locations,
    previous,
    tol: float = CG_TOL,
    maxiter: int = CG_MAXITER,
    target: float = CG_TARGET,
) -> np.ndarray:
    """Solve ``(lam H^T H + rho sum R^T R) X = lam H^T Y + rho sum R^T (z - u)``.

    Pixels covered by no active patch keep their ``previous`` value and
    enter the system as fixed boundary values. With ``lam == 0`` the
    solution is the exact per-pixel average of ``z - u``.

    CG runs towards a relative residual of ``target``; the result is
    accepted if, after at most ``maxiter`` steps, the residual is below ``tol``.
    """
    prev = np.asarray(previous, dtype=np.float64)
    squeeze = prev.ndim == 2
    if squeeze:
        prev = prev[None]
    if not locations:
        return prev[0].copy() if squeeze else prev.copy()
    n = int(round(np.sqrt(next(iter(z.values())).shape[-1])))
    canvas, counts = _accumulate(prev.shape, z, duals, locations, n)
    covered = counts > 0
    out = prev.copy()
    if lam == 0:
        out[:, covered] = canvas[:, covered] / counts[covered]
        return out[0] if squeeze else out

    y = np.asarray(lr_target, dtype=np.float64)
    if y.ndim == 2:
        y = y[None]
    hgt, wid = prev.shape[-2:]
    H = downsample_matrix(hgt, wid)
    HtH = (H.T @ H).tocsr()
    cov = covered.ravel()
    free = np.flatnonzero(cov)
    fixed = np.flatnonzero(~cov)
    A = (lam * HtH + rho * sp.diags(counts.ravel())).tocsr()
    A_ff = A[free][:, free]
    A_fx = A[free][:, fixed]
    inv_diag = 1.0 / A_ff.diagonal()
    M = LinearOperator(A_ff.shape, matvec=lambda v: inv_diag * v)
    for b in range(prev.shape[0]):
        rhs = lam * (H.T @ y[b].ravel()) + rho * canvas[b].ravel()
        xb = prev[b].ravel().copy()
        rhs_f = rhs[free] - A_fx @ xb[fixed]
        sol, _ = cg(A_ff, rhs_f, x0=xb[free], rtol=min(target, tol), atol=0.0, maxiter=maxiter, M=M)
        bnorm = np.linalg.norm(rhs_f)
        res = np.linalg.norm(A_ff @ sol - rhs_f) / (bnorm if bnorm > 0 else 1.0)
        if not res <= tol:
            raise NumericalError(f"conjugate gradient did not converge (relative residual {res:.3e})", residual=res)
        xb[free] = sol
        out[b] = xb.reshape(hgt, wid)
    return out[0] if squeeze else out


def u_step(duals, z, estimate, locations) -> dict[PatchLocation, np.ndarray]:
    """``u_i <- u_i + R_i X - z_i`` for every active location."""
    est = np.asarray(estimate, dtype=np.float64)
    if est.ndim == 2:
        est = est[None]
    out = {}
    for loc in locations:
        n = int(round(np.sqrt(z[loc].shape[-1])))
        out[loc] = duals[loc] + (_patches(est, loc, n) - z[loc])
    return out


def admm_terms(estimate, lr_target, z, duals, lam: float, rho: float, locations) -> dict:
    """Data-fidelity and coupling terms of the augmented objective, per run."""
    est = np.asarray(estimate, dtype=np.float64)
    if est.ndim == 2:
        est = est[None]
    y = np.asarray(lr_target, dtype=np.float64).reshape(est.shape[0], -1)
    H = downsample_matrix(*est.shape[-2:])
    r = (H @ est.reshape(est.shape[0], -1).T).T - y
    data = 0.5 * lam * np.einsum("bi,bi->b", r, r)
    coupling = np.zeros(est.shape[0])
    for loc in locations:
        n = int(round(np.sqrt(z[loc].shape[-1])))
        d = _patches(est, loc, n) - z[loc] + duals[loc]
        coupling += 0.5 * rho * np.einsum("bi,bi->b", d, d)
    return {"data": data, "coupling": coupling, "objective": data + coupling}
