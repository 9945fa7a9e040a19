"""Paired low/high resolution patch dictionaries and nearest-neighbour search.

A dictionary for HR location ``i`` at layer ``l`` holds, for every
training image ``j`` and every source location ``i'`` inside the neighbour
window around ``i``, the pair

    (LR patch of V_j^{l+1} at floor(i'/2),  HR patch of V_j^l at i').

Pairs are never copied out of the training stacks up front: a
:class:`PatchDictionary` keeps its source locations and the shared
:class:`LayerBank`, and materialises descriptors on demand. Pair index
``p`` decodes to ``source = p // N`` and ``image = p % N``; the centre
location is always source 0, so a windowed dictionary contains the
window-0 dictionary as its first ``N`` pairs.
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass
from functools import cached_property
from typing import Iterable, NamedTuple, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import BoundsError, ConfigurationError, DimensionError, IngestionError
from .image import PatchLocation, downsample, extract_patch

ARCHIVE_MAGIC = b"PSDICT\x00\x01"
ARCHIVE_VERSION = 1
CONTEXT_KINDS = ("none", "square", "horizontal")
_EPS = np.finfo(np.float64).eps
CACHE_BYTES = 1 << 30  # per layer bank; descriptors beyond this are recomputed


@dataclass(frozen=True)
class ContextSpec:
    """Extra LR pixels appended to the matching descriptor.

    ``square`` adds a band of ``extent`` pixels around the LR patch.
    ``horizontal`` adds the same square band plus the horizontally mirrored
    block (same rows, opposite image half, flipped left-right), widened by
    ``extent`` columns on each side. Context values are multiplied by
    ``weight`` before being appended.
    """

    kind: str = "none"
    extent: int = 0
    weight: float = 0.5

    def __post_init__(self):
        if self.kind not in CONTEXT_KINDS:
            raise ConfigurationError(f"unknown context kind {self.kind!r}")
        if self.extent < 0 or self.weight < 0:
            raise ConfigurationError("context extent and weight must be non-negative")
        if self.kind == "none" and self.extent != 0:
            object.__setattr__(self, "extent", 0)

    @classmethod
    def from_dict(cls, d) -> "ContextSpec":
        if d is None:
            return cls()
        return cls(kind=d.get("kind", "none"), extent=int(d.get("extent", 0)), weight=float(d.get("weight", 0.5)))

    def to_dict(self) -> dict:
        return asdict(self)


class PatchPair(NamedTuple):
    lr: np.ndarray
    hr: np.ndarray
    source_image: int
    source_loc: PatchLocation


def _pad(stack: np.ndarray, e: int) -> np.ndarray:
    if e == 0:
        return stack
    return np.pad(stack, [(0, 0)] * (stack.ndim - 2) + [(e, e), (e, e)], mode="edge")


def descriptor_length(side: int, context: ContextSpec) -> int:
    e = context.extent
    d = (side + 2 * e) ** 2
    if context.kind == "horizontal":
        d += side * (side + 2 * e)
    return d


class DescriptorSource:
    """Computes LR matching descriptors from an image or a stack of images.

    The stack is edge-padded once so that context bands falling outside the
    image replicate the border pixels.
    """

    def __init__(self, lr, side: int, context: ContextSpec):
        self.lr = np.asarray(lr, dtype=np.float64)
        self.single = self.lr.ndim == 2
        if self.single:
            self.lr = self.lr[None]
        self.side = side
        self.context = context
        self.padded = _pad(self.lr, context.extent)
        s, e = side, context.extent
        ring = np.ones((s + 2 * e, s + 2 * e), dtype=bool)
        ring[e : e + s, e : e + s] = False
        self._ring = ring.ravel()

    @property
    def width(self) -> int:
        return self.lr.shape[-1]

    def __call__(self, x: int, y: int) -> np.ndarray:
        s, e, ctx = self.side, self.context.extent, self.context
        h, w = self.lr.shape[-2:]
        if x < 0 or y < 0 or x + s > w or y + s > h:
            raise BoundsError(f"LR patch at (x={x}, y={y}) exceeds {h}x{w} image")
        n = self.lr.shape[0]
        core = self.lr[:, y : y + s, x : x + s].reshape(n, -1)
        parts = [core]
        if ctx.kind != "none" and e > 0:
            window = self.padded[:, y : y + s + 2 * e, x : x + s + 2 * e].reshape(n, -1)
            parts.append(ctx.weight * window[:, self._ring])
        if ctx.kind == "horizontal":
            xm = w - x - s  # mirrored block start in unpadded coordinates
            band = self.padded[:, y + e : y + e + s, xm : xm + s + 2 * e][:, :, ::-1]
            parts.append(ctx.weight * band.reshape(n, -1))
        out = np.concatenate(parts, axis=1) if len(parts) > 1 else core.copy()
        return out[0] if self.single else out


class LayerBank:
    """Training data for one layer: HR level ``l`` and LR level ``l+1`` stacks."""

    def __init__(
        self, hr_stack, lr_stack, layer: int, patch_side: int, context: ContextSpec, cache_bytes: int = CACHE_BYTES
    ):
        hr = np.asarray(hr_stack, dtype=np.float64)
        lr = np.asarray(lr_stack, dtype=np.float64)
        if hr.ndim != 3 or lr.ndim != 3 or hr.shape[0] != lr.shape[0]:
            raise DimensionError(f"incompatible training stacks {hr.shape} and {lr.shape}")
        if hr.shape[0] == 0:
            raise ConfigurationError("empty training set")
        if hr.shape[1] != 2 * lr.shape[1] or hr.shape[2] != 2 * lr.shape[2]:
            raise DimensionError(f"LR stack {lr.shape} is not half of HR stack {hr.shape}")
        if patch_side % 2:
            raise ConfigurationError(f"patch side must be even, got {patch_side}")
        self.hr = hr
        self.lr = lr
        self.layer = layer
        self.patch_side = patch_side
        self.context = context
        self.descriptors = DescriptorSource(lr, patch_side // 2, context)
        self._cache: OrderedDict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = OrderedDict()
        self._cache_bytes = cache_bytes
        self._cached = 0

    @classmethod
    def from_pyramids(cls, pyramids, layer: int, patch_side: int, context: ContextSpec) -> "LayerBank":
        """``pyramids`` is either a list of per-image level lists or a list of level stacks."""
        levels = stack_levels(pyramids)
        if layer + 1 >= len(levels):
            raise ConfigurationError(f"pyramids have {len(levels) - 1} levels, layer {layer} needs {layer + 1}")
        return cls(levels[layer], levels[layer + 1], layer, patch_side, context)

    @property
    def n_images(self) -> int:
        return self.hr.shape[0]

    @property
    def hr_shape(self) -> tuple[int, int]:
        return self.hr.shape[1], self.hr.shape[2]

    def lr_descriptors(self, x: int, y: int) -> np.ndarray:
        return self.cached_descriptors(x, y)[0]

    def cached_descriptors(self, x: int, y: int) -> tuple[np.ndarray, np.ndarray]:
        """Descriptors at LR location ``(x, y)`` and their squared norms.

        Recently used locations are kept up to ``cache_bytes``; the arrays
        are shared and must be treated as read-only.
        """
        key = (int(x), int(y))
        hit = self._cache.get(key)
        if hit is not None:
            self._cache.move_to_end(key)
            return hit
        d = np.ascontiguousarray(self.descriptors(*key))
        d.flags.writeable = False
        nrm = np.einsum("ij,ij->i", d, d)
        nrm.flags.writeable = False
        hit = self._cache[key] = (d, nrm)
        self._cached += d.nbytes + nrm.nbytes
        while self._cached > self._cache_bytes and len(self._cache) > 1:
            _, (od, on) = self._cache.popitem(last=False)
            self._cached -= od.nbytes + on.nbytes
        return hit

    def hr_patches(self, x: int, y: int) -> np.ndarray:
        n = self.patch_side
        return self.hr[:, y : y + n, x : x + n].reshape(self.n_images, -1)

    def probe_source(self, lr_image) -> DescriptorSource:
        """Descriptor extractor for query images (same context rules as the bank)."""
        return DescriptorSource(lr_image, self.patch_side // 2, self.context)


def stack_levels(pyramids) -> list[np.ndarray]:
    """Turn a list of per-image pyramids into one ``(N, H, W)`` stack per level."""
    pyramids = list(pyramids)
    if not pyramids:
        raise ConfigurationError("empty training set")
    first = pyramids[0]
    if isinstance(first, np.ndarray) and first.ndim == 3:
        return [np.asarray(p, dtype=np.float64) for p in pyramids]
    depth = len(first)
    for p in pyramids:
        if len(p) != depth:
            raise DimensionError("training pyramids have different depths")
    try:
        return [np.stack([np.asarray(p[l], dtype=np.float64) for p in pyramids]) for l in range(depth)]
    except ValueError as exc:
        raise DimensionError(f"training pyramids do not share dimensions: {exc}") from None


class PatchDictionary:
    """Example pairs for one HR location. See the module docstring for layout."""

    def __init__(self, bank: LayerBank, location: PatchLocation, sources: Sequence[tuple[int, int]]):
        if not sources:
            raise ConfigurationError(f"no source locations for {location}")
        self.bank = bank
        self.location = location
        self.sources = tuple((int(x), int(y)) for x, y in sources)

    def __len__(self) -> int:
        return len(self.sources) * self.bank.n_images

    @property
    def layer(self) -> int:
        return self.bank.layer

    def decode(self, index):
        """Pair index -> (source location index, training image index)."""
        index = np.asarray(index)
        return index // self.bank.n_images, index % self.bank.n_images

    def pair(self, index: int) -> PatchPair:
        if not 0 <= index < len(self):
            raise IndexError(f"pair index {index} out of range for {len(self)} pairs")
        s, j = (int(v) for v in self.decode(index))
        x, y = self.sources[s]
        n = self.bank.patch_side
        lr = self.bank.lr_descriptors(x // 2, y // 2)[j]
        hr = self.bank.hr[j, y : y + n, x : x + n].ravel().copy()
        return PatchPair(lr, hr, j, PatchLocation(x, y, self.layer))

    def lr_blocks(self) -> tuple[list[np.ndarray], list[np.ndarray]]:
        """Per-source descriptor blocks and norms (pair-index order, not copied)."""
        hits = [self.bank.cached_descriptors(x // 2, y // 2) for x, y in self.sources]
        return [h[0] for h in hits], [h[1] for h in hits]

    def lr_matrix(self) -> np.ndarray:
        """All LR descriptors, ``(len(self), D)``, in pair-index order."""
        blocks = [self.bank.lr_descriptors(x // 2, y // 2) for x, y in self.sources]
        return np.concatenate(blocks) if len(blocks) > 1 else blocks[0]

    def hr_matrix(self) -> np.ndarray:
        blocks = [self.bank.hr_patches(x, y) for x, y in self.sources]
        return np.concatenate(blocks) if len(blocks) > 1 else blocks[0]

    def hr_rows(self, indices) -> np.ndarray:
        """HR patches for an arbitrary array of pair indices (shape ``indices.shape + (n*n,)``)."""
        indices = np.asarray(indices)
        s, j = self.decode(indices)
        src = np.asarray(self.sources)
        xs, ys = src[s, 0], src[s, 1]
        n = self.bank.patch_side
        r = np.arange(n)
        rows = (ys[..., None] + r)[..., :, None]
        cols = (xs[..., None] + r)[..., None, :]
        patches = self.bank.hr[j[..., None, None], rows, cols]
        return patches.reshape(indices.shape + (n * n,))

    def lr_rows(self, indices) -> np.ndarray:
        indices = np.asarray(indices)
        s, j = self.decode(indices.ravel())
        out = np.empty((indices.size, descriptor_length(self.bank.patch_side // 2, self.bank.context)))
        for si in np.unique(s):
            x, y = self.sources[si]
            mask = s == si
            out[mask] = self.bank.lr_descriptors(x // 2, y // 2)[j[mask]]
        return out.reshape(indices.shape + (out.shape[-1],))

    @cached_property
    def kdtree(self) -> cKDTree:
        return cKDTree(self.lr_matrix())

    def descriptor_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.lr_matrix()).tobytes())
        h.update(np.ascontiguousarray(self.hr_matrix()).tobytes())
        return h.hexdigest()


def window_sources(location: PatchLocation, hr_shape, patch_side: int, window: int) -> list[tuple[int, int]]:
    """Source locations within +/- ``window`` pixels, centre first, then row-major."""
    h, w = hr_shape
    x, y = location.x, location.y
    if x < 0 or y < 0 or x + patch_side > w or y + patch_side > h:
        raise BoundsError(f"dictionary location {tuple(location)} is outside the {h}x{w} layer")
    out = [(x, y)]
    for dy in range(-window, window + 1):
        for dx in range(-window, window + 1):
            if dx == 0 and dy == 0:
                continue
            xx, yy = x + dx, y + dy
            if 0 <= xx <= w - patch_side and 0 <= yy <= h - patch_side:
                out.append((xx, yy))
    return out


def build_dictionaries(
    training_pyramids,
    layer: int,
    locations: Iterable,
    patch_side: int,
    window: int = 0,
    context: ContextSpec | None = None,
) -> dict[PatchLocation, PatchDictionary]:
    """Dictionaries for every requested HR location at ``layer``.

    ``training_pyramids`` may be a list of per-image pyramids, a list of
    level stacks, or an already constructed :class:`LayerBank`.
    """
    if window < 0:
        raise ConfigurationError("neighbour window must be non-negative")
    context = context or ContextSpec()
    if isinstance(training_pyramids, LayerBank):
        bank = training_pyramids
    else:
        bank = LayerBank.from_pyramids(training_pyramids, layer, patch_side, context)
    out = {}
    for loc in locations:
        loc = PatchLocation(int(loc[0]), int(loc[1]), layer)
        if loc not in out:
            out[loc] = PatchDictionary(bank, loc, window_sources(loc, bank.hr_shape, patch_side, window))
    return out


def check_pairing(dictionary: PatchDictionary, indices) -> bool:
    """Recompute LR halves from the HR source images via :func:`downsample`."""
    bank = dictionary.bank
    half = bank.patch_side // 2
    for p in indices:
        pair = dictionary.pair(int(p))
        coarse = downsample(bank.hr[pair.source_image])
        src = bank.probe_source(coarse)
        expect = src(pair.source_loc.x // 2, pair.source_loc.y // 2)
        core = extract_patch(coarse, (pair.source_loc.x // 2, pair.source_loc.y // 2), half)
        if not (np.array_equal(expect, pair.lr) and np.array_equal(core, pair.lr[: half * half])):
            return False
    return True


# -- nearest-neighbour queries ----------------------------------------------------


def exact_sqdist(probe: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances by explicit differencing (the reference path)."""
    d = rows - probe
    return np.einsum("ij,ij->i", d, d)


def _select(indices: np.ndarray, dists: np.ndarray, k: int):
    order = np.lexsort((indices, dists))[:k]
    return indices[order], dists[order]


def _as_blocks(rows) -> list[np.ndarray]:
    if isinstance(rows, np.ndarray):
        return [np.asarray(rows, dtype=np.float64)]
    return [np.asarray(r, dtype=np.float64) for r in rows]


def nearest_rows(probes, rows, k: int, row_norms=None) -> tuple[np.ndarray, np.ndarray]:
    """Exact ``k`` nearest rows for every probe, screened with BLAS.

    ``rows`` is a matrix or a sequence of matrices treated as one stacked
    matrix (so callers need not concatenate cached blocks). Candidates are
    ranked by ``|a|^2 - 2 q.a`` and kept if within twice the rounding-error
    bound of the k-th score, so no true neighbour is dropped; survivors are
    re-ranked by :func:`exact_sqdist`. Ties go to the lower row index.
    """
    probes = np.atleast_2d(np.asarray(probes, dtype=np.float64))
    blocks = _as_blocks(rows)
    if row_norms is None:
        norms = [np.einsum("ij,ij->i", blk, blk) for blk in blocks]
    else:
        norms = [np.asarray(row_norms)] if isinstance(row_norms, np.ndarray) else list(row_norms)
    sizes = [blk.shape[0] for blk in blocks]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total = int(offsets[-1])
    dim = blocks[0].shape[1]
    kk = min(k, total)
    m = probes.shape[0]
    out_i = np.empty((m, kk), dtype=np.int64)
    out_d = np.empty((m, kk))
    amax = max(float(np.sqrt(nb.max())) if nb.size else 0.0 for nb in norms)
    gamma = 8.0 * (dim + 2) * _EPS
    chunk = max(1, min(m, 2**24 // max(1, total)))
    for start in range(0, m, chunk):
        q = probes[start : start + chunk]
        qn = np.einsum("ij,ij->i", q, q)
        score = np.empty((q.shape[0], total))
        for blk, nb, o in zip(blocks, norms, offsets):
            view = score[:, o : o + blk.shape[0]]
            np.matmul(q, blk.T, out=view)
            view *= -2.0
            view += nb
        kth = np.partition(score, kk - 1, axis=1)[:, kk - 1]
        slack = 2.0 * gamma * (np.sqrt(qn) + amax) ** 2
        for r in range(q.shape[0]):
            cand = np.flatnonzero(score[r] <= kth[r] + slack[r])
            which = np.searchsorted(offsets, cand, side="right") - 1
            cand_rows = np.empty((cand.size, dim))
            for bi in np.unique(which):
                sel = which == bi
                cand_rows[sel] = blocks[bi][cand[sel] - offsets[bi]]
            d = exact_sqdist(q[r], cand_rows)
            out_i[start + r], out_d[start + r] = _select(cand, d, kk)
    return out_i, out_d


def knn_batch(
    dictionary: PatchDictionary,
    probes,
    k: int,
    backend: str = "scan",
    lr: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Exact k nearest pairs for each probe row.

    Returns ``(indices, sqdists)`` each of shape ``(M, min(k, len))``, sorted
    by ascending distance with ties broken by ascending pair index. Reported
    distances always come from :func:`exact_sqdist`.

    ``scan`` screens candidates with the BLAS expansion
    ``|q|^2 + |a|^2 - 2 q.a`` and a rounding-error bound, then re-ranks the
    survivors exactly. ``kdtree`` uses a cached :class:`scipy.spatial.cKDTree`.
    ``lr`` may pass a precomputed descriptor matrix to avoid rebuilding it.
    """
    if k < 1:
        raise ConfigurationError("k must be at least 1")
    probes = np.atleast_2d(np.asarray(probes, dtype=np.float64))
    width = descriptor_length(dictionary.bank.patch_side // 2, dictionary.bank.context) if lr is None else lr.shape[1]
    if probes.shape[1] != width:
        raise ConfigurationError(f"probe has dimension {probes.shape[1]}, index expects {width}")
    if backend == "scan":
        if lr is not None:
            return nearest_rows(probes, lr, k)
        blocks, norms = dictionary.lr_blocks()
        return nearest_rows(probes, blocks, k, row_norms=norms)
    a = dictionary.lr_matrix() if lr is None else lr
    kk = min(k, a.shape[0])
    m = probes.shape[0]
    out_i = np.empty((m, kk), dtype=np.int64)
    out_d = np.empty((m, kk))
    if backend == "kdtree":
        tree = dictionary.kdtree if lr is None else cKDTree(a)
        for r in range(m):
            dd, _ = tree.query(probes[r], k=kk)
            radius = float(np.atleast_1d(dd)[-1])
            cand = np.asarray(tree.query_ball_point(probes[r], radius * (1 + 1e-9) + 1e-12), dtype=np.int64)
            d = exact_sqdist(probes[r], a[cand])
            out_i[r], out_d[r] = _select(cand, d, kk)
    else:
        raise ConfigurationError(f"unknown kNN backend {backend!r}")
    return out_i, out_d


def knn_query(dictionary: PatchDictionary, probe, k: int, backend: str = "scan") -> list[tuple[int, float]]:
    """Single-probe form of :func:`knn_batch` returning ``(pair index, sqdist)`` tuples."""
    probe = np.asarray(probe, dtype=np.float64)
    if probe.ndim != 1:
        raise ConfigurationError("knn_query takes a single descriptor vector")
    idx, d = knn_batch(dictionary, probe[None], k, backend)
    return [(int(i), float(v)) for i, v in zip(idx[0], d[0])]


# -- persistence ------------------------------------------------------------------


def config_hash(params: dict) -> str:
    return hashlib.sha256(json.dumps(params, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def _write_block(f, data: bytes) -> None:
    f.write(struct.pack("<Q", len(data)))
    f.write(data)


def _read_block(buf: bytes, pos: int) -> tuple[bytes, int]:
    if pos + 8 > len(buf):
        raise IngestionError("truncated dictionary archive", offset=pos)
    (n,) = struct.unpack_from("<Q", buf, pos)
    pos += 8
    if pos + n > len(buf):
        raise IngestionError(f"dictionary archive block needs {n} bytes, {len(buf) - pos} left", offset=pos)
    return buf[pos : pos + n], pos + n


def save_archive(path, base_images, depth: int, dictionaries: dict[PatchLocation, PatchDictionary], params: dict) -> str:
    """Write one (class, layer) archive plus a ``.json`` sidecar; returns the config hash.

    The archive stores the level-0 training stack (as bytes when every value
    is an exact multiple of 1/255, else float64) and one length-prefixed
    record per location listing its source locations. Pyramids are rebuilt
    deterministically on load.
    """
    base = np.asarray(base_images, dtype=np.float64)
    q = np.rint(base * 255.0)
    exact8 = bool(np.all(q / 255.0 == base)) and q.min() >= 0 and q.max() <= 255
    locs = sorted(dictionaries, key=lambda l: (l.y, l.x))
    first = dictionaries[locs[0]]
    header = {
        "version": ARCHIVE_VERSION,
        "layer": first.layer,
        "depth": depth,
        "patch_side": first.bank.patch_side,
        "context": first.bank.context.to_dict(),
        "n_images": int(base.shape[0]),
        "shape": list(base.shape[1:]),
        "dtype": "u8" if exact8 else "f8",
        "n_locations": len(locs),
        "params": params,
    }
    chash = config_hash(header)
    buf = io.BytesIO()
    buf.write(ARCHIVE_MAGIC)
    buf.write(struct.pack("<I", ARCHIVE_VERSION))
    buf.write(bytes.fromhex(chash))
    _write_block(buf, json.dumps(header, sort_keys=True).encode())
    payload = q.astype(np.uint8) if exact8 else base
    _write_block(buf, np.ascontiguousarray(payload).tobytes())
    for loc in locs:
        d = dictionaries[loc]
        rec = struct.pack("<iiI", loc.x, loc.y, len(d.sources)) + np.asarray(d.sources, dtype="<i4").tobytes()
        _write_block(buf, rec)
    with open(path, "wb") as f:
        f.write(buf.getvalue())
    sidecar = dict(header, config_hash=chash, archive=str(path).rsplit("/", 1)[-1])
    with open(str(path) + ".json", "w") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)
        f.write("\n")
    return chash


def load_archive(path):
    """Inverse of :func:`save_archive`. Returns ``(dictionaries, header, config_hash)``."""
    from .image import build_pyramid

    buf = open(path, "rb").read()
    if buf[:8] != ARCHIVE_MAGIC:
        raise IngestionError(f"{path}: not a dictionary archive", offset=0)
    (version,) = struct.unpack_from("<I", buf, 8)
    if version != ARCHIVE_VERSION:
        raise IngestionError(f"{path}: unsupported archive version {version}", offset=8)
    chash = buf[12:44].hex()
    raw, pos = _read_block(buf, 44)
    header = json.loads(raw)
    if config_hash(header) != chash:
        raise IngestionError(f"{path}: config hash does not match header", offset=12)
    data, pos = _read_block(buf, pos)
    shape = (header["n_images"], *header["shape"])
    if header["dtype"] == "u8":
        base = np.frombuffer(data, np.uint8).reshape(shape).astype(np.float64) / 255.0
    else:
        base = np.frombuffer(data, np.float64).reshape(shape).copy()
    levels = build_pyramid(base, header["depth"])
    layer = header["layer"]
    bank = LayerBank(levels[layer], levels[layer + 1], layer, header["patch_side"], ContextSpec.from_dict(header["context"]))
    out = {}
    for _ in range(header["n_locations"]):
        rec, pos = _read_block(buf, pos)
        x, y, ns = struct.unpack_from("<iiI", rec, 0)
        sources = np.frombuffer(rec, "<i4", 2 * ns, 12).reshape(ns, 2)
        loc = PatchLocation(x, y, layer)
        out[loc] = PatchDictionary(bank, loc, [tuple(s) for s in sources.tolist()])
    return out, header, chash
