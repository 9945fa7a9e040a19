import os
from pathlib import Path

import numpy as np
import pytest
from scipy.ndimage import gaussian_filter

MNIST_ENV = "PATCHSYNTH_MNIST"


def mnist_dir() -> Path:
    return Path(os.environ.get(MNIST_ENV, "/root/data/mnist"))


def mnist_files():
    d = mnist_dir()
    names = {
        "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    }
    files = {k: (d / a, d / b) for k, (a, b) in names.items()}
    if not all(p.exists() for pair in files.values() for p in pair):
        return None
    return files


def stroke_images(n, rng, size=32, margin=4):
    """Blurry random pen strokes on a black background, quantised to 8 bits."""
    out = np.zeros((n, size, size))
    yy, xx = np.mgrid[0:size, 0:size]
    for i in range(n):
        img = np.zeros((size, size))
        for _ in range(rng.integers(2, 4)):
            p0 = rng.uniform(margin, size - margin, 2)
            p1 = rng.uniform(margin, size - margin, 2)
            for t in np.linspace(0, 1, 24):
                cy, cx = p0 + t * (p1 - p0)
                img += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / 2.0)
        img = gaussian_filter(img, 0.7)
        out[i] = np.clip(img / img.max(), 0, 1)
    return np.rint(out * 255) / 255


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture(scope="session")
def strokes():
    return stroke_images(40, np.random.default_rng(7))


@pytest.fixture(scope="session")
def mnist_corpus(tmp_path_factory):
    """Ingested MNIST (train + test) in a temporary corpus directory."""
    from patchsynth.corpus import ingest_mnist

    files = mnist_files()
    if files is None:
        pytest.skip(f"MNIST IDX files not found (set ${MNIST_ENV})")
    out = tmp_path_factory.mktemp("mnist")
    for split, (images, labels) in files.items():
        ingest_mnist(images, labels, split, out)
    return out


def cold_schedule(image_size=32, patch=6, context=None):
    """One-layer nearest-neighbour super-resolver: h -> 0, no coupling, no fidelity.

    Two passes, the second shifted so that the last rows and columns are covered.
    """
    from patchsynth.schedule import SCHEMA, SynthesisSchedule

    it = {"lambda": 0.0, "rho": 0.0, "h": 1e-12}
    return SynthesisSchedule.from_dict({
        "schema": SCHEMA,
        "name": "cold",
        "image_size": [image_size, image_size],
        "patch_side": patch,
        "layers": [{
            "overlap": 2,
            "window": 0,
            "context": context or {"kind": "square", "extent": 2, "weight": 0.5},
            "iterations": [dict(it, offset=[0, 0]), dict(it, offset=[2, 2])],
        }],
    })


def psnr(a, b):
    mse = np.mean((np.asarray(a) - np.asarray(b)) ** 2)
    return np.inf if mse == 0 else 10 * np.log10(1.0 / mse)


def self_super_resolution(training, picks, schedule=None):
    """Upscale each picked training image's own coarse level with the cold schedule.

    Returns (psnr per image, fraction of locations reconstructed from the
    image itself or from an indistinguishable pair).
    """
    from patchsynth.synthesis import SynthesisModel, layer_synthesis

    schedule = schedule or cold_schedule(training.shape[-1])
    model = SynthesisModel(schedule, training)
    dicts = model.dicts[0]
    scores, hits, total = [], 0, 0
    for j in picks:
        record = []
        out = layer_synthesis(model.levels[1][j], 0, dicts, schedule, 11, record=record)
        scores.append(psnr(out, training[j]))
        for step in record:
            for loc, (pair, source) in step["choices"].items():
                d = dicts[loc]
                own = d.pair(j)  # window 0: pair index == image index
                got = d.pair(int(pair[0]))
                total += 1
                hits += int(source[0] == j or (np.array_equal(got.lr, own.lr) and np.array_equal(got.hr, own.hr)))
    return np.array(scores), hits / total


def blob_faces(n, rng, size=128):
    """Aligned face-like blobs: an elliptical head with two eyes and a mouth at jittered spots."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    out = np.empty((n, size, size))
    for i in range(n):
        j = rng.normal(0, 0.015, 8)
        head = ((xx - 0.5 - j[0]) / (0.30 + j[1])) ** 2 + ((yy - 0.5 - j[2]) / (0.38 + j[3])) ** 2 < 1
        img = 0.15 + rng.uniform(0.4, 0.7) * head
        for ex in (0.38, 0.62):
            img -= 0.3 * np.exp(-((xx - ex - j[4]) ** 2 + (yy - 0.42 - j[5]) ** 2) / 0.0015)
        img -= 0.25 * np.exp(-((xx - 0.5 - j[6]) ** 2 / 0.008 + (yy - 0.68 - j[7]) ** 2 / 0.0008))
        out[i] = gaussian_filter(np.clip(img, 0, 1), 1.5)
    return np.rint(out * 255) / 255


CRITERIA: list[str] = []


@pytest.fixture
def criterion():
    """Record one acceptance line; the lines are repeated in the terminal summary."""

    def record(name, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} {name}: {detail}"
        CRITERIA.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in CRITERIA:
            terminalreporter.write_line(line)
