"""End-to-end acceptance checks on MNIST plus a synthetic face corpus.

Each test records one PASS/FAIL line (see the terminal summary). The MNIST
checks skip when the IDX files are missing. Generated digits, scores and
distances are computed once per class and shared between criteria.
"""
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from patchsynth.assess import (
    DEFAULT_SIGMA,
    ParzenModel,
    RankConfig,
    SpreadConfig,
    ll_sweep,
    log_likelihoods,
    originality_batch,
    spread,
)
from patchsynth.cli import run_seed
from patchsynth.corpus import load_corpus
from patchsynth.schedule import load_schedule
from patchsynth.synthesis import SynthesisModel, make_seed

from conftest import blob_faces, self_super_resolution

pytestmark = pytest.mark.acceptance

PER_CLASS = 100
ROOT_SEED = 2024
TESTS = Path(__file__).parent


class DigitScores:
    """Per-class test and generated scores, filled on first use."""

    def __init__(self, corpus):
        self.corpus = corpus
        self.schedule = load_schedule("mnist-digit")
        self._cache = {}

    def __getitem__(self, label):
        if label not in self._cache:
            self._cache[label] = self._score(label)
        return self._cache[label]

    def _score(self, label):
        train, _, _ = load_corpus(self.corpus, "train", label)
        test = load_corpus(self.corpus, "test", label)[0][:PER_CLASS]
        seeds = np.stack([make_seed(t, self.schedule.image_size, self.schedule.seed_size) for t in test])
        roots = [run_seed(ROOT_SEED, i, 0) for i in range(len(test))]
        generated, _ = SynthesisModel(self.schedule, train).synthesize_batch(seeds, roots)
        generated = np.clip(generated, 0, 1)  # what a written PGM holds
        model = ParzenModel(train)
        return {
            "test_ll": log_likelihoods(test, model),
            "gen_ll": log_likelihoods(generated, model),
            "test_orig": originality_batch(test, train).ratio,
            "gen_orig": originality_batch(generated, train).ratio,
            "spread": spread(train[:PER_CLASS], test, SpreadConfig(perplexity=30)).aggregate,
        }

    def all(self, key):
        return np.concatenate([np.atleast_1d(self[c][key]) for c in range(10)])


@pytest.fixture(scope="module")
def digits(mnist_corpus):
    return DigitScores(mnist_corpus)


def test_test_image_log_likelihood(digits, criterion):
    ll = digits.all("test_ll")
    mean = float(ll.mean())
    ok = criterion("C1 test-image LL", abs(mean + 82.52) <= 3.0 and ll.size == 10 * PER_CLASS,
                   f"mean LL {mean:.2f} over {ll.size} images (target -82.52 +/- 3.0)")
    assert ok


def test_generated_digits_beat_test_digits(digits, criterion):
    gen, test = digits.all("gen_ll").mean(), digits.all("test_ll").mean()
    per_class = ", ".join(f"{c}:{digits[c]['gen_ll'].mean() - digits[c]['test_ll'].mean():+.1f}" for c in range(10))
    ok = criterion("C2 generated-vs-test LL", gen - test >= 5.0,
                   f"generated {gen:.2f} vs test {test:.2f}, margin {gen - test:+.2f} (need >= 5); per class {per_class}")
    assert ok


def test_originality_bands(digits, criterion):
    gen, test = digits.all("gen_orig"), digits.all("test_orig")
    low = float(np.mean(gen < 0.5))
    ok = (0.85 <= gen.mean() <= 1.20) and (0.95 <= test.mean() <= 1.25) and low <= 0.05
    criterion("C3 originality", ok,
              f"generated {gen.mean():.3f} in [0.85, 1.20], test {test.mean():.3f} in [0.95, 1.25], "
              f"generated below 0.5: {low:.1%} (<= 5%)")
    assert ok


def test_spread(digits, mnist_corpus, criterion):
    values = np.array([digits[c]["spread"] for c in range(10)])
    train = load_corpus(mnist_corpus, "train", 0)[0][:PER_CLASS]
    dup = spread(train, train.copy(), SpreadConfig(perplexity=30)).aggregate
    ok = 0.6 <= values.mean() <= 1.3 and dup <= 1e-9
    criterion("C4 spread", ok, f"test-vs-train {values.mean():.3f} in [0.6, 1.3] "
              f"(per class {np.round(values, 3).tolist()}), duplicate set {dup:.1e} (<= 1e-9)")
    assert ok


def test_rank_aware_identity(mnist_corpus, criterion):
    train, _, _ = load_corpus(mnist_corpus, "train", 5)
    test = load_corpus(mnist_corpus, "test", 5)[0][:50]
    model = ParzenModel(train)
    plain = log_likelihoods(test, model)
    eps = [0.01, 0.1, 1.0]
    table = ll_sweep(test, model, [DEFAULT_SIGMA], eps, RankConfig())
    gap = np.abs(table.per_image[0] - plain[None]).max(axis=1)
    ok = bool(np.all(gap <= 1e-9))
    criterion("C5 rank-aware identity", ok,
              "max |rank-aware - plain| per epsilon " + ", ".join(f"{e}: {g:.1e}" for e, g in zip(eps, gap)) + " (<= 1e-9)")
    assert ok


PROPERTY_TESTS = [
    "test_sampler.py::test_softmax_is_shift_invariant",
    "test_sampler.py::test_sample_frequencies_follow_the_posterior",
    "test_epll.py::test_cg_matches_dense_solve",
    "test_epll.py::test_zero_lambda_is_the_patch_average",
    "test_epll.py::test_digit_grid_has_49_locations",
    "test_synthesis.py::test_same_seed_and_root_reproduce_bits",
    "test_synthesis.py::test_batch_composition_does_not_change_a_run",
    "test_dictionary.py::test_scan_and_kdtree_agree_on_top10",
]


def test_property_suites(mnist_corpus, criterion):
    start = time.perf_counter()
    res = subprocess.run(
        [sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", *(str(TESTS / t) for t in PROPERTY_TESTS)],
        cwd=TESTS, capture_output=True, text=True,
    )
    train, _, _ = load_corpus(mnist_corpus, "train", 3)
    scores, consistency = self_super_resolution(train[:200], range(10))
    elapsed = time.perf_counter() - start
    ok = res.returncode == 0 and scores.min() >= 30.0 and elapsed < 300
    summary = res.stdout.strip().splitlines()[-1] if res.stdout.strip() else res.stderr.strip()[-200:]
    criterion("C6 property suites", ok,
              f"{summary}; MNIST self-SR min PSNR {scores.min():.1f} dB (>= 30), "
              f"own-pair consistency {consistency:.3f}; {elapsed:.0f} s (< 300)")
    assert ok


def test_face_pipeline(criterion):
    schedule = load_schedule("aligned-face")
    faces = blob_faces(4500, np.random.default_rng(17))
    model = SynthesisModel(schedule, faces)
    seeds = np.stack([make_seed(f, seed_size=schedule.seed_size) for f in faces[:3]])
    out, layers = model.synthesize_batch(seeds, [run_seed(ROOT_SEED, i, 0) for i in range(3)])
    out = np.clip(out, 0, 1)
    ll = log_likelihoods(out, ParzenModel(faces))
    orig = originality_batch(out, faces, schedule.originality_mask).ratio
    spr = spread(faces[3:6], out, SpreadConfig(perplexity=2), schedule.originality_mask).aggregate
    shapes = [l.shape[-2:] for l in layers]
    ok = bool(np.all(np.isfinite(ll)) and np.all(np.isfinite(orig)) and np.isfinite(spr)) and shapes == schedule.layer_sizes
    criterion("C7 face pipeline", ok,
              f"3 runs on 4500 synthetic faces: LL {np.round(ll, 1).tolist()}, originality "
              f"{np.round(orig, 3).tolist()}, spread {spr:.3f} (finite)")
    assert ok
