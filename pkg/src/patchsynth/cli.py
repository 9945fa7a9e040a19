"""``patchsynth`` command line: ingest, build, synth, assess, sweep.

Errors are reported as one JSON object on stderr with a non-zero exit code.
"""
from __future__ import annotations

import argparse
import json
import re
import secrets
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .assess import (
    DEFAULT_SIGMA,
    LlConfig,
    ParzenModel,
    RankConfig,
    SpreadConfig,
    export_distances,
    ll_sweep,
    originality_batch,
    score_images,
    validate_shortlist,
)
from .corpus import cache_dir, ingest_mnist, load_corpus
from .dictionary import load_archive, save_archive
from .errors import ConfigurationError, IngestionError, NumericalError, PatchSynthError
from .formats import read_pgm, write_pgm
from .sampler import stream
from .schedule import load_schedule
from .synthesis import RunRecord, SynthesisModel, gaussian_seeds, make_seed, synthesize_batch

EXIT_CODES = {ConfigurationError: 2, IngestionError: 3, NumericalError: 4}


# -- argument helpers --------------------------------------------------------------


def parse_index_spec(spec: str) -> tuple[str, list[int]]:
    """``test:0..9`` / ``train:3,5,8`` / ``test:4`` -> (split, indices)."""
    m = re.fullmatch(r"(train|test):(.+)", spec.strip())
    if not m:
        raise ConfigurationError(f"bad image selection {spec!r}; expected e.g. test:0..9")
    out = []
    for part in m.group(2).split(","):
        r = re.fullmatch(r"(\d+)\.\.(\d+)", part)
        if r:
            a, b = int(r.group(1)), int(r.group(2))
            if b < a:
                raise ConfigurationError(f"empty range {part!r}")
            out.extend(range(a, b + 1))
        elif part.isdigit():
            out.append(int(part))
        else:
            raise ConfigurationError(f"bad index {part!r} in {spec!r}")
    return m.group(1), out


def parse_floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigurationError(f"expected comma-separated numbers, got {text!r}") from None


def _corpus_dir(args) -> Path:
    return Path(args.corpus) if args.corpus else cache_dir() / "mnist"


def _schedule(args):
    """Preset, optionally merged with a config file; a file alone stands on its own."""
    overrides = json.loads(args.override) if args.override else None
    preset = args.preset if (args.preset_given or not args.config) else None
    return load_schedule(preset, args.config, overrides)


def _select(images, indices, split, label):
    bad = [i for i in indices if not 0 <= i < len(images)]
    if bad:
        raise ConfigurationError(f"{split} class {label} has {len(images)} images; index {bad[0]} is out of range")
    return images[indices]


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- ingest ------------------------------------------------------------------------


def cmd_ingest(args) -> int:
    manifest = ingest_mnist(args.images, args.labels, args.split, _corpus_dir(args))
    print(json.dumps({"split": manifest.split, "count": manifest.count, "checksum": manifest.checksum}))
    return 0


# -- build -------------------------------------------------------------------------


def archive_name(label: int, layer: int) -> str:
    return f"class-{label}_layer-{layer}.psd"


def cmd_build(args) -> int:
    schedule = _schedule(args)
    train, _, manifest = load_corpus(_corpus_dir(args), "train", args.label)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = SynthesisModel(schedule, train, manifest.checksum)
    hashes = {}
    for layer in range(schedule.depth):
        params = {
            "class": args.label,
            "schedule_hash": schedule.hash(),
            "corpus_checksum": manifest.checksum,
            "window": schedule.layers[layer].window,
        }
        hashes[layer] = save_archive(out / archive_name(args.label, layer), train, schedule.depth, model.dicts[layer], params)
    _write_json(out / f"class-{args.label}_schedule.json", schedule.to_dict())
    print(json.dumps({"class": args.label, "archives": {str(k): v for k, v in hashes.items()}}))
    return 0


def _load_dicts(dict_dir, label, schedule, checksum, force):
    dicts = []
    for layer in range(schedule.depth):
        d, header, _ = load_archive(Path(dict_dir) / archive_name(label, layer))
        p = header.get("params", {})
        if not force and (p.get("schedule_hash") != schedule.hash() or p.get("corpus_checksum") != checksum):
            raise ConfigurationError(
                f"archive for class {label} layer {layer} was built with a different schedule or corpus (use --force)"
            )
        dicts.append(d)
    return dicts


# -- synth -------------------------------------------------------------------------


def run_seed(root_seed: int, seed_index: int, run: int) -> int:
    """Root seed of one run, derived from the command's root seed."""
    return int(stream(root_seed, 0x5EED, seed_index, run).integers(0, 2**63 - 1))


def _synth_chunk(payload):
    schedule, train, checksum, dict_dir, label, force, seeds, roots = payload
    if dict_dir:
        dicts = _load_dicts(dict_dir, label, schedule, checksum, force)
    else:
        dicts = SynthesisModel(schedule, train, checksum).dicts
    return synthesize_batch(seeds, schedule, dicts, roots)


def cmd_synth(args) -> int:
    schedule = _schedule(args)
    corpus = _corpus_dir(args)
    train, _, manifest = load_corpus(corpus, "train", args.label)
    root = args.root_seed if args.root_seed is not None else secrets.randbits(63)
    g = re.fullmatch(r"gaussian:(\d+)", args.seeds.strip())
    if g:
        # seeds sampled from a Gaussian fitted to the class's training seeds
        split, indices = "gaussian", list(range(int(g.group(1))))
        fitted = np.stack([make_seed(t, schedule.image_size, schedule.seed_size) for t in train])
        seed_images = gaussian_seeds(fitted, len(indices), stream(root, 0x6A55))
    else:
        split, indices = parse_index_spec(args.seeds)
        source, _, _ = load_corpus(corpus, split, args.label) if split == "test" else (train, None, None)
        seed_images = [make_seed(img, schedule.image_size, schedule.seed_size)
                       for img in _select(source, indices, split, args.label)]
    jobs = []  # (seed_id, seed image, run root seed, directory)
    for si, seed in zip(indices, seed_images):
        for r in range(args.runs_per_seed):
            sid = f"{split}-{si}"
            jobs.append((sid, seed, run_seed(root, si, r), Path(args.out) / f"class-{args.label}" / f"{sid}_run-{r}"))
    if not jobs:
        raise ConfigurationError("nothing to synthesize")
    seeds = np.stack([j[1] for j in jobs])
    roots = np.array([j[2] for j in jobs], dtype=np.int64)
    t0 = time.perf_counter()

    debug_cb = None
    if args.debug:
        for j in jobs:
            (j[3] / "debug").mkdir(parents=True, exist_ok=True)

        def debug_cb(layer, k, est, info):
            for b, j in enumerate(jobs):
                write_pgm(j[3] / "debug" / f"layer-{layer}_iter-{k}.pgm", np.clip(est[b], 0, 1))
                row = {key: (v[b] if isinstance(v, list) and key in ("data", "coupling", "objective") else v)
                       for key, v in info.items()}
                with open(j[3] / "debug" / "iterations.jsonl", "a") as f:
                    f.write(json.dumps(row, sort_keys=True) + "\n")

    if args.jobs > 1 and not args.debug:
        parts = np.array_split(np.arange(len(jobs)), min(args.jobs, len(jobs)))
        payloads = [
            (schedule, train, manifest.checksum, args.dicts, args.label, args.force, seeds[p], roots[p]) for p in parts
        ]
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_synth_chunk, payloads))
        layers = [np.concatenate([res[1][l] for res in results]) for l in range(schedule.depth + 1)]
    else:
        if args.dicts:
            dicts = _load_dicts(args.dicts, args.label, schedule, manifest.checksum, args.force)
        else:
            dicts = SynthesisModel(schedule, train, manifest.checksum).dicts
        if args.debug:
            for j in jobs:
                (j[3] / "debug" / "iterations.jsonl").unlink(missing_ok=True)
        _, layers = synthesize_batch(seeds, schedule, dicts, roots, on_iteration=debug_cb)
    wall = (time.perf_counter() - t0) / len(jobs)

    for b, (sid, seed, rs, d) in enumerate(jobs):
        d.mkdir(parents=True, exist_ok=True)
        write_pgm(d / "seed.pgm", np.clip(seed, 0, 1))
        names = []
        for l in range(schedule.depth):
            name = f"layer-{l}.pgm"
            write_pgm(d / name, np.clip(layers[l][b], 0, 1))
            names.append(name)
        write_pgm(d / "final.pgm", np.clip(layers[0][b], 0, 1))
        rec = RunRecord(
            seed_id=sid,
            root_seed=int(rs),
            schedule_hash=schedule.hash(),
            layer_outputs=names,
            wall_time=wall if args.record_timing else 0.0,
            schedule_name=schedule.name,
            corpus_checksum=manifest.checksum,
            extra={"class": args.label, "command_root_seed": int(root)},
        )
        _write_json(d / "run.json", rec.to_dict())
    print(json.dumps({"runs": len(jobs), "root_seed": int(root), "out": str(Path(args.out))}))
    return 0


# -- assess ------------------------------------------------------------------------


def collect_inputs(inputs: Path, label: int | None) -> list[tuple[str, Path, dict | None]]:
    """Run directories (``final.pgm`` + ``run.json``) or loose ``.pgm`` files under ``inputs``."""
    inputs = Path(inputs)
    if not inputs.exists():
        raise ConfigurationError(f"input path {inputs} does not exist")
    found = []
    finals = sorted(inputs.rglob("final.pgm")) if inputs.is_dir() else []
    if finals:
        for f in finals:
            meta_path = f.parent / "run.json"
            meta = json.loads(meta_path.read_text()) if meta_path.exists() else None
            if label is not None and meta and meta.get("extra", {}).get("class", label) != label:
                continue
            found.append((str(f.parent.relative_to(inputs)), f, meta))
    elif inputs.is_dir():
        found = [(str(p.relative_to(inputs)), p, None) for p in sorted(inputs.rglob("*.pgm"))]
    else:
        found = [(inputs.name, inputs, None)]
    if not found:
        raise ConfigurationError(f"no images found under {inputs}")
    return found


def cmd_assess(args) -> int:
    corpus = _corpus_dir(args)
    train, _, manifest = load_corpus(corpus, "train", args.label)
    schedule = _schedule(args)
    entries = collect_inputs(Path(args.inputs), args.label)
    for eid, _, meta in entries:
        if meta and not args.force and meta.get("corpus_checksum") not in (None, manifest.checksum):
            raise ConfigurationError(f"{eid} was synthesized from a different corpus (use --force)")
    images = np.stack([read_pgm(p) for _, p, _ in entries])
    if images.shape[1:] != train.shape[1:]:
        raise ConfigurationError(f"inputs are {images.shape[1:]}, the class corpus is {train.shape[1:]}")
    mask = schedule.originality_mask if args.mask is None else tuple(int(v) for v in args.mask.split(","))
    ll_cfg = LlConfig(sigma=args.sigma, patch_side=args.patch_side, shortlist=args.shortlist)
    model = ParzenModel(train, ll_cfg)
    shortlist_gap = validate_shortlist(images[: args.shortlist_calibration], model)
    spread_cfg = None if args.no_spread else SpreadConfig(perplexity=args.perplexity)
    n_ref = args.spread_reference or max(len(images), int(np.ceil(args.perplexity)) + 1)
    n_ref = min(n_ref, len(train))
    report = score_images(
        images,
        train,
        image_ids=[e[0] for e in entries],
        label=args.label,
        ll_config=ll_cfg,
        spread_config=spread_cfg,
        mask=mask,
        spread_reference=train[:n_ref],
        provenance={
            "corpus_checksum": manifest.checksum,
            "schedule_hash": schedule.hash(),
            "inputs": str(args.inputs),
            "version": __version__,
            "shortlist_gap": shortlist_gap,
        },
        model=model,
    )
    report.to_json(args.report)
    if args.csv:
        report.to_csv(args.csv)
    if args.scatter:
        originality_batch(images, train, mask).to_csv(args.scatter, ids=[e[0] for e in entries])
    if args.distances:
        export_distances(args.distances, np.concatenate([train[:n_ref], images]),
                         ids=[f"train-{i}" for i in range(n_ref)] + [e[0] for e in entries], mask=mask)
    print(json.dumps(report.aggregates()))
    return 0


# -- sweep -------------------------------------------------------------------------


def cmd_sweep(args) -> int:
    corpus = _corpus_dir(args)
    train, _, _ = load_corpus(corpus, "train", args.label)
    split, indices = parse_index_spec(args.images)
    source, _, _ = load_corpus(corpus, split, args.label)
    images = _select(source, indices, split, args.label)
    model = ParzenModel(train, LlConfig(patch_side=args.patch_side))
    table = ll_sweep(images, model, parse_floats(args.sigmas), parse_floats(args.epsilons),
                     RankConfig(args.neighbours, args.neighbour_sigma))
    table.to_csv(args.out)
    print(json.dumps({"rows": len(table.sigmas) * len(table.epsilons), "out": str(args.out)}))
    return 0


# -- entry point -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="patchsynth", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"patchsynth {__version__}")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for runs")
    sub = p.add_subparsers(dest="command", required=True)

    def corpus_opt(sp):
        sp.add_argument("--corpus", help="corpus directory (default: $PATCHSYNTH_CACHE/mnist)")

    def schedule_opts(sp):
        sp.add_argument("--preset", default="mnist-digit")
        sp.add_argument("--config", help="schedule JSON, merged over the preset")
        sp.add_argument("--override", help="inline JSON merged last")

    s = sub.add_parser("ingest", help="store an IDX image/label pair as a corpus split")
    s.add_argument("--images", required=True)
    s.add_argument("--labels", required=True)
    s.add_argument("--split", required=True, choices=["train", "test"])
    corpus_opt(s)
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("build", help="write per-layer dictionary archives for one class")
    schedule_opts(s)
    corpus_opt(s)
    s.add_argument("--class", dest="label", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_build)

    s = sub.add_parser("synth", help="synthesize images from seed images")
    schedule_opts(s)
    corpus_opt(s)
    s.add_argument("--class", dest="label", type=int, required=True)
    s.add_argument("--seeds", required=True, help="e.g. test:0..9, or gaussian:N for sampled seeds")
    s.add_argument("--runs-per-seed", type=int, default=1)
    s.add_argument("--root-seed", type=int)
    s.add_argument("--out", required=True)
    s.add_argument("--dicts", help="directory of archives from 'build' (default: build in memory)")
    s.add_argument("--force", action="store_true", help="accept archives built from another corpus/schedule")
    s.add_argument("--debug", action="store_true", help="dump every ADMM iteration")
    s.add_argument("--record-timing", action="store_true", help="store wall time in run.json (output is then not byte-stable)")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("assess", help="score images against a class corpus")
    schedule_opts(s)
    corpus_opt(s)
    s.add_argument("--class", dest="label", type=int, required=True)
    s.add_argument("--inputs", required=True)
    s.add_argument("--report", required=True)
    s.add_argument("--csv")
    s.add_argument("--scatter", help="CSV of (d_G, d_T) pairs")
    s.add_argument("--distances", help="binary distance matrix of reference + inputs")
    s.add_argument("--sigma", type=float, default=DEFAULT_SIGMA)
    s.add_argument("--patch-side", type=int, default=6)
    s.add_argument("--shortlist", type=int, help="sum over the k nearest training patches (checked against exact scores)")
    s.add_argument("--shortlist-calibration", type=int, default=100,
                   help="inputs rescored exactly to validate --shortlist (default 100)")
    s.add_argument("--perplexity", type=float, default=30.0)
    s.add_argument("--spread-reference", type=int, help="training images used for spread (default: input count)")
    s.add_argument("--no-spread", action="store_true")
    s.add_argument("--mask", help="y0,y1,x0,x1 (default: the schedule's originality mask)")
    s.add_argument("--force", action="store_true", help="score inputs made from another corpus")
    s.set_defaults(func=cmd_assess)

    s = sub.add_parser("sweep", help="rank-aware log-likelihood over sigma/epsilon grids")
    corpus_opt(s)
    s.add_argument("--class", dest="label", type=int, required=True)
    s.add_argument("--images", default="test:0..49")
    s.add_argument("--sigmas", required=True)
    s.add_argument("--epsilons", required=True)
    s.add_argument("--neighbours", type=int, default=64)
    s.add_argument("--neighbour-sigma", type=float, default=DEFAULT_SIGMA)
    s.add_argument("--patch-side", type=int, default=6)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if hasattr(args, "preset"):
        given = argv if argv is not None else sys.argv[1:]
        args.preset_given = any(a == "--preset" or a.startswith("--preset=") for a in given)
    try:
        if args.jobs < 1:
            raise ConfigurationError("--jobs must be >= 1")
        return args.func(args)
    except PatchSynthError as exc:
        sys.stderr.write(json.dumps(exc.to_dict(), sort_keys=True) + "\n")
        return next((code for cls, code in EXIT_CODES.items() if isinstance(exc, cls)), 1)
    except (OSError, json.JSONDecodeError) as exc:
        sys.stderr.write(json.dumps({"error": "io_error", "message": str(exc)}, sort_keys=True) + "\n")
        return 5


if __name__ == "__main__":
    sys.exit(main())
