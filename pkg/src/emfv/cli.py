"""Operator command line: ``emfv <verb> [flags]``.

Results go to stdout as JSON (one object per line where a verb produces
several). Operation errors exit 1 with ``{"code", "message"}`` on stderr;
usage errors exit 2.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import oracle, synth
from .errors import EmfvError
from .index import (
    Band,
    BandedIndex,
    Gallery,
    MeanPolicy,
    authenticate_distance,
    build_index,
    classify_distance,
    enroll,
    identify_distance,
    lookup_cost_distance,
)
from .core import MeanVector, normalize_rows
from .nn import TrainingConfig, accuracy, default_network, extract_features, train
from .store import load_snapshot, load_weights, save_snapshot, save_weights


def _emit(obj):
    print(json.dumps(obj, sort_keys=True))


def read_vectors(path) -> list[tuple[str, np.ndarray]]:
    """JSON-lines file of ``{"id": ..., "vector": [...]}`` records."""
    out = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            out.append((str(rec["id"]), np.asarray(rec["vector"], dtype=np.float64)))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise ValueError(f"{path}:{n}: bad vector record ({e})") from None
    return out


def write_vectors(records, fh=None):
    fh = fh or sys.stdout
    for rid, vec in records:
        fh.write(json.dumps({"id": rid, "vector": [float(x) for x in vec]}) + "\n")


def _gallery_from_records(records) -> Gallery:
    grouped: dict[str, list] = {}
    for rid, vec in records:
        grouped.setdefault(rid, []).append(vec)
    return Gallery.from_raw({p: np.stack(v) for p, v in grouped.items()})


def _load_images(path: Path):
    """``DIR/<label>/*.npy`` -> (images, integer labels, label names)."""
    names = sorted(p.name for p in path.iterdir() if p.is_dir())
    images, labels = [], []
    for k, name in enumerate(names):
        for f in sorted((path / name).glob("*.npy")):
            images.append(np.load(f))
            labels.append(k)
    if not images:
        raise ValueError(f"no .npy images under {path}/<label>/")
    return np.asarray(images, dtype=np.float64), np.asarray(labels), names


def cmd_train(args):
    if args.data:
        images, labels, _ = _load_images(Path(args.data))
    else:
        images, labels = synth.face_images(args.classes, args.per_class, args.image_side,
                                           seed=args.seed)
    side = images.shape[-1]
    net = default_network(int(labels.max()) + 1, image_side=side,
                          feature_dim=args.feature_dim, seed=args.seed)
    cfg = TrainingConfig(args.lr, args.epochs, args.batch_size, args.seed)
    net, history = train(net, images, labels, cfg)
    save_weights(net, args.out)
    _emit({"weights": str(args.out), "initial_loss": history[0], "final_loss": history[-1],
           "train_accuracy": accuracy(net, images, labels), "images": int(labels.size),
           "feature_dimension": net.feature_dimension})


def cmd_extract(args):
    net = load_weights(args.weights)
    records = []
    for f in args.images:
        records.append((Path(f).stem, extract_features(net, np.load(f))))
    write_vectors(records)


def cmd_build(args):
    gallery = _gallery_from_records(read_vectors(args.gallery))
    idx = build_index(gallery, args.margin, epsilon=args.epsilon,
                      tie_tolerance=args.tie_tolerance)
    save_snapshot(idx, gallery, args.out)
    _emit({"snapshot": str(args.out), "version": idx.version, "persons": len(idx),
           "min_gap": idx.min_gap(),
           "bands": [[b.person, b.low, b.high] for b in idx.bands]})


def cmd_enroll(args):
    idx, gallery = load_snapshot(args.snapshot)
    rows = [v for _, v in read_vectors(args.vectors)]
    idx, gallery = enroll(idx, gallery, args.person, np.stack(rows), MeanPolicy(args.policy))
    save_snapshot(idx, gallery, args.snapshot)
    band = idx.band_for(args.person)
    _emit({"version": idx.version, "person_id": args.person, "band": [band.low, band.high]})


def _probe_distances(idx: BandedIndex, args):
    if args.distance is not None:
        return [("distance", float(args.distance))]
    recs = read_vectors(args.vectors)
    d = idx.distances(normalize_rows(np.stack([v for _, v in recs])))
    return [(rid, float(x)) for (rid, _), x in zip(recs, d)]


def cmd_identify(args):
    idx, _ = load_snapshot(args.snapshot)
    for rid, d in _probe_distances(idx, args):
        res = classify_distance(idx, d)
        matches = identify_distance(idx, d, args.max_neighbors) if len(idx) else []
        _emit({"probe": rid, "outcome": res.outcome.value, "persons": list(res.persons),
               "distance": d, "matches": [[p, g] for p, g in matches]})


def cmd_authenticate(args):
    idx, _ = load_snapshot(args.snapshot)
    for rid, d in _probe_distances(idx, args):
        ok = authenticate_distance(idx, args.person, d)
        _emit({"probe": rid, "person_id": args.person,
               "decision": "accept" if ok else "reject", "distance": d})


def cmd_verify(args):
    idx, gallery = load_snapshot(args.snapshot)
    overlaps = oracle.verify_disjoint(idx.bands)
    round_trip = 0
    for person, rows in gallery.samples.items():
        for d in idx.distances(rows):
            res = classify_distance(idx, float(d))
            round_trip += res.persons != (person,) or res.outcome.value != "in_band"
    rng = np.random.default_rng(args.seed)
    report = oracle.check_index(idx, synth.random_probes(idx.mean, args.probes, rng))
    mismatches = len(report.mismatches) + round_trip
    _emit({"probes": report.checked, "mismatches": mismatches, "overlaps": len(overlaps),
           "gallery_misclassified": round_trip})
    print(f"{mismatches} mismatches")
    return 0 if mismatches == 0 and not overlaps else 1


def synthetic_bands(m: int, rng) -> tuple[Band, ...]:
    """``m`` disjoint bands with random widths and gaps, ids ``p0000...``."""
    widths = rng.uniform(0.2, 1.0, m)
    gaps = rng.uniform(0.05, 0.5, m)
    lows = np.cumsum(gaps + np.concatenate([[0.0], widths[:-1]]))
    return tuple(Band(f"p{i:05d}", float(lo), float(lo + w)) for i, (lo, w) in
                 enumerate(zip(lows, widths)))


def bench_rows(persons, queries: int, seed: int, timing: bool = True):
    rows = []
    for m in persons:
        rng = np.random.default_rng([seed, m])
        bands = synthetic_bands(m, rng)
        idx = BandedIndex(MeanVector(np.zeros(1), 1), bands, 1)
        ds = rng.uniform(0.0, bands[-1].high + 0.5, queries)
        t0 = time.perf_counter()
        counts = [lookup_cost_distance(idx, float(d)) for d in ds]
        elapsed = time.perf_counter() - t0
        row = {"persons": m, "bound": math.ceil(math.log2(m)) + 2, "max_cmp": max(counts),
               "mean_cmp": round(float(np.mean(counts)), 4)}
        if timing:
            row["us_per_query"] = round(1e6 * elapsed / queries, 3)
        rows.append(row)
    return rows


def cmd_bench(args):
    rows = bench_rows(args.persons, args.queries, args.seed, timing=not args.no_timing)
    cols = list(rows[0])
    if args.format == "csv":
        print(",".join(cols))
        for r in rows:
            print(",".join(str(r[c]) for c in cols))
    else:
        print("  ".join(f"{c:>12}" for c in cols))
        for r in rows:
            print("  ".join(f"{r[c]:>12}" for c in cols))
    return 0 if all(r["max_cmp"] <= r["bound"] for r in rows) else 1


def cmd_serve(args):
    from .service import ServiceConfig, serve

    cfg = ServiceConfig.load(args.config)
    overrides = {k: v for k, v in (("addr", args.addr), ("snapshot", args.snapshot)) if v}
    if overrides:
        cfg = ServiceConfig(**{**cfg.__dict__, **overrides})
    network = load_weights(cfg.weights) if cfg.weights else None
    serve(cfg, network)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="emfv", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    def verb(name, fn, help):
        sp = sub.add_parser(name, help=help)
        sp.set_defaults(fn=fn)
        sp.add_argument("--seed", type=int, default=0)
        return sp

    sp = verb("train", cmd_train, "train the feature network and write weights")
    sp.add_argument("--data", help="directory of <label>/*.npy images (default: synthetic)")
    sp.add_argument("--classes", type=int, default=4)
    sp.add_argument("--per-class", type=int, default=50)
    sp.add_argument("--image-side", type=int, default=16)
    sp.add_argument("--feature-dim", type=int, default=64)
    sp.add_argument("--epochs", type=int, default=60)
    sp.add_argument("--lr", type=float, default=0.05)
    sp.add_argument("--batch-size", type=int, default=8)
    sp.add_argument("--out", required=True)

    sp = verb("extract", cmd_extract, "images -> feature vectors (JSON lines)")
    sp.add_argument("--weights", required=True)
    sp.add_argument("images", nargs="+", help=".npy image files")

    sp = verb("build", cmd_build, "gallery vectors -> index snapshot")
    sp.add_argument("--gallery", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--margin", type=float, default=0.05)
    sp.add_argument("--epsilon", type=float, default=0.02)
    sp.add_argument("--tie-tolerance", type=float, default=1e-9)

    sp = verb("enroll", cmd_enroll, "add a person to a snapshot")
    sp.add_argument("--snapshot", required=True)
    sp.add_argument("--person", required=True)
    sp.add_argument("--vectors", required=True)
    sp.add_argument("--policy", choices=[m.value for m in MeanPolicy], default="frozen")

    for name, fn, help in (("identify", cmd_identify, "one-to-many search"),
                           ("authenticate", cmd_authenticate, "one-to-one match")):
        sp = verb(name, fn, help)
        sp.add_argument("--snapshot", required=True)
        src = sp.add_mutually_exclusive_group(required=True)
        src.add_argument("--vectors", help="JSON-lines probe vectors")
        src.add_argument("--distance", type=float, help="precomputed distance to the mean")
        if name == "identify":
            sp.add_argument("--max-neighbors", type=int, default=3)
        else:
            sp.add_argument("--person", required=True)

    sp = verb("verify", cmd_verify, "check a snapshot against the brute-force oracle")
    sp.add_argument("--snapshot", required=True)
    sp.add_argument("--probes", type=int, default=10000)

    sp = verb("bench", cmd_bench, "comparison counts vs number of persons")
    sp.add_argument("--persons", type=int, nargs="+", default=[2, 8, 64, 512, 4096])
    sp.add_argument("--queries", type=int, default=2000)
    sp.add_argument("--format", choices=["table", "csv"], default="table")
    sp.add_argument("--no-timing", action="store_true", help="omit wall time (byte-stable output)")

    sp = verb("serve", cmd_serve, "run the HTTP service")
    sp.add_argument("--config")
    sp.add_argument("--addr")
    sp.add_argument("--snapshot")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        rc = args.fn(args)
    except (EmfvError, ValueError, OSError) as e:
        code = getattr(e, "code", type(e).__name__)
        print(json.dumps({"code": code, "message": str(e)}), file=sys.stderr)
        return 1
    return rc or 0


if __name__ == "__main__":
    sys.exit(main())
