"""Write the three-person band fixture as a snapshot plus a vector gallery file.

    python3 scripts/make_fixture.py --out-dir fixtures
"""
import argparse
from dataclasses import dataclass
from pathlib import Path

from emfv import synth
from emfv.cli import write_vectors
from emfv.index import build_index
from emfv.store import save_snapshot


@dataclass
class FixtureConfig:
    samples_per_person: int = 8
    dimension: int = 256
    margin: float = 0.0
    seed: int = 11


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out-dir", type=Path, default=Path("fixtures"))
    ap.add_argument("--seed", type=int, default=FixtureConfig.seed)
    ap.add_argument("--margin", type=float, default=FixtureConfig.margin)
    args = ap.parse_args()
    cfg = FixtureConfig(seed=args.seed, margin=args.margin)

    gallery = synth.banded_gallery(synth.THREE_PERSON_BANDS, cfg.samples_per_person, cfg.dimension,
                                   seed=cfg.seed)
    idx = build_index(gallery, cfg.margin)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    save_snapshot(idx, gallery, args.out_dir / "fix.json")
    with (args.out_dir / "gallery.jsonl").open("w") as fh:
        write_vectors([(p, v) for p, rows in gallery.samples.items() for v in rows], fh)
    for b in idx.bands:
        print(f"{b.person}: [{b.low:.4f}, {b.high:.4f}]")
    print(f"wrote {args.out_dir / 'fix.json'} and {args.out_dir / 'gallery.jsonl'}")


if __name__ == "__main__":
    main()
