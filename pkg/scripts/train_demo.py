"""Train the feature network on synthetic faces, then index its feature vectors.

Each class becomes one enrolled person. Reports training accuracy, intra-
and inter-class L1 distances of the normalized features, and whether the
resulting bands are disjoint (a colliding build is reported, not hidden).

    python3 scripts/train_demo.py --epochs 60
"""
import argparse
from dataclasses import asdict, dataclass

import numpy as np

from emfv import synth
from emfv.errors import BandCollisionError
from emfv.index import Gallery, build_index
from emfv.nn import TrainingConfig, accuracy, default_network, extract_features, train


@dataclass
class DemoConfig:
    classes: int = 4
    per_class: int = 50
    image_side: int = 16
    feature_dim: int = 64
    epochs: int = 60
    learning_rate: float = 0.05
    batch_size: int = 8
    seed: int = 0


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    for name, value in asdict(DemoConfig()).items():
        ap.add_argument(f"--{name.replace('_', '-')}", type=type(value), default=value)
    cfg = DemoConfig(**vars(ap.parse_args()))

    images, labels = synth.face_images(cfg.classes, cfg.per_class, cfg.image_side, seed=cfg.seed)
    net = default_network(cfg.classes, image_side=cfg.image_side, feature_dim=cfg.feature_dim,
                          seed=cfg.seed)
    net, history = train(net, images, labels,
                         TrainingConfig(cfg.learning_rate, cfg.epochs, cfg.batch_size, cfg.seed))
    print(f"loss {history[0]:.4f} -> {history[-1]:.4f}, "
          f"train accuracy {accuracy(net, images, labels):.3f}")

    feats = extract_features(net, images)
    norm = feats / np.linalg.norm(feats, axis=1, keepdims=True)
    dist = np.abs(norm[:, None] - norm[None]).sum(axis=2)
    same = labels[:, None] == labels[None]
    np.fill_diagonal(same, False)
    print(f"mean L1 intra-class {dist[same].mean():.4f}, "
          f"inter-class {dist[labels[:, None] != labels[None]].mean():.4f}")

    gallery = Gallery.from_raw({f"class{c}": feats[labels == c] for c in range(cfg.classes)})
    try:
        idx = build_index(gallery)
    except BandCollisionError as e:
        print(f"bands collide: {e}")
        return
    for b in idx.bands:
        print(f"{b.person}: [{b.low:.4f}, {b.high:.4f}]")


if __name__ == "__main__":
    main()
