"""Reference models: IRIS_A, IRIS_B, the PCA MNIST MLP and the extraction MLP.

Each builder trains from a fixed seed, quantises on the training split and
lays the weights out in Flash. Results are cached on disk keyed by the
architecture, seed and data source, since training is deterministic.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import data as D
from .flash import FlashImage, layout
from .nn import FloatModel, TrainConfig, model_from_dict, model_to_dict, train
from .quant import QuantizedModel, q_accuracy, quantize

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ArchSpec:
    name: str
    dataset: str  # "iris" | "mnist-pca50" | "mnist"
    config: TrainConfig
    reference_accuracy: Optional[float]
    floor: Optional[float]


ARCHS = {
    "iris_a": ArchSpec("iris_a", "iris",
                       TrainConfig(hidden=(1,), epochs=300, batch_size=16, learning_rate=0.05,
                                   bias=True, seed=1),
                       None, None),
    "iris_b": ArchSpec("iris_b", "iris",
                       TrainConfig(hidden=(4,), epochs=300, batch_size=16, learning_rate=0.05,
                                   bias=True, seed=0),
                       0.96, 0.93),
    "mnist": ArchSpec("mnist", "mnist-pca50",
                      TrainConfig(hidden=(10,), epochs=80, batch_size=32, learning_rate=0.01,
                                  lr_decay=0.97, bias=True, seed=0),
                      0.92, 0.90),
    # 784-128-64-10 without biases: 109,184 parameters
    "mnist_deep": ArchSpec("mnist_deep", "mnist",
                           TrainConfig(hidden=(128, 64), epochs=40, batch_size=32, learning_rate=0.05,
                                       lr_decay=0.9, weight_decay=1e-4, seed=0),
                           None, 0.95),
}


@dataclass
class Fixture:
    name: str
    dataset: D.Dataset
    model: FloatModel
    qmodel: QuantizedModel
    image: FlashImage
    pca: Optional[D.PcaTransform] = None
    data_source: str = "embedded"

    @property
    def float_accuracy(self) -> float:
        return self.model.metadata["test_accuracy"]

    def quantized_accuracy(self, x=None, y=None) -> float:
        if x is None:
            x, y = self.dataset.x_test, self.dataset.y_test
        return q_accuracy(self.qmodel, x, y)


def load_dataset(kind: str, seed: int = 0, mnist_dir=None):
    """(Dataset, PcaTransform or None, source tag) for a dataset kind."""
    if kind == "iris":
        return D.load_iris(seed), None, "embedded"
    paths, source = D.resolve_mnist(mnist_dir)
    ds = D.load_mnist(paths["train_images"], paths["train_labels"],
                      paths["test_images"], paths["test_labels"])
    if kind == "mnist":
        return ds, None, source
    if kind == "mnist-pca50":
        pds, pca = D.pca_dataset(ds, 50)
        return pds, pca, source
    raise ValueError(f"unknown dataset kind {kind!r}")


def _cache_key(spec: ArchSpec, source: str, n_train: int) -> str:
    blob = json.dumps([spec.name, spec.dataset, asdict(spec.config), source, n_train, 1],
                      sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def build(name: str, seed: Optional[int] = None, mnist_dir=None, cache: bool = True,
          enforce_floor: bool = False) -> Fixture:
    spec = ARCHS[name]
    cfg = spec.config if seed is None else TrainConfig(**{**asdict(spec.config), "seed": seed})
    if enforce_floor and spec.floor is not None:
        cfg = TrainConfig(**{**asdict(cfg), "min_accuracy": spec.floor})
    ds, pca, source = load_dataset(spec.dataset, mnist_dir=mnist_dir)
    spec = ArchSpec(spec.name, spec.dataset, cfg, spec.reference_accuracy, spec.floor)
    path = D.default_cache_dir() / "models" / f"{name}-{_cache_key(spec, source, len(ds.y_train))}.json"
    model = None
    if cache and path.exists():
        model = model_from_dict(json.loads(path.read_text()))
    if model is None:
        log.info("training fixture %s (seed %d)", name, cfg.seed)
        model = train(cfg, ds)
        model.metadata.update(arch=name, dataset=spec.dataset, data_source=source,
                              reference_accuracy=spec.reference_accuracy)
        if cache:
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_suffix(".tmp")
            tmp.write_text(json.dumps(model_to_dict(model)))
            tmp.replace(path)
    qmodel = quantize(model, ds.x_train)
    qmodel.metadata["quantized_test_accuracy"] = q_accuracy(qmodel, ds.x_test, ds.y_test)
    return Fixture(name, ds, model, qmodel, layout(qmodel), pca, source)
