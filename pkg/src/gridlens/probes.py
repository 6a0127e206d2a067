"""Linear position probes on image-token activations.

Tags: ``projection`` (adapter output, no positions), ``embedding`` (input to
block 0), ``layer{l}`` (residual stream after block l, before any final norm).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from gridlens import gridworld
from gridlens import numerics as nx
from gridlens.evaluation import render
from gridlens.model import prompts
from gridlens.model.transformer import assemble_input, forward
from gridlens.model.weights import ModelWeights
from gridlens.numerics import DenseArray, GradientTape

AXES = ("row", "column")
DEFAULT_EPOCHS = 10
STEPS_PER_EPOCH = 20
L2 = 1e-4
READ_POINT = "projection: adapter output; embedding: input to block 0; layerN: residual after block N (raw)"


class ProbeError(ValueError):
    pass


def default_tags(n_layers: int) -> list[str]:
    return ["projection", "embedding"] + [f"layer{i}" for i in range(n_layers)]


@dataclass
class ProbeDataset:
    """Activations per tag, one row per (scene, image cell)."""

    activations: dict[str, np.ndarray]  # tag -> (N, d_model)
    rows: np.ndarray  # (N,) y coordinate
    columns: np.ndarray  # (N,) x coordinate
    cells: np.ndarray  # (N,) cell index
    grid_size: int

    def labels(self, axis: str) -> np.ndarray:
        if axis == "row":
            return self.rows
        if axis == "column":
            return self.columns
        raise ProbeError(f"axis must be one of {AXES}, got {axis!r}")

    def __len__(self) -> int:
        return len(self.cells)


def collect_activations(weights: ModelWeights, scenes: Sequence[gridworld.Scene], layer_tags: Sequence[str] | None = None,
                        batch_size: int = 128) -> ProbeDataset:
    cfg = weights.config
    tags = list(layer_tags) if layer_tags is not None else default_tags(cfg.n_layers)
    for t in tags:
        if t not in default_tags(cfg.n_layers):
            raise ProbeError(f"unknown layer tag {t!r}")
    g = cfg.grid_size
    lay = prompts.layout(prompts.LOCALIZE, g, cfg.n_classes)
    chunks: dict[str, list[np.ndarray]] = {t: [] for t in tags}
    for start in range(0, len(scenes), batch_size):
        batch = scenes[start:start + batch_size]
        # Image positions precede the task text, so the prompt does not affect them.
        inp = assemble_input(weights, [render(weights, s) for s in batch], prompts.LOCALIZE,
                             [s.objects[0].class_id for s in batch])
        _, trace = forward(weights, inp, record=True, record_heads=False)
        img = slice(lay.image_start, lay.image_stop)
        for t in tags:
            if t == "projection":
                a = trace.projected
            elif t == "embedding":
                a = trace.embedding[:, img]
            else:
                a = trace.resid_post[int(t[5:])][:, img]
            chunks[t].append(a.reshape(-1, a.shape[-1]))
    n = len(scenes)
    cells = np.tile(np.arange(g * g), n)
    return ProbeDataset({t: np.concatenate(v) if v else np.zeros((0, cfg.d_model)) for t, v in chunks.items()},
                        cells // g, cells % g, cells, g)


@dataclass
class ProbeSpec:
    layer_tag: str
    axis: str
    W: np.ndarray  # (d_model, G) on standardized features
    b: np.ndarray  # (G,)
    mean: np.ndarray
    scale: np.ndarray
    train_loss: list[float] = field(default_factory=list)

    def logits(self, X: np.ndarray) -> np.ndarray:
        return ((X - self.mean) / self.scale) @ self.W + self.b

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.logits(X).argmax(axis=-1)


def _loss(W: DenseArray, b: DenseArray, X: DenseArray, y: np.ndarray) -> DenseArray:
    lp = nx.log_softmax(X @ W + b, -1)
    nll = nx.mul(nx.mean(nx.index(lp, (np.arange(len(y)), y))), -1.0)
    return nll + nx.mul(nx.sum(nx.mul(W, W)), L2)


def train_probe(X_train: np.ndarray, y_train: np.ndarray, n_classes: int, *, epochs: int = DEFAULT_EPOCHS,
                rng_seed: int = 0, steps_per_epoch: int = STEPS_PER_EPOCH, layer_tag: str = "", axis: str = "") -> ProbeSpec:
    """Multinomial logistic regression, full-batch gradient descent with Armijo backtracking.

    The seed only sets the (small) initial weights; the optimizer is deterministic.
    """
    y = np.asarray(y_train, dtype=np.int64)
    if len(np.unique(y)) < 2:
        raise ProbeError("training labels contain a single class")
    X = np.asarray(X_train, dtype=np.float64)
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale < 1e-12] = 1.0
    Xs = DenseArray((X - mean) / scale)
    rng = np.random.default_rng(rng_seed)
    W = rng.normal(scale=1e-3, size=(X.shape[1], n_classes))
    b = np.zeros(n_classes)
    step = 1.0
    losses = []
    for _ in range(epochs * steps_per_epoch):
        with GradientTape() as tape:
            Wt, bt = tape.watch(DenseArray(W), "W"), tape.watch(DenseArray(b), "b")
            loss = _loss(Wt, bt, Xs, y)
        grads = nx.backward(tape, loss)
        gW, gb = grads["W"].data, grads["b"].data
        f0 = loss.item()
        losses.append(f0)
        sq = float((gW ** 2).sum() + (gb ** 2).sum())
        if sq < 1e-20:
            break
        step *= 2.0
        while True:
            W_new, b_new = W - step * gW, b - step * gb
            f1 = _loss(DenseArray(W_new), DenseArray(b_new), Xs, y).item()
            if f1 <= f0 - 1e-4 * step * sq or step < 1e-12:
                break
            step *= 0.5
        W, b = W_new, b_new
    return ProbeSpec(layer_tag, axis, W, b, mean, scale, losses)


@dataclass
class LayerProbe:
    tag: str
    row_acc: float
    column_acc: float
    joint_acc: float
    heatmap: np.ndarray  # (G, G) joint accuracy per cell, indexed [row, column]
    probes: tuple[ProbeSpec, ProbeSpec]


def evaluate_layer(train: ProbeDataset, test: ProbeDataset, tag: str, *, epochs: int = DEFAULT_EPOCHS, rng_seed: int = 0,
                   shuffle_labels: bool = False, steps_per_epoch: int = STEPS_PER_EPOCH) -> LayerProbe:
    """Train one probe per axis on ``train`` and score on ``test``.

    ``shuffle_labels`` permutes the labels of both splits independently (a
    label-independence control: the expected accuracy is exactly 1/G).
    """
    g = train.grid_size
    correct = {}
    specs = []
    rng = np.random.default_rng([rng_seed, 1])
    for axis in AXES:
        y_tr, y_te = train.labels(axis), test.labels(axis)
        if shuffle_labels:
            y_tr, y_te = rng.permutation(y_tr), rng.permutation(y_te)
        spec = train_probe(train.activations[tag], y_tr, g, epochs=epochs, rng_seed=rng_seed,
                           steps_per_epoch=steps_per_epoch, layer_tag=tag, axis=axis)
        specs.append(spec)
        correct[axis] = spec.predict(test.activations[tag]) == y_te
    joint = correct["row"] & correct["column"]
    counts = np.bincount(test.cells, minlength=g * g)
    hits = np.bincount(test.cells, weights=joint.astype(np.float64), minlength=g * g)
    heat = np.divide(hits, counts, out=np.zeros(g * g), where=counts > 0).reshape(g, g)
    return LayerProbe(tag, float(correct["row"].mean()), float(correct["column"].mean()), float(joint.mean()),
                      heat, tuple(specs))


@dataclass
class ProbeCurve:
    tags: tuple[str, ...]
    layers: tuple[LayerProbe, ...]
    best_tag: str
    heatmap: np.ndarray
    metadata: dict

    @property
    def joint(self) -> tuple[float, ...]:
        return tuple(p.joint_acc for p in self.layers)


def probe_curve(weights: ModelWeights, train_scenes: Sequence[gridworld.Scene], test_scenes: Sequence[gridworld.Scene], *,
                tags: Sequence[str] | None = None, epochs: int = DEFAULT_EPOCHS, rng_seed: int = 0,
                shuffle_labels: bool = False) -> ProbeCurve:
    """Per-tag joint accuracy and the per-position heatmap at the best tag (first maximum)."""
    tags = list(tags) if tags is not None else default_tags(weights.config.n_layers)
    train = collect_activations(weights, train_scenes, tags)
    test = collect_activations(weights, test_scenes, tags)
    layers = tuple(evaluate_layer(train, test, t, epochs=epochs, rng_seed=rng_seed, shuffle_labels=shuffle_labels)
                   for t in tags)
    best = int(np.argmax([p.joint_acc for p in layers]))
    meta = {"n_train_scenes": len(train_scenes), "n_test_scenes": len(test_scenes), "epochs": epochs,
            "steps_per_epoch": STEPS_PER_EPOCH, "seed": rng_seed, "read_point": READ_POINT,
            "shuffle_labels": shuffle_labels, "l2": L2}
    return ProbeCurve(tuple(tags), layers, tags[best], layers[best].heatmap, meta)
