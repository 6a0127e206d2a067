"""Momentum SGD on teacher-forced answer cross-entropy."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from gridlens import gridworld
from gridlens import numerics as nx
from gridlens.model import prompts
from gridlens.model.config import ModelConfig
from gridlens.model.transformer import ModelInput, assemble_input, forward, stack_inputs
from gridlens.model.weights import ModelWeights, compute_mean_embedding, init_weights
from gridlens.numerics import GradientTape

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Loss became non-finite; ``checkpoint`` holds the last finite weights."""

    def __init__(self, message: str, checkpoint: ModelWeights, step: int):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.step = step


@dataclass(frozen=True)
class TrainingExample:
    grid: gridworld.TokenGrid
    template: str
    class_id: int | None
    answer: tuple[str, ...]


@dataclass(frozen=True)
class Hyperparams:
    steps: int = 400
    batch_size: int = 16
    lr: float = 0.05
    momentum: float = 0.9
    init_scale: float = 0.3
    clip_norm: float = 5.0  # global gradient norm; 0 disables
    log_every: int = 10


@dataclass
class TrainingLog:
    losses: list[float] = field(default_factory=list)
    initial_loss: float = float("nan")
    final_accuracy: float = float("nan")


def examples_for_scene(scene: gridworld.Scene, config: ModelConfig, rng_seed: int | None = None) -> list[TrainingExample]:
    """Localization, binary and list examples for every object in ``scene``."""
    grid = gridworld.render_tokens(scene, rng_seed, n_classes=config.n_classes, d_vis=config.d_vis)
    present = [o.class_id for o in scene.objects]
    out = []
    for o in scene.objects:
        out.append(TrainingExample(grid, prompts.LOCALIZE, o.class_id, tuple(prompts.box_answer(o.box))))
        out.append(TrainingExample(grid, prompts.CLASSIFY_BINARY, o.class_id, tuple(prompts.binary_answer(True))))
    absent = [c for c in range(config.n_classes) if c not in present]
    if absent:
        out.append(TrainingExample(grid, prompts.CLASSIFY_BINARY, absent[0], tuple(prompts.binary_answer(False))))
    out.append(TrainingExample(grid, prompts.CLASSIFY_LIST, None, tuple(prompts.list_answer(present, config.n_classes))))
    return out


def _encode(weights: ModelWeights, batch: Sequence[TrainingExample]) -> tuple[ModelInput, np.ndarray]:
    vocab = weights.config.vocab
    inp = stack_inputs([assemble_input(weights, e.grid, e.template, e.class_id) for e in batch])
    answers = np.array([vocab.encode(e.answer) for e in batch], dtype=np.int64)
    return inp.with_tokens(np.concatenate([inp.tokens, answers], axis=1)), answers


def _batch_loss(weights: ModelWeights, inp: ModelInput, answers: np.ndarray, prompt_len: int):
    logits = forward(weights, inp, project=True)
    L = answers.shape[1]
    lp = nx.log_softmax(nx.index(logits, (slice(None), slice(prompt_len - 1, prompt_len - 1 + L))), -1)
    B = answers.shape[0]
    picked = nx.index(lp, (np.arange(B)[:, None], np.arange(L)[None, :], answers))
    return nx.mul(nx.mean(nx.reshape(picked, (B * L,))), -1.0), logits


def answer_accuracy(weights: ModelWeights, dataset: Sequence[TrainingExample]) -> float:
    """Fraction of examples whose every answer token is the teacher-forced argmax."""
    hits = 0
    for group in _groups(dataset).values():
        for start in range(0, len(group), 64):
            batch = [dataset[i] for i in group[start:start + 64]]
            inp, answers = _encode(weights, batch)
            p = inp.seq_len - answers.shape[1]
            pred = forward(weights, inp).data[:, p - 1:p - 1 + answers.shape[1]].argmax(-1)
            hits += int((pred == answers).all(axis=1).sum())
    return hits / len(dataset)


def _groups(dataset: Sequence[TrainingExample]) -> dict[str, list[int]]:
    groups: dict[str, list[int]] = {}
    for i, e in enumerate(dataset):
        groups.setdefault(e.template, []).append(i)
    return groups


def train_model(config: ModelConfig, dataset: Sequence[TrainingExample], hyperparams: Hyperparams = Hyperparams(),
                rng_seed: int = 0, history: TrainingLog | None = None) -> ModelWeights:
    """Deterministic for a fixed seed: the seed sets initial weights and batch order.

    Batches never mix templates (prompts of one template share a length).
    """
    if not dataset:
        raise ValueError("dataset is empty")
    history = history if history is not None else TrainingLog()
    rng = np.random.default_rng(rng_seed)
    weights = init_weights(config, int(rng.integers(2**31 - 1)), hyperparams.init_scale)
    groups = _groups(dataset)
    names = sorted(groups)
    velocity = {k: np.zeros_like(v.data) for k, v in weights.params.items()}
    for step in range(hyperparams.steps):
        template = names[int(rng.integers(len(names)))]
        pool = groups[template]
        idx = rng.choice(len(pool), size=min(hyperparams.batch_size, len(pool)), replace=False)
        inp, answers = _encode(weights, [dataset[pool[i]] for i in np.sort(idx)])
        # overflow is detected explicitly below, so numpy's warnings are noise
        with np.errstate(over="ignore", invalid="ignore"), GradientTape() as tape:
            tracked = weights.tracked(tape)
            loss, _ = _batch_loss(tracked, inp, answers, inp.seq_len - answers.shape[1])
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingError(f"non-finite loss at step {step}", weights, step)
        with np.errstate(over="ignore", invalid="ignore"):
            grads = {k: g.data for k, g in nx.backward(tape, loss).items()}
            norm = float(np.sqrt(sum(float((g ** 2).sum()) for g in grads.values())))
        if not np.isfinite(norm):
            raise TrainingError(f"non-finite gradient at step {step}", weights, step)
        if hyperparams.clip_norm and norm > hyperparams.clip_norm:
            grads = {k: g * (hyperparams.clip_norm / norm) for k, g in grads.items()}
        arrays = {}
        for k, v in weights.params.items():
            velocity[k] = hyperparams.momentum * velocity[k] + grads[k]
            arrays[k] = v.data - hyperparams.lr * velocity[k]
        if not all(np.all(np.isfinite(a)) for a in arrays.values()):
            raise TrainingError(f"non-finite weights at step {step}", weights, step)
        weights = ModelWeights.from_numpy(config, arrays, weights.mean_embedding)
        if step == 0:
            history.initial_loss = value
        history.losses.append(value)
        if hyperparams.log_every and step % hyperparams.log_every == 0:
            log.info("step %d loss %.4f", step, value)
    weights = ModelWeights.from_numpy(config, weights.numpy(),
                                      compute_mean_embedding(config, weights["adapter.proj"].data))
    history.final_accuracy = answer_accuracy(weights, dataset)
    log.info("final answer accuracy %.4f", history.final_accuracy)
    return weights
