"""Batched task evaluation shared by every experiment."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from gridlens import gridworld, metrics
from gridlens.model import interventions as iv
from gridlens.model import prompts
from gridlens.model.transformer import ModelInput, assemble_input, generate, stack_inputs
from gridlens.model.weights import ModelWeights

DEFAULT_BATCH = 128

# edit(inputs, examples) -> inputs ; specs(inputs, examples) -> interventions for that chunk
InputEdit = Callable[[ModelInput, Sequence["Example"]], ModelInput]
SpecBuilder = Callable[[ModelInput, Sequence["Example"]], Sequence[iv.InterventionSpec]]


@dataclass(frozen=True)
class Example:
    """One query: a scene and the class asked about (present in the scene)."""

    scene: gridworld.Scene
    target_class: int

    @property
    def box(self) -> tuple[int, int, int, int]:
        return self.scene.find(self.target_class).box

    @property
    def object_cells(self) -> frozenset[int]:
        return frozenset(self.scene.find(self.target_class).cells(self.scene.grid_size))

    def absent_class(self, n_classes: int) -> int:
        """Deterministic class not present in the scene, for negative binary queries."""
        present = {o.class_id for o in self.scene.objects}
        for step in range(1, n_classes + 1):
            c = (self.target_class + step) % n_classes
            if c not in present:
                return c
        raise ValueError("every class is present; no negative query possible")


def examples_from_scenes(scenes: Sequence[gridworld.Scene]) -> list[Example]:
    return [Example(s, o.class_id) for s in scenes for o in s.objects]


def render(weights: ModelWeights, scene: gridworld.Scene, rng_seed: int | None = None) -> gridworld.TokenGrid:
    cfg = weights.config
    return gridworld.render_tokens(scene, rng_seed, n_classes=cfg.n_classes, d_vis=cfg.d_vis)


def query_inputs(weights: ModelWeights, scenes: Sequence[gridworld.Scene], class_ids: Sequence[int | None],
                 template: str) -> ModelInput:
    grids = [render(weights, s) for s in scenes]
    if template == prompts.CLASSIFY_LIST:
        class_ids = [None] * len(scenes)
    return assemble_input(weights, grids, template, list(class_ids))


def generate_answers(weights: ModelWeights, inputs: ModelInput, specs: Sequence[iv.InterventionSpec] = (),
                     batch_size: int = DEFAULT_BATCH) -> list[list[str]]:
    vocab = weights.config.vocab
    n_new = prompts.answer_length(inputs.layout.template, weights.config.n_classes)
    out: list[list[str]] = []
    for sl in _chunks(inputs.batch_size, batch_size):
        out += [vocab.decode(ids) for ids in generate(weights, inputs.select(np.arange(sl.start, sl.stop)), n_new, specs)]
    return out


def build_inputs(weights: ModelWeights, examples: Sequence[Example], template: str,
                 class_ids: Sequence[int] | None = None) -> ModelInput:
    if class_ids is None:
        class_ids = [e.target_class for e in examples]
    return query_inputs(weights, [e.scene for e in examples], class_ids, template)


def _chunks(n: int, size: int):
    for start in range(0, n, size):
        yield slice(start, min(start + size, n))


def run_generation(weights: ModelWeights, examples: Sequence[Example], template: str, *,
                   edit: InputEdit | None = None, specs: SpecBuilder | None = None,
                   class_ids: Sequence[int] | None = None, batch_size: int = DEFAULT_BATCH,
                   inputs: ModelInput | None = None) -> list[list[str]]:
    """Greedy answers (as token strings) for every example."""
    vocab = weights.config.vocab
    n_new = prompts.answer_length(template, weights.config.n_classes)
    out: list[list[str]] = []
    for sl in _chunks(len(examples), batch_size):
        chunk = examples[sl]
        if inputs is None:
            inp = build_inputs(weights, chunk, template, None if class_ids is None else class_ids[sl])
        else:
            inp = inputs.select(np.arange(sl.start, sl.stop))
        if edit is not None:
            inp = edit(inp, chunk)
        chunk_specs = () if specs is None else specs(inp, chunk)
        for ids in generate(weights, inp, n_new, chunk_specs):
            out.append(vocab.decode(ids))
    return out


@dataclass(frozen=True)
class TaskResult:
    loc_score: float
    cls_acc: float
    boxes: tuple
    ious: tuple[float, ...]
    n: int


def localization(weights: ModelWeights, examples: Sequence[Example], **kw) -> tuple[float, list, list[float]]:
    answers = run_generation(weights, examples, prompts.LOCALIZE, **kw)
    g = weights.config.grid_size
    boxes = [metrics.parse_box_answer(a, g) for a in answers]
    ious = [metrics.iou(b, e.box) if b else 0.0 for b, e in zip(boxes, examples)]
    return metrics.localization_score(boxes, [e.box for e in examples]), boxes, ious


def binary_classification(weights: ModelWeights, examples: Sequence[Example], *, balanced: bool = True,
                          **kw) -> float:
    """Binary yes/no accuracy; ``balanced`` adds one absent-class query per example."""
    answers = run_generation(weights, examples, prompts.CLASSIFY_BINARY, **kw)
    present = [True] * len(examples)
    if balanced:
        c = weights.config.n_classes
        neg = [e.absent_class(c) for e in examples]
        kw = {k: v for k, v in kw.items() if k != "class_ids"}
        answers += run_generation(weights, examples, prompts.CLASSIFY_BINARY, class_ids=neg, **kw)
        present += [False] * len(examples)
    return metrics.binary_accuracy(answers, present)


def list_classification(weights: ModelWeights, examples: Sequence[Example], **kw) -> float:
    answers = run_generation(weights, examples, prompts.CLASSIFY_LIST, **kw)
    names = prompts.class_names(weights.config.n_classes)
    return metrics.classification_score(answers, [names[e.target_class] for e in examples])


def evaluate(weights: ModelWeights, examples: Sequence[Example], *, edit: InputEdit | None = None,
             specs: SpecBuilder | None = None, classification: bool = True,
             batch_size: int = DEFAULT_BATCH) -> TaskResult:
    loc, boxes, ious = localization(weights, examples, edit=edit, specs=specs, batch_size=batch_size)
    cls = binary_classification(weights, examples, edit=edit, specs=specs, batch_size=batch_size) if classification else float("nan")
    return TaskResult(loc, cls, tuple(boxes), tuple(ious), len(examples))


__all__ = [
    "Example", "TaskResult", "binary_classification", "build_inputs", "evaluate", "examples_from_scenes",
    "generate_answers", "list_classification", "localization", "query_inputs", "render", "run_generation",
    "stack_inputs",
]
