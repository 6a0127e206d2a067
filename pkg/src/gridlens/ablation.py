"""Visual-token ablation, integrated-gradients selection, containerization and shuffling."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from gridlens import gridworld, metrics
from gridlens import numerics as nx
from gridlens.evaluation import Example, build_inputs, evaluate, localization
from gridlens.model import prompts
from gridlens.model.transformer import ModelInput, forward
from gridlens.model.weights import ModelWeights
from gridlens.numerics import DenseArray, GradientTape

OBJECTIVES = ("class_logit", "box_coordinates")
DEFAULT_IG_STEPS = 32


class ContractError(ValueError):
    pass


@dataclass(frozen=True)
class AblationPlan:
    strategy: str  # object | random | integrated_gradients | register
    padding: int = 0
    k: int | None = None
    seed: int = 0
    objective: str = "box_coordinates"
    ig_steps: int = DEFAULT_IG_STEPS
    replacement: str = "mean_embedding"

    def __post_init__(self):
        if self.strategy not in ("object", "random", "integrated_gradients", "register"):
            raise ContractError(f"unknown ablation strategy {self.strategy!r}")
        if self.strategy == "object" and self.padding not in (-2, -1, 0, 1, 2):
            raise ContractError(f"padding must be one of -2..2, got {self.padding}")
        if self.k is not None and self.k < 0:
            raise ContractError("k must be non-negative")

    @property
    def label(self) -> str:
        if self.strategy == "object":
            return f"object(p={self.padding:+d})" if self.padding else "object(p=0)"
        if self.strategy == "random":
            return f"random(seed={self.seed})"
        if self.strategy == "integrated_gradients":
            return f"ig({self.objective})"
        return "register"


@dataclass(frozen=True)
class Selection:
    cells: frozenset[int]
    n_image_tokens: int
    flagged_empty: bool = False
    object_overlap: int | None = None

    @property
    def tokens_pct(self) -> float:
        return 100.0 * len(self.cells) / self.n_image_tokens


# --------------------------------------------------------------------------
# selection strategies


def select_object_tokens(scene: gridworld.Scene, target_class: int, padding: int) -> Selection:
    obj_cells = frozenset(scene.find(target_class).cells(scene.grid_size))
    cells = gridworld.mask_to_tokens(obj_cells, padding, scene.grid_size)
    return Selection(cells, scene.grid_size ** 2, flagged_empty=not cells, object_overlap=len(cells & obj_cells))


def select_random_tokens(n_image_tokens: int, k: int, seed: int, object_cells: frozenset[int] = frozenset()) -> Selection:
    if not 0 <= k <= n_image_tokens:
        raise ContractError(f"k={k} outside [0, {n_image_tokens}]")
    rng = np.random.default_rng(seed)
    cells = frozenset(int(c) for c in rng.choice(n_image_tokens, size=k, replace=False))
    return Selection(cells, n_image_tokens, flagged_empty=not cells, object_overlap=len(cells & object_cells))


def select_register_tokens(token_embeddings: np.ndarray) -> frozenset[int]:
    """Tokens whose norm exceeds mean + 2 std (population) of the image-token norms."""
    emb = np.asarray(token_embeddings, dtype=np.float64)
    if emb.shape[0] < 2:
        raise ContractError("need at least two image tokens")
    norms = np.linalg.norm(emb, axis=-1)
    thresh = norms.mean() + 2.0 * norms.std()
    return frozenset(int(i) for i in np.flatnonzero(norms > thresh))


def top_k_cells(scores: np.ndarray, k: int) -> frozenset[int]:
    """The k largest scores; equal scores resolve to the lowest cell index."""
    order = np.lexsort((np.arange(len(scores)), -np.asarray(scores)))
    return frozenset(int(i) for i in order[:k])


# --------------------------------------------------------------------------
# integrated gradients


@dataclass(frozen=True)
class IGResult:
    attributions: np.ndarray  # same shape as the input
    value: float  # F(input)
    baseline_value: float  # F(baseline)
    steps: int

    @property
    def total(self) -> float:
        return float(self.attributions.sum())

    @property
    def completeness_residual(self) -> float:
        """|sum(attr) - (F(x) - F(x'))| relative to |F(x) - F(x')|."""
        gap = self.value - self.baseline_value
        err = abs(self.total - gap)
        return err / abs(gap) if gap != 0 else err


def integrated_gradients(fn: Callable[[DenseArray], DenseArray], x: np.ndarray, baseline: np.ndarray,
                         steps: int = DEFAULT_IG_STEPS, chunk: int | None = None) -> IGResult:
    """Midpoint Riemann sum of the path integral from ``baseline`` to ``x``.

    ``fn`` maps a stack of points (m, *x.shape) to m scalar values.
    """
    if steps < 1:
        raise ContractError("ig steps must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    baseline = np.asarray(baseline, dtype=np.float64)
    if x.shape != baseline.shape:
        raise ContractError(f"input {x.shape} and baseline {baseline.shape} differ in shape")
    alphas = (np.arange(steps) + 0.5) / steps
    chunk = chunk or steps
    grad_sum = np.zeros_like(x)
    for start in range(0, steps, chunk):
        a = alphas[start:start + chunk]
        pts = baseline[None] + a.reshape((-1,) + (1,) * x.ndim) * (x - baseline)[None]
        with GradientTape() as tape:
            p = tape.watch(DenseArray(pts), key="points")
            out = fn(p)
            if out.shape != (len(a),):
                raise ContractError(f"objective must return one value per point, got shape {out.shape}")
            total = nx.sum(out)
        grad_sum += nx.backward(tape, total)["points"].data.sum(axis=0)
    ends = fn(DenseArray(np.stack([x, baseline]))).data
    return IGResult((x - baseline) * grad_sum / steps, float(ends[0]), float(ends[1]), steps)


def ig_objective(weights: ModelWeights, example: Example, objective: str) -> tuple[ModelInput, Callable]:
    """Input (prompt plus teacher-forced answer) and F(points) for one example."""
    cfg = weights.config
    vocab = cfg.vocab
    if objective == "class_logit":
        template, answer = prompts.CLASSIFY_BINARY, prompts.binary_answer(True)
        picks = [(0, vocab.id("yes"))]
    elif objective == "box_coordinates":
        template, answer = prompts.LOCALIZE, prompts.box_answer(example.box)
        picks = [(j, vocab.coord(example.box[s])) for s, j in enumerate((1, 3, 5, 7))]
    else:
        raise ContractError(f"objective must be one of {OBJECTIVES}, got {objective!r}")
    inp = build_inputs(weights, [example], template)
    inp = inp.with_tokens(np.concatenate([inp.tokens, [vocab.encode(answer)]], axis=1))
    lay = inp.layout

    def fn(points: DenseArray) -> DenseArray:
        m = points.shape[0]
        rep = inp.select(np.zeros(m, dtype=int))
        logits = forward(weights, rep, image_embeddings=points)
        vals = [logits[:, lay.predictor(j), tok] for j, tok in picks]
        total = vals[0]
        for v in vals[1:]:
            total = total + v
        return total

    return inp, fn


def select_ig_tokens(weights: ModelWeights, example: Example, objective: str, k: int,
                     ig_steps: int = DEFAULT_IG_STEPS) -> tuple[frozenset[int], IGResult]:
    """Top-k image tokens by L2 norm of their IG attribution (baseline: all-mean image)."""
    if k < 1:
        raise ContractError("k must be >= 1")
    inp, fn = ig_objective(weights, example, objective)
    x = inp.image_embeddings[0]
    baseline = np.broadcast_to(weights.mean_embedding, x.shape)
    res = integrated_gradients(fn, x, baseline, ig_steps)
    scores = np.linalg.norm(res.attributions, axis=-1)
    return top_k_cells(scores, k), res


# --------------------------------------------------------------------------
# input edits


def apply_ablation(inputs: ModelInput, cells, mean_embedding: np.ndarray, row: int | None = None) -> ModelInput:
    """Replace image tokens ``cells`` (all rows, or one ``row``) with the mean embedding."""
    cells = sorted(int(c) for c in cells)
    if not cells:
        return inputs
    n_img = inputs.image_embeddings.shape[1]
    if cells[0] < 0 or cells[-1] >= n_img:
        raise ContractError(f"cells must lie in [0, {n_img})")
    emb = inputs.image_embeddings.copy()
    rows = slice(None) if row is None else row
    emb[rows, cells] = mean_embedding
    return inputs.with_image_embeddings(emb)


def ablate_rows(inputs: ModelInput, cell_sets: Sequence, mean_embedding: np.ndarray) -> ModelInput:
    emb = inputs.image_embeddings.copy()
    for r, cells in enumerate(cell_sets):
        cells = sorted(cells)
        if cells:
            emb[r, cells] = mean_embedding
    return inputs.with_image_embeddings(emb)


def permute_rows(inputs: ModelInput, cell_sets: Sequence, rngs: Sequence[np.random.Generator]) -> ModelInput:
    """Shuffle embeddings among each row's cells."""
    emb = inputs.image_embeddings.copy()
    for r, (cells, rng) in enumerate(zip(cell_sets, rngs)):
        cells = np.array(sorted(cells), dtype=int)
        if cells.size > 1:
            emb[r, cells] = inputs.image_embeddings[r, cells[rng.permutation(cells.size)]]
    return inputs.with_image_embeddings(emb)


# --------------------------------------------------------------------------
# experiments


@dataclass
class AblationRow:
    strategy: str
    tokens_pct: float
    loc_acc: float
    cls_acc: float
    delta_vs_baseline: float
    std: float
    cls_delta_vs_baseline: float
    cls_std: float
    n_flagged_empty: int = 0
    mean_object_overlap: float = 0.0
    ig_residual_max: float | None = None

    CSV_COLUMNS = ("strategy", "tokens_pct", "loc_acc", "cls_acc", "delta_vs_baseline", "std",
                   "cls_delta_vs_baseline", "cls_std")


@dataclass
class AblationTable:
    baseline_loc: float
    baseline_cls: float
    rows: list[AblationRow] = field(default_factory=list)
    n_examples: int = 0
    seeds: tuple[int, ...] = ()

    def row(self, strategy: str) -> AblationRow:
        for r in self.rows:
            if r.strategy == strategy:
                return r
        raise KeyError(strategy)


def _evaluate_selection(weights, examples, selections):
    mean = weights.mean_embedding
    index = {id(e): i for i, e in enumerate(examples)}

    def edit(inp, chunk):
        return ablate_rows(inp, [selections[index[id(e)]].cells for e in chunk], mean)

    return evaluate(weights, examples, edit=edit)


def ablation_table(weights: ModelWeights, examples: Sequence[Example], *, paddings=(-2, -1, 0, 1, 2),
                   random_seeds=(0, 1, 2), ig_objective_name: str | None = "box_coordinates",
                   ig_steps: int = DEFAULT_IG_STEPS, include_register: bool = True) -> AblationTable:
    """Per-strategy ablation accuracies; random and IG budgets match the p=0 object mask per example."""
    examples = list(examples)
    base = evaluate(weights, examples)
    table = AblationTable(base.loc_score, base.cls_acc, n_examples=len(examples), seeds=tuple(random_seeds))
    n_img = weights.config.n_image_tokens

    def add(label, selections, runs, extra=None):
        locs = np.array([r.loc_score for r in runs])
        clss = np.array([r.cls_acc for r in runs])
        pct = float(np.mean([s.tokens_pct for s in selections]))
        overlap = [s.object_overlap for s in selections if s.object_overlap is not None]
        row = AblationRow(label, pct, float(locs.mean()), float(clss.mean()), float(locs.mean() - base.loc_score),
                          float(locs.std()), float(clss.mean() - base.cls_acc), float(clss.std()),
                          sum(s.flagged_empty for s in selections), float(np.mean(overlap)) if overlap else 0.0)
        if extra:
            for k, v in extra.items():
                setattr(row, k, v)
        table.rows.append(row)

    budgets = [len(e.object_cells) for e in examples]
    for p in paddings:
        sel = [select_object_tokens(e.scene, e.target_class, p) for e in examples]
        add(AblationPlan("object", padding=p).label, sel, [_evaluate_selection(weights, examples, sel)])

    runs, all_sel = [], []
    for seed in random_seeds:
        sel = [select_random_tokens(n_img, k, _derive_seed(seed, i), e.object_cells)
               for i, (e, k) in enumerate(zip(examples, budgets))]
        all_sel += sel
        runs.append(_evaluate_selection(weights, examples, sel))
    if random_seeds:
        add("random", all_sel, runs)

    if ig_objective_name is not None:
        sel, resid = [], []
        for e, k in zip(examples, budgets):
            cells, res = select_ig_tokens(weights, e, ig_objective_name, k, ig_steps)
            sel.append(Selection(cells, n_img, object_overlap=len(cells & e.object_cells)))
            resid.append(res.completeness_residual)
        add(f"integrated_gradients({ig_objective_name})", sel, [_evaluate_selection(weights, examples, sel)],
            {"ig_residual_max": float(max(resid))})

    if include_register:
        sel = []
        for e in examples:
            inp = build_inputs(weights, [e], prompts.LOCALIZE)
            cells = select_register_tokens(inp.image_embeddings[0])
            sel.append(Selection(cells, n_img, flagged_empty=not cells, object_overlap=len(cells & e.object_cells)))
        add("register", sel, [_evaluate_selection(weights, examples, sel)])
    return table


def _derive_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def expand_box(box, amount: int) -> tuple[int, int, int, int]:
    x0, y0, x1, y1 = box
    return (x0 - amount, y0 - amount, x1 + amount, y1 + amount)


def box_fits(box, grid_size: int) -> bool:
    return min(box) >= 0 and max(box[2], box[3]) < grid_size


@dataclass
class ContainerizationResult:
    paddings: tuple[int, ...]
    scalings: tuple[int, ...]
    mean: np.ndarray  # (len(paddings), len(scalings))
    std: np.ndarray
    seeds: tuple[int, ...]
    n_used: int
    n_skipped: int


def containerize(inputs: ModelInput, examples: Sequence[Example], padding: int, seed: int) -> ModelInput:
    """Copy random object-cell embeddings into the ring added by dilating the object by ``padding``."""
    emb = inputs.image_embeddings.copy()
    g = examples[0].scene.grid_size if examples else 0
    for r, e in enumerate(examples):
        if padding == 0:
            continue
        obj = sorted(e.object_cells)
        ring = sorted(gridworld.mask_to_tokens(e.object_cells, padding, g) - e.object_cells)
        rng = np.random.default_rng([seed, padding, r])
        src = rng.choice(obj, size=len(ring), replace=True)
        emb[r, ring] = inputs.image_embeddings[r, src]
    return inputs.with_image_embeddings(emb)


def containerization_sweep(weights: ModelWeights, examples: Sequence[Example], paddings=(0, 1, 2),
                           scalings=(0, 1, 2), seeds: Sequence[int] = tuple(range(10))) -> ContainerizationResult:
    """Localization of containerized inputs scored against ground truth dilated by each scaling."""
    g = weights.config.grid_size
    reach = max(max(paddings), max(scalings))
    used = [e for e in examples if box_fits(expand_box(e.box, reach), g)]
    skipped = len(examples) - len(used)
    if not used:
        raise ContractError("every example touches the border at the requested padding")
    scores = np.zeros((len(seeds), len(paddings), len(scalings)))
    base_inputs = build_inputs(weights, used, prompts.LOCALIZE)
    for si, seed in enumerate(seeds):
        for pi, p in enumerate(paddings):
            _, boxes, _ = localization(weights, used, inputs=containerize(base_inputs, used, p, seed))
            for ci, s in enumerate(scalings):
                truth = [expand_box(e.box, s) for e in used]
                scores[si, pi, ci] = metrics.localization_score(boxes, truth)
    return ContainerizationResult(tuple(paddings), tuple(scalings), scores.mean(axis=0), scores.std(axis=0),
                                  tuple(seeds), len(used), skipped)


@dataclass
class ShuffleResult:
    mode: str
    loc_mean: float
    loc_std: float
    cls_mean: float
    cls_std: float
    baseline_loc: float
    baseline_cls: float
    seeds: tuple[int, ...]


def shuffle_experiment(weights: ModelWeights, examples: Sequence[Example], mode: str,
                       seeds: Sequence[int] = (0, 1, 2), identity: bool = False) -> ShuffleResult:
    """Permute image embeddings at the model input: among all cells (full) or the object's cells (object)."""
    if mode not in ("full", "object"):
        raise ContractError(f"shuffle mode must be 'full' or 'object', got {mode!r}")
    examples = list(examples)
    n_img = weights.config.n_image_tokens
    base = evaluate(weights, examples)
    index = {id(e): i for i, e in enumerate(examples)}
    locs, clss = [], []
    for seed in seeds:
        def edit(inp, chunk, seed=seed):
            if identity:
                return inp
            sets = [range(n_img) if mode == "full" else e.object_cells for e in chunk]
            rngs = [np.random.default_rng([seed, index[id(e)]]) for e in chunk]
            return permute_rows(inp, sets, rngs)

        r = evaluate(weights, examples, edit=edit)
        locs.append(r.loc_score)
        clss.append(r.cls_acc)
    return ShuffleResult(mode, float(np.mean(locs)), float(np.std(locs)), float(np.mean(clss)), float(np.std(clss)),
                         base.loc_score, base.cls_acc, tuple(seeds))
