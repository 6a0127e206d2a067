"""Attention knockout, per-head causal mediation, and cumulative head ablation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from gridlens import gridworld, metrics
from gridlens.evaluation import Example, evaluate, generate_answers, query_inputs
from gridlens.model import interventions as iv
from gridlens.model import prompts
from gridlens.model.transformer import ModelInput, forward, teacher_forced_nll
from gridlens.model.weights import ModelWeights

TASKS = ("localization", "classification_binary")
DEFAULT_FRACTIONS = (0.0, 1 / 64, 2 / 64, 4 / 64, 8 / 64, 16 / 64, 32 / 64)
MIN_GAP = 1e-6
MAX_CMA_BATCH = 64


class ContractError(ValueError):
    pass


class UndefinedMediation(ZeroDivisionError):
    pass


class EmptyInputError(ValueError):
    pass


# --------------------------------------------------------------------------
# knockout


@dataclass(frozen=True)
class KnockoutSpec:
    layer_groups: tuple[tuple[int, ...], ...]
    include_all_layers: bool = True

    @classmethod
    def consecutive(cls, n_layers: int, size: int = 4, include_all_layers: bool = True) -> "KnockoutSpec":
        groups = tuple(tuple(range(s, min(s + size, n_layers))) for s in range(0, n_layers, size))
        return cls(groups, include_all_layers)

    def validate(self, n_layers: int) -> None:
        seen: set[int] = set()
        for g in self.layer_groups:
            if any(not 0 <= layer < n_layers for layer in g):
                raise ContractError(f"layer group {g} outside [0, {n_layers})")
            if seen & set(g):
                raise ContractError("layer groups within one sweep must be disjoint")
            seen |= set(g)

    def groups(self, n_layers: int) -> list[tuple[str, tuple[int, ...]]]:
        out = [(f"layers {g[0]}-{g[-1]}" if g else "none", g) for g in self.layer_groups]
        if self.include_all_layers:
            out.append(("all layers", tuple(range(n_layers))))
        return out


@dataclass
class KnockoutRow:
    group: str
    layers: tuple[int, ...]
    loc_acc: float
    cls_acc: float
    loc_delta: float
    cls_delta: float


def knockout_specs(layers: Sequence[int], inputs: ModelInput, examples: Sequence[Example]) -> list[iv.InterventionSpec]:
    """Block every post-image position from attending to the example's object tokens."""
    if not layers:
        return []
    lay = inputs.layout
    return [iv.block_attention(layers, [lay.image_start + c for c in sorted(e.object_cells)],
                               query_start=lay.image_stop, batch=b) for b, e in enumerate(examples)]


def attention_knockout_sweep(weights: ModelWeights, examples: Sequence[Example], spec: KnockoutSpec | None = None
                             ) -> tuple[float, float, list[KnockoutRow]]:
    """(baseline loc, baseline cls, one row per layer group)."""
    cfg = weights.config
    spec = spec or KnockoutSpec.consecutive(cfg.n_layers)
    spec.validate(cfg.n_layers)
    base = evaluate(weights, examples)
    rows = []
    for name, layers in spec.groups(cfg.n_layers):
        r = evaluate(weights, examples, specs=lambda inp, chunk, layers=layers: knockout_specs(layers, inp, chunk))
        rows.append(KnockoutRow(name, tuple(layers), r.loc_score, r.cls_acc, r.loc_score - base.loc_score,
                                r.cls_acc - base.cls_acc))
    return base.loc_score, base.cls_acc, rows


# --------------------------------------------------------------------------
# mediation


def mediation_fraction(p_base: float, p_src: float, p_patched: float) -> float:
    """(P_base - P_patched) / (P_base - P_src)."""
    if p_base == p_src:
        raise UndefinedMediation("p_base == p_src: mediation fraction undefined")
    return (p_base - p_patched) / (p_base - p_src)


def mediation_fraction_log(log_base: np.ndarray, log_src: np.ndarray, log_patched: np.ndarray) -> np.ndarray:
    """Same ratio computed from log-perplexities, safe when perplexities overflow.

    Dividing numerator and denominator by P_base gives
    (1 - exp(lp - lb)) / (1 - exp(ls - lb)), evaluated with expm1.
    """
    return np.expm1(log_patched - log_base) / np.expm1(log_src - log_base)


@dataclass
class MediationReport:
    task: str
    mf: np.ndarray  # (n_layers, n_heads) mean over kept examples
    per_example: np.ndarray  # (n_kept, n_layers, n_heads)
    p_base: np.ndarray  # per kept example
    p_src: np.ndarray
    n_examples: int
    n_excluded: int
    n_filtered: int  # pairs rejected by the hallucination filter
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if not np.all(np.isfinite(self.mf)):
            raise ContractError("mediation matrix contains non-finite entries")


def _task_template(task: str) -> str:
    if task == "localization":
        return prompts.LOCALIZE
    if task == "classification_binary":
        return prompts.CLASSIFY_BINARY
    raise ContractError(f"task must be one of {TASKS}, got {task!r}")


def _reference(task: str, example: Example) -> list[str]:
    if task == "localization":
        return prompts.box_answer(example.box)
    return prompts.binary_answer(True)


def _log_ppl(weights, full: ModelInput, prompt_len: int, mask: np.ndarray, specs=()) -> np.ndarray:
    prompt = full.with_tokens(full.tokens[:, :prompt_len])
    nll = teacher_forced_nll(weights, prompt, full.tokens[:, prompt_len:], specs)
    return nll[:, ~mask].mean(axis=-1)


def passes_hallucination_filter(weights: ModelWeights, pairs: Sequence[gridworld.ScenePair], task: str) -> list[bool]:
    """Source answered correctly and base incorrectly."""
    template = _task_template(task)
    classes = [p.target_class for p in pairs]
    src = generate_answers(weights, query_inputs(weights, [p.source for p in pairs], classes, template))
    base = generate_answers(weights, query_inputs(weights, [p.base for p in pairs], classes, template))
    if task == "localization":
        g = weights.config.grid_size
        truth = [p.source.find(p.target_class).box for p in pairs]

        def hit(ans, box):
            b = metrics.parse_box_answer(ans, g)
            return bool(b) and metrics.iou(b, box) > 0.5

        return [hit(s, t) and not hit(b, t) for s, b, t in zip(src, base, truth)]
    return [s[:1] == ["yes"] and b[:1] == ["no"] for s, b in zip(src, base)]


def mediation_matrix(weights: ModelWeights, source: ModelInput, base: ModelInput, prompt_len: int,
                     mask: np.ndarray, patch_from: ModelInput | None = None
                     ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-example MF for every head: (mf (B, L, H), log P_src, log P_base).

    ``source`` and ``base`` hold prompt plus reference answer. Head outputs
    are recorded from ``patch_from`` (default: the source run) at every
    prompt position and written into the base run.
    """
    cfg = weights.config
    _, trace = forward(weights, patch_from if patch_from is not None else source, record=True)
    ls = _log_ppl(weights, source, prompt_len, mask)
    lb = _log_ppl(weights, base, prompt_len, mask)
    mf = np.zeros((base.batch_size, cfg.n_layers, cfg.n_heads))
    for layer in range(cfg.n_layers):
        for head in range(cfg.n_heads):
            vals = trace.head_outputs[layer][:, head, :prompt_len]
            spec = iv.patch_head(layer, head, range(prompt_len), vals)
            lp = _log_ppl(weights, base, prompt_len, mask, [spec])
            with np.errstate(divide="ignore", invalid="ignore"):
                mf[:, layer, head] = mediation_fraction_log(lb, ls, lp)
    return mf, ls, lb


def cma_sweep(weights: ModelWeights, pairs: Sequence[gridworld.ScenePair], task: str, n_examples: int = 50,
              *, apply_filter: bool = True) -> MediationReport:
    """Patch each head's clean source outputs at every prompt position into the base run."""
    template = _task_template(task)
    cfg = weights.config
    pairs = list(pairs)
    keep = passes_hallucination_filter(weights, pairs, task) if apply_filter else [True] * len(pairs)
    n_filtered = sum(not k for k in keep)
    pairs = [p for p, k in zip(pairs, keep) if k][:n_examples]
    if not pairs:
        raise EmptyInputError(f"no control pairs pass the hallucination filter for {task}")

    answers = [_reference(task, Example(p.source, p.target_class)) for p in pairs]
    mask = np.array(prompts.template_mask(answers[0]), dtype=bool)
    vocab = cfg.vocab
    ans_ids = np.array([vocab.encode(a) for a in answers], dtype=np.int64)
    classes = [p.target_class for p in pairs]
    src = query_inputs(weights, [p.source for p in pairs], classes, template)
    base = query_inputs(weights, [p.base for p in pairs], classes, template)
    P = src.seq_len
    src_full = src.with_tokens(np.concatenate([src.tokens, ans_ids], axis=1))
    base_full = base.with_tokens(np.concatenate([base.tokens, ans_ids], axis=1))

    log_src, log_base, per_example = [], [], []
    for start in range(0, len(pairs), MAX_CMA_BATCH):
        rows = np.arange(start, min(start + MAX_CMA_BATCH, len(pairs)))
        mf, ls, lb = mediation_matrix(weights, src_full.select(rows), base_full.select(rows), P, mask)
        log_src.append(ls)
        log_base.append(lb)
        per_example.append(mf)
    log_src, log_base = np.concatenate(log_src), np.concatenate(log_base)
    per_example = np.concatenate(per_example)
    # |P_base - P_src| < MIN_GAP, evaluated without overflow
    gap = np.abs(np.exp(np.minimum(log_base, 700.0)) - np.exp(np.minimum(log_src, 700.0)))
    valid = gap >= MIN_GAP
    if not valid.any():
        raise EmptyInputError("every pair has p_base == p_src")
    kept = per_example[valid]
    return MediationReport(
        task=task, mf=kept.mean(axis=0), per_example=kept,
        p_base=np.exp(np.minimum(log_base[valid], 700.0)), p_src=np.exp(np.minimum(log_src[valid], 700.0)),
        n_examples=int(valid.sum()), n_excluded=int((~valid).sum()), n_filtered=n_filtered,
        metadata={"patched_positions": f"0..{P - 1} (every non-generated position)", "template": template,
                  "masked_answer_tokens": list(prompts.TEMPLATE_TOKENS), "source_traces": "clean (no interventions)"},
    )


# --------------------------------------------------------------------------
# ranking and head ablation


@dataclass(frozen=True)
class HeadRanking:
    """Heads by mean MF, descending; ties resolve to the lower (layer, head).

    ``low_importance`` holds heads whose |mean MF| is at most the median
    |mean MF|, least important first: ascending |MF| with ties taken from the
    bottom of the ranking (higher (layer, head) first).
    """

    entries: tuple[tuple[int, int, float], ...]
    low_importance: tuple[tuple[int, int], ...]
    task: str = ""

    @classmethod
    def from_report(cls, report: MediationReport) -> "HeadRanking":
        return cls.from_matrix(report.mf, report.task)

    @classmethod
    def from_matrix(cls, mf: np.ndarray, task: str = "") -> "HeadRanking":
        L, H = mf.shape
        cells = [(layer, head, float(mf[layer, head])) for layer in range(L) for head in range(H)]
        entries = tuple(sorted(cells, key=lambda t: (-t[2], t[0], t[1])))
        mags = np.abs(mf).reshape(-1)
        cut = float(np.percentile(mags, 50))
        low = [(layer, head) for layer, head, v in cells if abs(v) <= cut]
        low.sort(key=lambda lh: (abs(mf[lh]), -lh[0], -lh[1]))
        return cls(entries, tuple(low), task)

    @property
    def task_critical(self) -> tuple[tuple[int, int], ...]:
        return tuple((layer, head) for layer, head, _ in self.entries)

    def top(self, k: int) -> list[tuple[int, int]]:
        return list(self.task_critical[:k])


def normalized_auc(fractions: Sequence[float], values: Sequence[float]) -> float:
    """Trapezoid area under values(fraction) divided by the fraction range."""
    f = np.asarray(fractions, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    span = f[-1] - f[0]
    if span <= 0:
        raise ContractError("need at least two distinct fractions")
    return float(np.sum((f[1:] - f[:-1]) * (v[1:] + v[:-1]) / 2.0) / span)


@dataclass
class AblationCurve:
    group: str
    fractions: tuple[float, ...]
    n_heads: tuple[int, ...]
    loc_acc: tuple[float, ...]
    cls_acc: tuple[float, ...]
    auc: float
    heads: tuple[tuple[int, int], ...]


def zero_head_specs(heads: Sequence[tuple[int, int]]) -> list[iv.InterventionSpec]:
    return [iv.zero_head(layer, head) for layer, head in heads]


def head_ablation_curve(weights: ModelWeights, examples: Sequence[Example], ranking: HeadRanking, group: str,
                        fractions: Sequence[float] = DEFAULT_FRACTIONS, classification: bool = True) -> AblationCurve:
    """Zero the first round(f * total heads) heads of the group, for each fraction f."""
    if any(f < 0 or f > 1 for f in fractions):
        raise ContractError("fractions must lie in [0, 1]")
    if group == "task_critical":
        order = list(ranking.task_critical)
    elif group == "low_importance":
        order = list(ranking.low_importance)
    else:
        raise ContractError(f"group must be task_critical or low_importance, got {group!r}")
    total = weights.config.n_layers * weights.config.n_heads
    counts, locs, clss = [], [], []
    for f in fractions:
        n = int(round(f * total))
        if n > len(order):
            raise ContractError(f"fraction {f} needs {n} heads but the {group} group has {len(order)}")
        specs = zero_head_specs(order[:n])
        r = evaluate(weights, examples, specs=lambda inp, chunk, specs=specs: specs, classification=classification)
        counts.append(n)
        locs.append(r.loc_score)
        clss.append(r.cls_acc)
    return AblationCurve(group, tuple(fractions), tuple(counts), tuple(locs), tuple(clss),
                         normalized_auc(fractions, locs), tuple(order[:max(counts)]))


@dataclass
class CrossTaskResult:
    curve: AblationCurve
    overlap_top10: int
    shared_heads: tuple[tuple[int, int], ...]


def cross_task_ablation(weights: ModelWeights, examples: Sequence[Example], cls_ranking: HeadRanking,
                        loc_ranking: HeadRanking | None = None,
                        fractions: Sequence[float] = DEFAULT_FRACTIONS) -> CrossTaskResult:
    """Localization while ablating classification-critical heads, plus the top-10 overlap count."""
    curve = head_ablation_curve(weights, examples, cls_ranking, "task_critical", fractions)
    shared: tuple = ()
    if loc_ranking is not None:
        shared = tuple(sorted(set(cls_ranking.top(10)) & set(loc_ranking.top(10))))
    return CrossTaskResult(curve, len(shared), shared)
