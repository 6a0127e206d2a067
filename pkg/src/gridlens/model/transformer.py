"""Hookable decoder transformer over ``[system | image | task | answer]`` sequences."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from gridlens import numerics as nx
from gridlens.gridworld import TokenGrid
from gridlens.model import interventions as iv
from gridlens.model import prompts
from gridlens.model.weights import ModelWeights
from gridlens.numerics import DenseArray


class CapacityError(ValueError):
    pass


class EmptySupportError(ValueError):
    pass


@dataclass
class ModelInput:
    """A batch of same-template sequences.

    ``image_embeddings`` are the projected visual tokens at the LLM input,
    before positional embeddings; ablations and perturbations edit them.
    """

    tokens: np.ndarray  # (B, n) int
    visual: np.ndarray  # (B, G*G, d_vis) raw cell vectors
    image_embeddings: np.ndarray  # (B, G*G, d_model)
    layout: prompts.Layout

    @property
    def batch_size(self) -> int:
        return self.tokens.shape[0]

    @property
    def seq_len(self) -> int:
        return self.tokens.shape[1]

    @property
    def image_slot(self) -> range:
        return range(self.layout.image_start, self.layout.image_stop)

    def with_tokens(self, tokens: np.ndarray) -> "ModelInput":
        return replace(self, tokens=np.asarray(tokens, dtype=np.int64))

    def with_image_embeddings(self, emb: np.ndarray) -> "ModelInput":
        return replace(self, image_embeddings=np.asarray(emb, dtype=np.float64))

    def select(self, idx) -> "ModelInput":
        idx = np.atleast_1d(np.asarray(idx))
        return replace(self, tokens=self.tokens[idx], visual=self.visual[idx], image_embeddings=self.image_embeddings[idx])


@dataclass
class ForwardTrace:
    projected: np.ndarray  # (B, G*G, d) image rows before positions
    embedding: np.ndarray  # (B, n, d) input to block 0
    head_outputs: list[np.ndarray] = field(default_factory=list)  # per layer (B, H, n, d)
    attention: list[np.ndarray] = field(default_factory=list)  # per layer (B, H, n, n)
    resid_post: list[np.ndarray] = field(default_factory=list)  # per layer (B, n, d)
    logits: np.ndarray | None = None


def assemble_input(weights: ModelWeights, token_grid: TokenGrid | Sequence[TokenGrid], template: str,
                   class_id: int | None = None) -> ModelInput:
    """Build ``{System} {Image} {Task}`` for one grid (or a batch sharing a class argument)."""
    cfg = weights.config
    grids = [token_grid] if isinstance(token_grid, TokenGrid) else list(token_grid)
    class_ids = class_id if isinstance(class_id, (list, tuple, np.ndarray)) else [class_id] * len(grids)
    lay = prompts.layout(template, cfg.grid_size, cfg.n_classes)
    if lay.prompt_len > cfg.max_seq:
        raise CapacityError(f"prompt needs {lay.prompt_len} positions, max_seq={cfg.max_seq}")
    vocab = cfg.vocab
    rows = []
    for c in class_ids:
        words = prompts.system_words() + ["<img>"] * cfg.n_image_tokens + prompts.task_words(template, c, cfg.n_classes)
        rows.append(vocab.encode(words))
    visual = np.stack([g.embeddings for g in grids])
    if visual.shape[1] != cfg.n_image_tokens or visual.shape[2] != cfg.d_vis:
        raise ValueError(f"token grid shape {visual.shape[1:]} does not match model ({cfg.n_image_tokens}, {cfg.d_vis})")
    projected = visual @ weights["adapter.proj"].data
    return ModelInput(np.asarray(rows, dtype=np.int64), visual, projected, lay)


def stack_inputs(inputs: Sequence[ModelInput]) -> ModelInput:
    lays = {i.layout for i in inputs}
    if len(lays) != 1:
        raise ValueError("cannot batch inputs with different layouts")
    return ModelInput(
        np.concatenate([i.tokens for i in inputs]),
        np.concatenate([i.visual for i in inputs]),
        np.concatenate([i.image_embeddings for i in inputs]),
        inputs[0].layout,
    )


def _split_heads(x: DenseArray, w: DenseArray, b: int, n: int, h: int, dh: int) -> DenseArray:
    d = w.shape[1]
    flat = nx.reshape(nx.transpose(w, (1, 0, 2)), (d, h * dh))
    return nx.transpose(nx.reshape(x @ flat, (b, n, h, dh)), (0, 2, 1, 3))


def _attention_mask(specs, layer: int, b: int, h: int, n: int) -> np.ndarray:
    causal = np.triu(np.full((n, n), nx.NEG_INF), k=1)
    blocks = [s for s in specs if s.kind == iv.BLOCK_ATTENTION and layer in s.layers]
    if not blocks:
        return causal
    mask = np.broadcast_to(causal, (b, h, n, n)).copy()
    for s in blocks:
        bsel = slice(None) if s.batch is None else slice(s.batch, s.batch + 1)
        hsel = slice(None) if s.heads is None else list(s.heads)
        q = np.arange(s.query_start, n) if s.query_positions is None else np.array([p for p in s.query_positions if p < n], dtype=int)
        k = np.array([p for p in s.key_positions if p < n], dtype=int)
        if q.size == 0 or k.size == 0:
            continue
        sub = mask[bsel][:, hsel] if s.heads is not None else mask[bsel]
        sub[..., q[:, None], k[None, :]] = nx.NEG_INF
        if s.heads is not None:
            mask[bsel, hsel] = sub
        else:
            mask[bsel] = sub
    return mask


def forward(weights: ModelWeights, inputs: ModelInput, interventions: Sequence[iv.InterventionSpec] = (),
            record: bool = False, *, image_embeddings: DenseArray | None = None, project: bool = False,
            record_heads: bool = True):
    """Run the model; returns logits (B, n, V) and, if ``record``, a ForwardTrace.

    ``image_embeddings`` substitutes a (possibly tape-tracked) array for the
    stored projected image tokens. ``project=True`` recomputes them from the
    raw visual vectors inside the graph (used for training). With
    ``record_heads=False`` the trace skips per-head outputs and attention
    (only live heads run), which is much cheaper when only residuals are needed.
    """
    cfg = weights.config
    B, n = inputs.tokens.shape
    H, dh, d = cfg.n_heads, cfg.d_head, cfg.d_model
    if n > cfg.max_seq:
        raise CapacityError(f"sequence of {n} exceeds max_seq={cfg.max_seq}")
    specs = list(interventions)
    iv.validate(specs, n_layers=cfg.n_layers, n_heads=H, n_cells=cfg.n_image_tokens, d_model=d, batch_size=B, seq_len=n)
    lay = inputs.layout

    if image_embeddings is not None:
        img = nx.asarray(image_embeddings)
    elif project:
        img = nx.asarray(inputs.visual) @ weights["adapter.proj"]
    else:
        img = DenseArray(inputs.image_embeddings)

    for s in specs:
        if s.kind != iv.REPLACE_EMBEDDING:
            continue
        values = np.broadcast_to(s.values, (len(s.cells), d))
        full = img.data.copy()
        mask = np.zeros(img.shape, dtype=bool)
        rows = slice(None) if s.batch is None else s.batch
        full[rows, list(s.cells)] = values
        mask[rows, list(s.cells)] = True
        img = nx.where(mask, DenseArray(full), img)
    for s in specs:
        if s.kind != iv.SHUFFLE_TOKENS:
            continue
        src = np.tile(np.arange(cfg.n_image_tokens), (B, 1))
        rows = range(B) if s.batch is None else (s.batch,)
        for r in rows:
            src[r, list(s.cells)] = np.asarray(s.cells)[list(s.permutation)]
        img = nx.index(img, (np.arange(B)[:, None], src))

    tok = nx.gather_rows(weights["embed.token"], inputs.tokens)
    x = nx.concat([tok[:, : lay.image_start], img, tok[:, lay.image_stop:]], axis=1)
    x = x + weights["embed.pos"][:n]

    trace = None
    if record:
        trace = ForwardTrace(projected=np.array(img.data), embedding=np.array(x.data))
        if not record_heads:
            trace.head_outputs = trace.attention = None

    head_specs: dict[int, list] = {}
    for s in specs:
        if s.kind in (iv.PATCH_HEAD_OUTPUT, iv.ZERO_HEAD_OUTPUT):
            head_specs.setdefault(s.layer, []).append(s)

    scale = 1.0 / math.sqrt(dh)
    tape = nx._active_tape()
    # Training needs gradients for every head, so all heads run when weights are on the tape.
    full = (record and record_heads) or (tape is not None and any(v._tape is tape for v in weights.params.values()))
    for layer in range(cfg.n_layers):
        p = f"blocks.{layer}."
        layer_specs = head_specs.get(layer, ())
        if full:
            active = np.arange(H)
        else:
            # A head with zero value or output projection contributes exact zeros.
            active = np.array([h for h in range(H) if _head_is_live(weights, p, h)
                               or any(s.head == h and s.kind == iv.PATCH_HEAD_OUTPUT for s in layer_specs)], dtype=int)
        if active.size:
            x = x + _attention_block(x, weights, p, active, specs, layer, layer_specs, scale, trace, cfg, B, n, d)
        x = x + weights[p + "attn.b_O"]
        h_mid = nx.layer_norm(x, weights[p + "ln2.g"], weights[p + "ln2.b"]) if cfg.layer_norm else x
        hidden = nx.relu(h_mid @ weights[p + "mlp.W_in"] + weights[p + "mlp.b_in"])
        x = x + (hidden @ weights[p + "mlp.W_out"] + weights[p + "mlp.b_out"])
        if trace is not None:
            trace.resid_post.append(np.array(x.data))

    h_out = nx.layer_norm(x, weights["ln_f.g"], weights["ln_f.b"]) if cfg.layer_norm else x
    logits = h_out @ weights["unembed.W_U"] + weights["unembed.b_U"]
    if trace is not None:
        trace.logits = np.array(logits.data)
        return logits, trace
    return logits


def _head_is_live(weights: ModelWeights, prefix: str, h: int) -> bool:
    return bool(np.any(weights[prefix + "attn.W_V"].data[h]) and np.any(weights[prefix + "attn.W_O"].data[h]))


def _attention_block(x, weights, p, active, specs, layer, layer_specs, scale, trace, cfg, B, n, d):
    """Summed output of the ``active`` heads of one layer (interventions applied)."""
    H, dh = cfg.n_heads, cfg.d_head
    h_in = nx.layer_norm(x, weights[p + "ln1.g"], weights[p + "ln1.b"]) if cfg.layer_norm else x
    sub = (lambda w: w) if active.size == H else (lambda w: nx.index(w, active))
    A = active.size
    q = _split_heads(h_in, sub(weights[p + "attn.W_Q"]), B, n, A, dh)
    k = _split_heads(h_in, sub(weights[p + "attn.W_K"]), B, n, A, dh)
    v = _split_heads(h_in, sub(weights[p + "attn.W_V"]), B, n, A, dh)
    scores = nx.mul(q @ nx.transpose(k, (0, 1, 3, 2)), scale)
    mask = _attention_mask(specs, layer, B, H, n)
    if mask.ndim == 4 and A != H:
        mask = mask[:, active]
    scores = scores + DenseArray(mask, copy=False)
    attn = nx.softmax(scores, -1)
    heads = (attn @ v) @ sub(weights[p + "attn.W_O"])  # (B, A, n, d)
    position = {int(h): i for i, h in enumerate(active)}
    local = [replace(s, head=position[s.head]) for s in layer_specs if s.head in position]
    heads = _apply_head_specs(heads, local, B, n, d)
    if trace is not None and trace.head_outputs is not None:
        trace.attention.append(np.array(attn.data))
        trace.head_outputs.append(np.array(heads.data))
    return nx.sum(heads, axis=1)


def _apply_head_specs(heads: DenseArray, specs, B: int, n: int, d: int) -> DenseArray:
    if not specs:
        return heads
    H = heads.shape[1]
    patch_mask = np.zeros(heads.shape, dtype=bool)
    patch_vals = np.zeros(heads.shape)
    zero_mask = np.zeros(heads.shape, dtype=bool)
    for s in specs:
        rows = np.arange(B) if s.batch is None else np.array([s.batch])
        pos = np.arange(n) if s.positions is None else np.array(s.positions, dtype=int)
        if s.kind == iv.PATCH_HEAD_OUTPUT:
            vals = s.values if s.values.ndim == 3 else np.broadcast_to(s.values, (B,) + s.values.shape)
            patch_vals[rows[:, None], s.head, pos[None, :]] = vals[rows]
            patch_mask[rows[:, None], s.head, pos[None, :]] = True
        else:
            zero_mask[rows[:, None], s.head, pos[None, :]] = True
    del H
    if patch_mask.any():
        heads = nx.where(patch_mask, DenseArray(patch_vals, copy=False), heads)
    if zero_mask.any():
        heads = nx.where(zero_mask, DenseArray(np.zeros(heads.shape), copy=False), heads)
    return heads


def generate(weights: ModelWeights, inputs: ModelInput, max_new_tokens: int,
             interventions: Sequence[iv.InterventionSpec] = ()) -> list[list[int]]:
    """Greedy decoding; each row stops at ``<end>`` (kept in the output) or the budget."""
    end = weights.config.vocab.id("<end>")
    pad = weights.config.vocab.id("<pad>")
    cur = inputs
    B = inputs.batch_size
    done = np.zeros(B, dtype=bool)
    out: list[list[int]] = [[] for _ in range(B)]
    budget = min(max_new_tokens, weights.config.max_seq - inputs.seq_len)
    for _ in range(budget):
        logits = forward(weights, cur, interventions).data
        nxt = logits[:, -1].argmax(axis=-1)
        for b in range(B):
            if not done[b]:
                out[b].append(int(nxt[b]))
                done[b] = nxt[b] == end
        if done.all():
            break
        col = np.where(done, pad, nxt)[:, None]
        cur = cur.with_tokens(np.concatenate([cur.tokens, col], axis=1))
    return out


def teacher_forced_nll(weights: ModelWeights, inputs: ModelInput, answers: np.ndarray,
                       interventions: Sequence[iv.InterventionSpec] = (), logits: np.ndarray | None = None) -> np.ndarray:
    """Per-token negative log-likelihood (B, L) of ``answers`` (B, L) given the prompt."""
    answers = np.asarray(answers, dtype=np.int64)
    if answers.ndim == 1:
        answers = np.tile(answers, (inputs.batch_size, 1))
    L = answers.shape[1]
    seq = np.concatenate([inputs.tokens, answers], axis=1)
    if logits is None:
        logits = forward(weights, inputs.with_tokens(seq), interventions).data
    start = inputs.seq_len - 1
    lp = nx.log_softmax(DenseArray(logits[:, start:start + L], copy=False)).data
    return -np.take_along_axis(lp, answers[..., None], axis=-1)[..., 0]


def perplexity_from_nll(nll: np.ndarray, template_mask: Sequence[bool]) -> np.ndarray:
    keep = ~np.asarray(template_mask, dtype=bool)
    if not keep.any():
        raise EmptySupportError("every answer position is masked; perplexity undefined")
    return np.exp(nll[..., keep].mean(axis=-1))


def teacher_forced_perplexity(weights: ModelWeights, inputs: ModelInput, reference_answer: Sequence[int] | np.ndarray,
                              template_mask: Sequence[bool], interventions: Sequence[iv.InterventionSpec] = ()) -> np.ndarray:
    """exp(mean NLL) over unmasked answer positions, one value per batch row."""
    if not (~np.asarray(template_mask, dtype=bool)).any():
        raise EmptySupportError("every answer position is masked; perplexity undefined")
    nll = teacher_forced_nll(weights, inputs, np.asarray(reference_answer), interventions)
    return perplexity_from_nll(nll, template_mask)
