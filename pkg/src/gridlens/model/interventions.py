"""Declarative intervention records consumed by :func:`forward`.

Application order inside a forward pass is fixed: embedding replacement,
token shuffle, positional embedding, then per layer attention blocking, head
patching and head zeroing.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

REPLACE_EMBEDDING = "replace_embedding"
SHUFFLE_TOKENS = "shuffle_tokens"
BLOCK_ATTENTION = "block_attention"
PATCH_HEAD_OUTPUT = "patch_head_output"
ZERO_HEAD_OUTPUT = "zero_head_output"
KINDS = (REPLACE_EMBEDDING, SHUFFLE_TOKENS, BLOCK_ATTENTION, PATCH_HEAD_OUTPUT, ZERO_HEAD_OUTPUT)


class InterventionError(ValueError):
    pass


class InterventionConflict(InterventionError):
    pass


@dataclass(frozen=True, eq=False)
class InterventionSpec:
    """One intervention.

    ``cells`` index image cells (0..G*G-1); ``positions`` index the full
    sequence. ``batch`` restricts the intervention to one batch element.
    For block_attention, queries are ``query_positions`` or, when None,
    every position from ``query_start`` on (generated tokens included).
    """

    kind: str
    cells: tuple[int, ...] = ()
    values: np.ndarray | None = None
    permutation: tuple[int, ...] = ()
    layers: tuple[int, ...] = ()
    heads: tuple[int, ...] | None = None
    layer: int = -1
    head: int = -1
    positions: tuple[int, ...] | None = None
    query_positions: tuple[int, ...] | None = None
    query_start: int = 0
    key_positions: tuple[int, ...] = ()
    batch: int | None = None


def replace_embedding(cells: Sequence[int], values: np.ndarray, batch: int | None = None) -> InterventionSpec:
    """Overwrite image-cell embeddings (before positions are added) with ``values``.

    ``values`` is one (d_model,) vector or a (len(cells), d_model) array.
    """
    return InterventionSpec(REPLACE_EMBEDDING, cells=tuple(int(c) for c in cells), values=np.asarray(values, dtype=np.float64), batch=batch)


def shuffle_tokens(cells: Sequence[int], permutation: Sequence[int], batch: int | None = None) -> InterventionSpec:
    """Cell ``cells[i]`` receives the embedding previously at ``cells[permutation[i]]``."""
    if sorted(permutation) != list(range(len(cells))):
        raise InterventionError("permutation must be a permutation of range(len(cells))")
    return InterventionSpec(SHUFFLE_TOKENS, cells=tuple(int(c) for c in cells), permutation=tuple(int(p) for p in permutation), batch=batch)


def block_attention(layers: Sequence[int], key_positions: Sequence[int], *, query_start: int = 0,
                    query_positions: Sequence[int] | None = None, heads: Sequence[int] | None = None,
                    batch: int | None = None) -> InterventionSpec:
    return InterventionSpec(
        BLOCK_ATTENTION, layers=tuple(int(x) for x in layers), key_positions=tuple(int(p) for p in key_positions),
        query_start=int(query_start), query_positions=None if query_positions is None else tuple(int(p) for p in query_positions),
        heads=None if heads is None else tuple(int(h) for h in heads), batch=batch)


def patch_head(layer: int, head: int, positions: Sequence[int], values: np.ndarray, batch: int | None = None) -> InterventionSpec:
    """Write ``values`` ((len(positions), d_model) or (B, len(positions), d_model)) as the head's output."""
    return InterventionSpec(PATCH_HEAD_OUTPUT, layer=int(layer), head=int(head), positions=tuple(int(p) for p in positions),
                            values=np.asarray(values, dtype=np.float64), batch=batch)


def zero_head(layer: int, head: int, positions: Sequence[int] | None = None, batch: int | None = None) -> InterventionSpec:
    return InterventionSpec(ZERO_HEAD_OUTPUT, layer=int(layer), head=int(head),
                            positions=None if positions is None else tuple(int(p) for p in positions), batch=batch)


def validate(specs: Sequence[InterventionSpec], *, n_layers: int, n_heads: int, n_cells: int, d_model: int,
             batch_size: int, seq_len: int) -> None:
    """Bounds and conflict checks; raises before any compute happens."""
    claimed: dict[tuple, str] = {}
    for spec in specs:
        if spec.kind not in KINDS:
            raise InterventionError(f"unknown intervention kind {spec.kind!r}")
        if spec.batch is not None and not 0 <= spec.batch < batch_size:
            raise InterventionError(f"batch index {spec.batch} out of range for batch of {batch_size}")
        if spec.kind in (REPLACE_EMBEDDING, SHUFFLE_TOKENS):
            if any(not 0 <= c < n_cells for c in spec.cells):
                raise InterventionError(f"{spec.kind}: cell index out of range [0, {n_cells})")
            if len(set(spec.cells)) != len(spec.cells):
                raise InterventionError(f"{spec.kind}: duplicate cells")
        if spec.kind == REPLACE_EMBEDDING:
            v = spec.values
            if v is None or not (v.shape == (d_model,) or v.shape == (len(spec.cells), d_model)):
                raise InterventionError(f"replace_embedding: values shape {None if v is None else v.shape} incompatible")
        elif spec.kind == BLOCK_ATTENTION:
            if any(not 0 <= layer < n_layers for layer in spec.layers):
                raise InterventionError(f"block_attention: layer out of range [0, {n_layers})")
            if spec.heads is not None and any(not 0 <= h < n_heads for h in spec.heads):
                raise InterventionError(f"block_attention: head out of range [0, {n_heads})")
        elif spec.kind in (PATCH_HEAD_OUTPUT, ZERO_HEAD_OUTPUT):
            if not (0 <= spec.layer < n_layers and 0 <= spec.head < n_heads):
                raise InterventionError(f"{spec.kind}: (layer {spec.layer}, head {spec.head}) out of bounds")
            positions = range(seq_len) if spec.positions is None else spec.positions
            if spec.kind == PATCH_HEAD_OUTPUT:
                v = spec.values
                ok = v is not None and (v.shape == (len(positions), d_model) or v.shape == (batch_size, len(positions), d_model))
                if not ok:
                    raise InterventionError(f"patch_head_output: values shape {None if v is None else v.shape} incompatible")
                if any(not 0 <= p < seq_len for p in positions):
                    raise InterventionError("patch_head_output: position out of range")
    kinds_at: dict[tuple[int, int], set[str]] = {}
    for spec in specs:
        if spec.kind in (PATCH_HEAD_OUTPUT, ZERO_HEAD_OUTPUT):
            kinds_at.setdefault((spec.layer, spec.head), set()).add(spec.kind)
    for spec in specs:
        if spec.kind not in (PATCH_HEAD_OUTPUT, ZERO_HEAD_OUTPUT) or len(kinds_at[(spec.layer, spec.head)]) < 2:
            continue
        positions = range(seq_len) if spec.positions is None else spec.positions
        batches = range(batch_size) if spec.batch is None else (spec.batch,)
        for b in batches:
            for p in positions:
                key = (b, spec.layer, spec.head, p)
                prev = claimed.get(key)
                if prev is not None and prev != spec.kind:
                    raise InterventionConflict(
                        f"conflicting {prev} and {spec.kind} at layer {spec.layer}, head {spec.head}, position {p}")
                claimed[key] = spec.kind
