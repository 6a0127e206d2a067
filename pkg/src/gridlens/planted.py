"""A transformer whose localization and classification circuit is set by hand.

Residual stream layout (one named direction per feature)::

    CONT_c, BG         visual content, written by the adapter projection
    X, Y, IMG, CIRC    image-cell position features (positional embedding)
    ONE, SINK          constant feature at every position / at position 0
    CLSTOK, TOKCLS_c   class-name token identity (token embedding)
    QUERY_c            queried class, moved to later positions in layer 0
    FOUND_c            mass of matching image content, layer 1
    XMIN..YMAX         extremal coordinates, layer 2
    CX_s, COORD        coordinates moved to answer slots and gated, layer 3
    SLOT_*, EMIT_*, ANCHOR, LISTPOS   answer-role flags (positional embedding)

Circuit:

* layer 0, mover head: every position attends to the class-name token and
  copies its identity into QUERY (list slots attend to the sink instead; the
  list template sets QUERY positionally, one class per slot).
* layer 1, identification head: QUERY matched against image content;
  attention mass on matching cells lands in FOUND.
* layer 2, four coordinate heads: score = beta * FOUND.CONT + tau * pos - beta' * IMG,
  where pos is (G-1) - x, (G-1) - y, x or y. Non-matching cells sit ``margin``
  below the non-image tokens, matching cells ``margin`` above, and among
  matching cells the extremal one wins by a factor exp(tau) per unit.
* layer 3, slot mover head: each coordinate answer slot reads XMIN..YMAX from
  the last prompt position; the MLP keeps only the slot's own coordinate.
* unembedding: logit_k = alpha * (2 k COORD - k^2) peaks at k = COORD;
  formatting tokens, yes/no and the list answer are driven by role flags.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from gridlens import gridworld
from gridlens.model import prompts
from gridlens.model.config import ModelConfig
from gridlens.model.weights import ModelWeights, compute_mean_embedding, zero_weights

BOX_LABELS = ("x_min", "y_min", "x_max", "y_max")
APPROX_TOLERANCE = 1e-6
# Visual noise scale up to which the construction is guaranteed exact on
# filtered scenes (scores move by about beta * noise; tau leaves ample room).
NOISE_BOUND = 0.005

MARGIN = 40.0  # logit gap separating attention targets from everything else
ALPHA = 10.0  # coordinate readout sharpness
EMIT = 40.0  # role-flag logit
GAMMA = 20.0  # yes / class evidence
GATE = 16.0  # MLP slot gate, must exceed the largest coordinate


class ConstructionError(ValueError):
    pass


@dataclass(frozen=True)
class CircuitManifest:
    loc_heads: dict[str, tuple[int, int]]
    cls_head: tuple[int, int]
    aggregation_layer: int
    mover_head: tuple[int, int] = (0, 0)
    slot_mover_head: tuple[int, int] = (3, 0)
    temperature: float = 16.0
    approximation_error: float = 0.0
    construction: dict = field(default_factory=dict)

    def __post_init__(self):
        if set(self.loc_heads) != set(BOX_LABELS):
            raise ConstructionError(f"loc_heads must be labelled {BOX_LABELS}")
        if len(set(self.loc_heads.values())) != 4:
            raise ConstructionError("the four localization heads must be distinct")

    def validate_for(self, config: ModelConfig) -> None:
        for layer, head in list(self.loc_heads.values()) + [self.cls_head, self.mover_head, self.slot_mover_head]:
            if not (0 <= layer < config.n_layers and 0 <= head < config.n_heads):
                raise ConstructionError(f"head ({layer}, {head}) outside a {config.n_layers}x{config.n_heads} model")

    @property
    def loc_head_list(self) -> list[tuple[int, int]]:
        return [self.loc_heads[k] for k in BOX_LABELS]

    def to_json(self) -> str:
        d = asdict(self)
        d["loc_heads"] = {k: list(v) for k, v in self.loc_heads.items()}
        return json.dumps(d, sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "CircuitManifest":
        d = json.loads(text)
        d["loc_heads"] = {k: tuple(v) for k, v in d["loc_heads"].items()}
        for key in ("cls_head", "mover_head", "slot_mover_head"):
            d[key] = tuple(d[key])
        return cls(**d)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "CircuitManifest":
        return cls.from_json(Path(path).read_text())


def extremal_error(temperature: float, grid_size: int) -> float:
    """Worst-case gap between the softmax-weighted and the extremal coordinate.

    The worst case puts one cell on the extremal line and ``grid_size`` cells
    on every other line.
    """
    k = np.arange(1, grid_size)
    w = grid_size * np.exp(-temperature * k)
    return float((k * w).sum() / (1.0 + w.sum()))


def choose_temperature(grid_size: int, tol: float = APPROX_TOLERANCE) -> float:
    """Smallest power of two whose extremal-attention error is below ``tol``."""
    t = 1.0
    while extremal_error(t, grid_size) >= tol:
        t *= 2.0
    return t


class _Dims:
    def __init__(self, d_model: int):
        self.d_model = d_model
        self.names: dict[str, int] = {}

    def add(self, name: str, count: int = 1) -> list[int]:
        start = len(self.names)
        if start + count > self.d_model:
            raise ConstructionError(f"d_model={self.d_model} too small for the planted residual layout")
        idx = list(range(start, start + count))
        for i, j in enumerate(idx):
            self.names[name if count == 1 else f"{name}{i}"] = j
        return idx


def residual_layout(config: ModelConfig) -> dict[str, list[int]]:
    c = config.n_classes
    dims = _Dims(config.d_model)
    groups = {}
    for name, count in (
        ("CONT", c), ("BG", 1), ("X", 1), ("Y", 1), ("IMG", 1), ("CIRC", 4), ("ONE", 1), ("SINK", 1),
        ("CLSTOK", 1), ("TOKCLS", c), ("QUERY", c), ("FOUND", c), ("BOX", 4), ("CX", 4), ("COORD", 1),
        ("SLOT", 4), ("EMIT_OPEN", 1), ("EMIT_COMMA", 1), ("EMIT_CLOSE", 1), ("EMIT_END", 1),
        ("SLOT_BIN", 1), ("SLOT_LIST", 1), ("LISTPOS", 1), ("ANCHOR", 1),
    ):
        groups[name] = dims.add(name, count)
    return groups


def plant_model(config: ModelConfig, class_signatures: np.ndarray | None = None,
                temperature: float | None = None, *, mean_embedding: np.ndarray | None = None
                ) -> tuple[ModelWeights, CircuitManifest]:
    """Build the planted model; layer norm is switched off in the returned config."""
    config = replace(config, layer_norm=False)
    G, C = config.grid_size, config.n_classes
    if config.n_layers < 4:
        raise ConstructionError(f"need at least 4 layers, got {config.n_layers}")
    if config.n_heads < 4:
        raise ConstructionError(f"need at least 4 heads per layer, got {config.n_heads}")
    if config.d_head < C + 2:
        raise ConstructionError(f"d_head={config.d_head} must be at least n_classes + 2 = {C + 2}")
    if config.d_mlp < 4:
        raise ConstructionError(f"d_mlp={config.d_mlp} must be at least 4")
    if class_signatures is None:
        class_signatures = gridworld.class_signatures(C, config.d_vis)
    sigs = np.asarray(class_signatures, dtype=np.float64)
    if sigs.shape != (C, config.d_vis):
        raise ConstructionError(f"class signatures must have shape {(C, config.d_vis)}, got {sigs.shape}")
    if temperature is None:
        temperature = choose_temperature(G)
    if temperature <= 0:
        raise ConstructionError("temperature must be positive")
    tau = float(temperature)

    R = residual_layout(config)
    one = lambda name: R[name][0]  # noqa: E731
    vocab = config.vocab
    dh = config.d_head
    qscale = math.sqrt(dh)  # cancels the 1/sqrt(d_head) in the attention scores
    w = zero_weights(config)

    # adapter: signatures and background onto named content directions
    proj = w["adapter.proj"]
    for c in range(C):
        proj[:, R["CONT"][c]] = sigs[c]
    proj[:, one("BG")] = gridworld.background_vector(C, config.d_vis)

    tok = w["embed.token"]
    for c in range(C):
        t = vocab.class_token(c)
        tok[t, one("CLSTOK")] = 1.0
        tok[t, R["TOKCLS"][c]] = 1.0

    pos = w["embed.pos"]
    pos[:, one("ONE")] = 1.0
    pos[0, one("SINK")] = 1.0
    loc = prompts.layout(prompts.LOCALIZE, G, C)
    for cell in range(G * G):
        x, y = gridworld.cell_xy(cell, G)
        p = loc.image_start + cell
        pos[p, one("X")], pos[p, one("Y")], pos[p, one("IMG")] = x, y, 1.0
        ang_x, ang_y = 2 * math.pi * x / G, 2 * math.pi * y / G
        pos[p, R["CIRC"]] = [math.cos(ang_x), math.sin(ang_x), math.cos(ang_y), math.sin(ang_y)]
    # localization answer: "[ x0 , y0 , x1 , y1 ] <end>"
    lp = [loc.predictor(j) for j in range(prompts.answer_length(prompts.LOCALIZE, C))]
    pos[lp[0], one("EMIT_OPEN")] = 1.0
    pos[lp[0], one("ANCHOR")] = 1.0
    for s, j in enumerate((1, 3, 5, 7)):
        pos[lp[j], R["SLOT"][s]] = 1.0
    for j in (2, 4, 6):
        pos[lp[j], one("EMIT_COMMA")] = 1.0
    pos[lp[8], one("EMIT_CLOSE")] = 1.0
    pos[lp[9], one("EMIT_END")] = 1.0
    binl = prompts.layout(prompts.CLASSIFY_BINARY, G, C)
    pos[binl.predictor(0), one("SLOT_BIN")] = 1.0
    pos[binl.predictor(1), one("EMIT_END")] = 1.0
    lst = prompts.layout(prompts.CLASSIFY_LIST, G, C)
    for c in range(C):
        p = lst.predictor(c)
        pos[p, one("SLOT_LIST")] = 1.0
        pos[p, one("LISTPOS")] = 1.0
        pos[p, R["QUERY"][c]] = 1.0
    pos[lst.predictor(C), one("EMIT_END")] = 1.0
    used = sorted({lp[0], *lp, binl.predictor(0), binl.predictor(1), *(lst.predictor(j) for j in range(C + 1))})
    if len(used) != len(lp) + 2 + C + 1:
        raise ConstructionError("answer positions of different templates overlap")

    def head(layer, h):
        b = f"blocks.{layer}.attn."
        return w[b + "W_Q"][h], w[b + "W_K"][h], w[b + "W_V"][h], w[b + "W_O"][h]

    # layer 0: class-token mover
    Q, K, V, O = head(0, 0)
    Q[one("ONE"), 0] = MARGIN * qscale
    K[one("CLSTOK"), 0] = 1.0
    K[one("SINK"), 0] = 0.5
    Q[one("LISTPOS"), 1] = 2 * MARGIN * qscale
    K[one("SINK"), 1] = 1.0
    for c in range(C):
        V[R["TOKCLS"][c], c] = 1.0
        O[c, R["QUERY"][c]] = 1.0

    # layer 1: identification, queried class against image content
    Q, K, V, O = head(1, 0)
    for c in range(C):
        Q[R["QUERY"][c], c] = MARGIN * qscale
        K[R["CONT"][c], c] = 1.0
        V[R["CONT"][c], c] = 1.0
        O[c, R["FOUND"][c]] = 1.0
    Q[one("ONE"), C] = 0.5 * MARGIN * qscale
    K[one("SINK"), C] = 1.0

    # layer 2: extremal-coordinate heads
    penalty = tau * (G - 1) + MARGIN
    match = penalty + MARGIN
    for s, label in enumerate(BOX_LABELS):
        Q, K, V, O = head(2, s)
        axis = one("X") if label.startswith("x") else one("Y")
        for c in range(C):
            Q[R["FOUND"][c], c] = match * qscale
            K[R["CONT"][c], c] = 1.0
        Q[one("ONE"), C] = tau * qscale
        if label.endswith("min"):
            K[one("IMG"), C] = G - 1.0
            K[axis, C] = -1.0
        else:
            K[axis, C] = 1.0
        Q[one("ONE"), C + 1] = -penalty * qscale
        K[one("IMG"), C + 1] = 1.0
        V[axis, 0] = 1.0
        O[0, R["BOX"][s]] = 1.0

    # layer 3: answer slots read the box from the last prompt position
    Q, K, V, O = head(3, 0)
    for s in range(4):
        Q[R["SLOT"][s], 0] = MARGIN * qscale
        V[R["BOX"][s], s] = 1.0
        O[s, R["CX"][s]] = 1.0
    K[one("ANCHOR"), 0] = 1.0
    agg = 3
    mlp = f"blocks.{agg}.mlp."
    for s in range(4):
        w[mlp + "W_in"][R["CX"][s], s] = 1.0
        w[mlp + "W_in"][R["SLOT"][s], s] = GATE
        w[mlp + "b_in"][s] = -GATE
        w[mlp + "W_out"][s, one("COORD")] = 1.0

    U = w["unembed.W_U"]
    for k in range(G):
        t = vocab.coord(k)
        U[one("COORD"), t] = 2 * ALPHA * k
        for s in range(4):
            U[R["SLOT"][s], t] = EMIT - ALPHA * k * k
    for token, flag in (("[", "EMIT_OPEN"), (",", "EMIT_COMMA"), ("]", "EMIT_CLOSE"), ("<end>", "EMIT_END")):
        U[one(flag), vocab.id(token)] = EMIT
    yes, no = vocab.id("yes"), vocab.id("no")
    U[one("SLOT_BIN"), yes] = EMIT - GAMMA / 2
    U[one("SLOT_BIN"), no] = EMIT
    for c in range(C):
        U[R["FOUND"][c], yes] = GAMMA
        U[R["FOUND"][c], vocab.class_token(c)] = GAMMA
        U[one("SLOT_LIST"), vocab.class_token(c)] = EMIT - GAMMA / 2
    U[one("SLOT_LIST"), vocab.id("<none>")] = EMIT

    if mean_embedding is None:
        mean_embedding = compute_mean_embedding(config, proj)
    weights = ModelWeights.from_numpy(config, w, mean_embedding)
    manifest = CircuitManifest(
        loc_heads={label: (2, s) for s, label in enumerate(BOX_LABELS)},
        cls_head=(1, 0),
        aggregation_layer=agg,
        mover_head=(0, 0),
        slot_mover_head=(3, 0),
        temperature=tau,
        approximation_error=extremal_error(tau, G),
        construction={"margin": MARGIN, "alpha": ALPHA, "emit": EMIT, "gamma": GAMMA, "gate": GATE,
                      "noise_bound": NOISE_BOUND, "residual_dims": len(sum(R.values(), []))},
    )
    manifest.validate_for(config)
    return weights, manifest


from gridlens.training import Hyperparams, TrainingError, TrainingExample, TrainingLog, train_model  # noqa: E402,F401
