"""Parameter containers and the binary checkpoint format.

Checkpoint layout (little endian)::

    magic  b"GLCK"  | u32 format version
    u32 config length | config JSON (utf-8, sorted keys)
    u32 array count
    per array: u16 name length | name | u8 ndim | u64 * ndim shape | float64 data
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from gridlens import gridworld
from gridlens.model.config import ModelConfig
from gridlens.numerics import DenseArray, GradientTape

MAGIC = b"GLCK"
FORMAT_VERSION = 1
MEAN_CORPUS_SEED = 7
MEAN_CORPUS_SIZE = 1000


class CheckpointError(ValueError):
    pass


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, h, dh, m, v = cfg.d_model, cfg.n_heads, cfg.d_head, cfg.d_mlp, cfg.n_vocab
    shapes = {
        "embed.token": (v, d),
        "embed.pos": (cfg.max_seq, d),
        "adapter.proj": (cfg.d_vis, d),
    }
    for layer in range(cfg.n_layers):
        p = f"blocks.{layer}."
        shapes.update({
            p + "ln1.g": (d,), p + "ln1.b": (d,),
            p + "attn.W_Q": (h, d, dh), p + "attn.W_K": (h, d, dh), p + "attn.W_V": (h, d, dh),
            p + "attn.W_O": (h, dh, d), p + "attn.b_O": (d,),
            p + "ln2.g": (d,), p + "ln2.b": (d,),
            p + "mlp.W_in": (d, m), p + "mlp.b_in": (m,),
            p + "mlp.W_out": (m, d), p + "mlp.b_out": (d,),
        })
    shapes.update({"ln_f.g": (d,), "ln_f.b": (d,), "unembed.W_U": (d, v), "unembed.b_U": (v,)})
    return shapes


@dataclass(frozen=True)
class VisualAdapter:
    projection: np.ndarray  # (d_vis, d_model)
    mean_embedding: np.ndarray  # (d_model,)
    corpus_seed: int = MEAN_CORPUS_SEED
    corpus_size: int = MEAN_CORPUS_SIZE


@dataclass
class ModelWeights:
    config: ModelConfig
    params: dict[str, DenseArray]
    mean_embedding: np.ndarray

    def __post_init__(self):
        shapes = param_shapes(self.config)
        if set(shapes) != set(self.params):
            missing = set(shapes) - set(self.params)
            extra = set(self.params) - set(shapes)
            raise CheckpointError(f"parameter set mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
        for name, shape in shapes.items():
            arr = self.params[name]
            if arr.shape != shape:
                raise CheckpointError(f"{name}: expected shape {shape}, got {arr.shape}")
            if not np.all(np.isfinite(arr.data)):
                raise CheckpointError(f"{name}: non-finite values")

    def __getitem__(self, name: str) -> DenseArray:
        return self.params[name]

    @property
    def adapter(self) -> VisualAdapter:
        return VisualAdapter(self.params["adapter.proj"].data, self.mean_embedding)

    def numpy(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def tracked(self, tape: GradientTape) -> "ModelWeights":
        """Copy whose parameters are watched inputs of ``tape`` (keyed by name)."""
        out = object.__new__(ModelWeights)
        out.config = self.config
        out.params = {k: tape.watch(v, key=k) for k, v in self.params.items()}
        out.mean_embedding = self.mean_embedding
        return out

    @classmethod
    def from_numpy(cls, config: ModelConfig, arrays: dict[str, np.ndarray], mean_embedding=None) -> "ModelWeights":
        params = {k: DenseArray(v) for k, v in arrays.items()}
        if mean_embedding is None:
            mean_embedding = compute_mean_embedding(config, params["adapter.proj"].data)
        return cls(config, params, np.asarray(mean_embedding, dtype=np.float64))


def zero_weights(cfg: ModelConfig) -> dict[str, np.ndarray]:
    arrays = {k: np.zeros(s) for k, s in param_shapes(cfg).items()}
    for k in arrays:
        if k.endswith(".g"):
            arrays[k][:] = 1.0
    return arrays


def init_weights(cfg: ModelConfig, seed: int, scale: float = 0.02) -> ModelWeights:
    rng = np.random.default_rng(seed)
    arrays = zero_weights(cfg)
    for name in sorted(arrays):
        if name.endswith((".g", ".b", "b_O", "b_in", "b_out", "b_U")):
            continue
        arrays[name] = rng.normal(scale=scale, size=arrays[name].shape)
    return ModelWeights.from_numpy(cfg, arrays)


def compute_mean_embedding(cfg: ModelConfig, projection: np.ndarray, *, seed: int = MEAN_CORPUS_SEED,
                           n_scenes: int = MEAN_CORPUS_SIZE) -> np.ndarray:
    """Average projected visual token over a seeded reference corpus."""
    params = gridworld.SceneParams(grid_size=cfg.grid_size, n_classes=cfg.n_classes, d_vis=cfg.d_vis)
    total = np.zeros(cfg.d_vis)
    count = 0
    for scene in gridworld.generate_scenes(n_scenes, seed, params):
        grid = gridworld.render_tokens(scene, n_classes=cfg.n_classes, d_vis=cfg.d_vis)
        total += grid.embeddings.sum(axis=0)
        count += grid.embeddings.shape[0]
    # Projection is linear, so projecting the mean equals averaging projections.
    return (total / count) @ projection


# --------------------------------------------------------------------------
# checkpoint IO


def save_checkpoint(weights: ModelWeights, path: str | Path) -> None:
    Path(path).write_bytes(checkpoint_bytes(weights))


def checkpoint_bytes(weights: ModelWeights) -> bytes:
    cfg = json.dumps(weights.config.to_dict(), sort_keys=True).encode()
    arrays = dict(weights.numpy())
    arrays["adapter.mean"] = weights.mean_embedding
    chunks = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<I", len(cfg)), cfg,
              struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        raw = name.encode()
        chunks += [struct.pack("<H", len(raw)), raw, struct.pack("<B", arr.ndim),
                   struct.pack(f"<{arr.ndim}Q", *arr.shape), arr.tobytes()]
    return b"".join(chunks)


def load_checkpoint(path: str | Path) -> ModelWeights:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    off = 4
    (version,) = struct.unpack_from("<I", buf, off)
    off += 4
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (n,) = struct.unpack_from("<I", buf, off)
    off += 4
    config = ModelConfig.from_dict(json.loads(buf[off:off + n]))
    off += n
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    arrays = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + ln].decode()
        off += ln
        (ndim,) = struct.unpack_from("<B", buf, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}Q", buf, off)
        off += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64)
        off += 8 * size
    if off != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - off} trailing bytes")
    mean = arrays.pop("adapter.mean")
    return ModelWeights.from_numpy(config, arrays, mean)
