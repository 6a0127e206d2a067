from gridlens.model import interventions, prompts
from gridlens.model.config import ConfigError, ModelConfig
from gridlens.model.transformer import (
    CapacityError,
    EmptySupportError,
    ForwardTrace,
    ModelInput,
    assemble_input,
    forward,
    generate,
    stack_inputs,
    teacher_forced_nll,
    teacher_forced_perplexity,
)
from gridlens.model.weights import (
    CheckpointError,
    ModelWeights,
    checkpoint_bytes,
    compute_mean_embedding,
    init_weights,
    load_checkpoint,
    save_checkpoint,
)

__all__ = [
    "CapacityError", "CheckpointError", "ConfigError", "EmptySupportError", "ForwardTrace", "ModelConfig",
    "ModelInput", "ModelWeights", "assemble_input", "checkpoint_bytes", "compute_mean_embedding", "forward",
    "generate", "init_weights", "interventions", "load_checkpoint", "prompts", "save_checkpoint", "stack_inputs",
    "teacher_forced_nll", "teacher_forced_perplexity",
]
