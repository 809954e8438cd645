from .core import (
    AttentionWeights,
    NoiseSchedule,
    SCENE_CODES,
    SWITCHER_CODES,
    combine_conditioning,
    cross_domain_attention,
    forward_diffuse,
    make_schedule,
    multires_noise,
    positional_encode,
    recover_from_v,
    sinusoidal_embedding,
    softmax_rows,
    v_target,
)
from .toy import (
    ToyDenoiser,
    ToyConfig,
    load_toy_params,
    make_toy_batch,
    save_toy_params,
    toy_denoiser_step,
    train_toy,
)

__all__ = [
    "AttentionWeights",
    "NoiseSchedule",
    "SCENE_CODES",
    "SWITCHER_CODES",
    "combine_conditioning",
    "cross_domain_attention",
    "forward_diffuse",
    "make_schedule",
    "multires_noise",
    "positional_encode",
    "recover_from_v",
    "sinusoidal_embedding",
    "softmax_rows",
    "v_target",
    "ToyDenoiser",
    "ToyConfig",
    "load_toy_params",
    "make_toy_batch",
    "save_toy_params",
    "toy_denoiser_step",
    "train_toy",
]
