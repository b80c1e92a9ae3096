"""Diffusion core: schedules, DDIM steppers, attention and reference backends."""
from .attention import attention, multi_head_attention
from .backends import (
    ATTENTION_KINDS,
    CaptureRecord,
    Conditioning,
    ConstantDenoiser,
    GaussianScoreDenoiser,
    TinyUNetConfig,
    TinyUNetDenoiser,
    UnknownSiteError,
    cross_attention_capture,
)
from .codec import IdentityCodec, StridedAverageCodec, make_codec
from .schedule import (
    CLEAN_T,
    NoiseSchedule,
    ScheduleError,
    ScheduleSpec,
    ddim_invert,
    ddim_invert_step,
    ddim_sample,
    ddim_step,
    forward_diffuse,
    make_schedule,
    predict_x0,
)
