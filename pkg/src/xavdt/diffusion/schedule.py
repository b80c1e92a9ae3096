"""Noise schedules and the deterministic DDIM update in both directions.

Timesteps use the zero-based convention of common latent-diffusion code:
label ``t`` in ``0..T-1`` has cumulative signal rate
``alpha_bar[t] = prod(alphas[:t+1])``.  The clean state (``alpha_bar == 1``)
is addressed with :data:`CLEAN_T` (``-1``).  A sub-sampled ladder of ``k``
steps uses trailing spacing, so 40 steps over 1000 gives
``24, 49, ..., 999`` and the last label always hits ``T - 1``.

All scheduler arithmetic runs in float64.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

CLEAN_T = -1


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class ScheduleSpec:
    """Serializable description of a beta law.

    ``law`` is one of ``linear``, ``scaled_linear`` or ``explicit``; for
    ``explicit`` the betas are listed in ``betas`` and ``T`` must match.
    ``steps`` is the default number of sub-sampled evaluation steps.
    """

    T: int = 1000
    law: str = "linear"
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    steps: int = 40
    betas: Optional[tuple] = None

    def to_text(self) -> str:
        d = asdict(self)
        if d["betas"] is not None:
            d["betas"] = list(d["betas"])
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_text(cls, text: str) -> "ScheduleSpec":
        d = json.loads(text)
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ScheduleError(f"unknown schedule keys: {sorted(unknown)}")
        if d.get("betas") is not None:
            d["betas"] = tuple(float(b) for b in d["betas"])
        return cls(**d)


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    alphas: np.ndarray = field(repr=False)
    alpha_bars: np.ndarray = field(repr=False)

    def alpha_bar(self, t: int) -> float:
        if t == CLEAN_T:
            return 1.0
        if not 0 <= t < self.T:
            raise ScheduleError(f"timestep {t} outside [{CLEAN_T}, {self.T - 1}]")
        return float(self.alpha_bars[t])

    def timesteps(self, k: int) -> np.ndarray:
        """Ascending trailing-spaced ladder of ``k`` timestep labels."""
        if not 1 <= k <= self.T:
            raise ScheduleError(f"step count {k} must lie in [1, {self.T}]")
        # index-based spacing: a float-step arange can overshoot by one element
        ts = np.round(self.T - np.arange(k) * (self.T / k)).astype(np.int64) - 1
        return ts[::-1].copy()

    def ladder(self, k: int) -> np.ndarray:
        """Timesteps of a k-step chain including the clean start."""
        return np.concatenate([[CLEAN_T], self.timesteps(k)])


def _betas_from_spec(T: int, spec) -> np.ndarray:
    if isinstance(spec, ScheduleSpec):
        if spec.T != T:
            raise ScheduleError(f"spec T={spec.T} disagrees with requested T={T}")
        if spec.law == "linear":
            return np.linspace(spec.beta_start, spec.beta_end, T, dtype=np.float64)
        if spec.law == "scaled_linear":
            return np.linspace(spec.beta_start**0.5, spec.beta_end**0.5, T, dtype=np.float64) ** 2
        if spec.law == "explicit":
            if spec.betas is None:
                raise ScheduleError("explicit law needs a betas list")
            return np.asarray(spec.betas, dtype=np.float64)
        raise ScheduleError(f"unknown beta law {spec.law!r}")
    return np.asarray(spec, dtype=np.float64)


def make_schedule(T: int, beta_spec=None) -> NoiseSchedule:
    """Build a schedule from a :class:`ScheduleSpec` or an explicit beta sequence."""
    if int(T) != T or T < 1:
        raise ScheduleError(f"T must be a positive integer, got {T!r}")
    if beta_spec is None:
        beta_spec = ScheduleSpec(T=T)
    betas = _betas_from_spec(T, beta_spec)
    if betas.shape != (T,):
        raise ScheduleError(f"expected {T} betas, got shape {betas.shape}")
    if not np.all(np.isfinite(betas)) or betas.min() < 0 or betas.max() >= 1:
        raise ScheduleError("betas must lie in [0, 1)")
    if np.any(np.diff(betas) < 0):
        raise ScheduleError("betas must be non-decreasing")
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return NoiseSchedule(T=int(T), alphas=alphas, alpha_bars=alpha_bars)


def _check_same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape {b.shape} does not match {a.shape}")


def forward_diffuse(x0: np.ndarray, t: int, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    _check_same_shape(x0, eps, "noise")
    ab = schedule.alpha_bar(t)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def _x0_from_eps(z: np.ndarray, eps: np.ndarray, ab: float) -> np.ndarray:
    if ab <= 0.0:
        raise ScheduleError("alpha_bar is zero; the schedule is singular at this step")
    return (z - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)


def predict_x0(z_t, t: int, cond, backend, schedule: NoiseSchedule, eps=None) -> np.ndarray:
    z_t = np.asarray(z_t, dtype=np.float64)
    if eps is None:
        eps = backend.predict_eps(z_t, t, cond)
    return _x0_from_eps(z_t, np.asarray(eps, dtype=np.float64), schedule.alpha_bar(t))


def _move(z: np.ndarray, eps: np.ndarray, ab_from: float, ab_to: float) -> np.ndarray:
    x0 = _x0_from_eps(z, eps, ab_from)
    return np.sqrt(ab_to) * x0 + np.sqrt(1.0 - ab_to) * eps


def ddim_step(z_t, t: int, t_prev: int, cond, backend, schedule: NoiseSchedule,
              eps=None, capture: Optional[dict] = None) -> np.ndarray:
    """One deterministic reverse step ``t -> t_prev`` (no stochastic term).

    ``eps`` may be supplied to reuse a frozen noise estimate.
    """
    if not t_prev < t:
        raise ScheduleError(f"reverse step needs t_prev < t, got {t_prev} -> {t}")
    z_t = np.asarray(z_t, dtype=np.float64)
    if eps is None:
        eps = backend.predict_eps(z_t, t, cond, capture=capture)
    eps = np.asarray(eps, dtype=np.float64)
    _check_same_shape(z_t, eps, "noise estimate")
    return _move(z_t, eps, schedule.alpha_bar(t), schedule.alpha_bar(t_prev))


def ddim_invert_step(z_t, t: int, t_next: int, cond, backend, schedule: NoiseSchedule,
                     eps=None, capture: Optional[dict] = None) -> np.ndarray:
    """One inversion step ``t -> t_next``.

    The noise estimate is taken once at the current (less noisy) latent,
    labelled with the destination timestep ``t_next``, which is the label the
    matching reverse step uses.  No fixed-point correction is applied.
    """
    if t_next == t:
        return np.asarray(z_t, dtype=np.float64).copy()
    if not t_next > t:
        raise ScheduleError(f"inversion step needs t_next > t, got {t} -> {t_next}")
    z_t = np.asarray(z_t, dtype=np.float64)
    if eps is None:
        eps = backend.predict_eps(z_t, t_next, cond, capture=capture)
    eps = np.asarray(eps, dtype=np.float64)
    _check_same_shape(z_t, eps, "noise estimate")
    return _move(z_t, eps, schedule.alpha_bar(t), schedule.alpha_bar(t_next))


def ddim_invert(z0, cond, backend, schedule: NoiseSchedule, steps: int,
                on_step: Optional[Callable[[int, dict], None]] = None,
                capture_sites: Sequence[str] = ()) -> np.ndarray:
    """Run the inversion chain clean -> ``T-1`` over a ``steps``-step ladder.

    ``on_step(t_label, captures)`` is called after every denoiser evaluation
    with the per-site capture records of that call.
    """
    z = np.asarray(z0, dtype=np.float64)
    ladder = schedule.ladder(steps)
    for t, t_next in zip(ladder[:-1], ladder[1:]):
        cap = {s: None for s in capture_sites} if capture_sites else None
        z = ddim_invert_step(z, int(t), int(t_next), cond, backend, schedule, capture=cap)
        if on_step is not None:
            on_step(int(t_next), cap or {})
    return z


def ddim_sample(zT, cond, backend, schedule: NoiseSchedule, steps: int) -> np.ndarray:
    """Deterministic reverse chain ``T-1`` -> clean over a ``steps``-step ladder."""
    z = np.asarray(zT, dtype=np.float64)
    ladder = schedule.ladder(steps)
    for t, t_prev in zip(ladder[:0:-1], ladder[-2::-1]):
        z = ddim_step(z, int(t), int(t_prev), cond, backend, schedule)
    return z
