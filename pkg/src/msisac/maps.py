"""Delay-Doppler map container shared by the waveform and estimation code."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np


@dataclass(frozen=True)
class ScatteringMap:
    """Sampled delay-Doppler power ``|S(tau, alpha)|^2`` with its axes.

    ``power`` has shape ``(len(delay_axis), len(doppler_axis))``. When the
    complex spreading function is available it is kept in ``complex_values``.
    """

    power: np.ndarray
    delay_axis: np.ndarray
    doppler_axis: np.ndarray
    complex_values: Optional[np.ndarray] = None
    normalization: str = ""

    def __post_init__(self):
        power = np.asarray(self.power, dtype=float)
        delay = np.asarray(self.delay_axis, dtype=float)
        doppler = np.asarray(self.doppler_axis, dtype=float)
        if power.shape != (delay.size, doppler.size):
            raise ValueError(f"power shape {power.shape} does not match axes "
                             f"({delay.size}, {doppler.size})")
        if np.any(power < 0):
            raise ValueError("negative power in map")
        object.__setattr__(self, "power", power)
        object.__setattr__(self, "delay_axis", delay)
        object.__setattr__(self, "doppler_axis", doppler)
        if self.complex_values is not None:
            cv = np.asarray(self.complex_values, dtype=complex)
            if cv.shape != power.shape:
                raise ValueError("complex_values shape mismatch")
            object.__setattr__(self, "complex_values", cv)

    @property
    def shape(self) -> tuple[int, int]:
        return self.power.shape

    def peak(self) -> tuple[float, float, float]:
        i, j = np.unravel_index(np.argmax(self.power), self.power.shape)
        return float(self.delay_axis[i]), float(self.doppler_axis[j]), float(self.power[i, j])
