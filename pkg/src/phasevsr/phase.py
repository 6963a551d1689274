"""Cyclic phase code for cine frames.

Systole (ED -> ES) is mapped onto the falling half of a cosine and diastole
(ES -> next ED) onto the rising half, so the code is +1 at end-diastole,
-1 at end-systole and periodic in the cycle length.
"""
from __future__ import annotations

import math
import numbers
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class CardiacCycleSpec:
    ed: int
    es: int
    t_cycle: int

    def __post_init__(self):
        for name in ("ed", "es", "t_cycle"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, numbers.Integral):
                raise ConfigError(f"{name} must be an integer, got {value!r}")
        if self.t_cycle < 2:
            raise ConfigError(f"t_cycle must be >= 2, got {self.t_cycle}")
        if not 0 <= self.ed < self.t_cycle:
            raise ConfigError(f"ed must satisfy 0 <= ed < t_cycle, got ed={self.ed}, t_cycle={self.t_cycle}")
        if not 0 <= self.es < self.t_cycle:
            raise ConfigError(f"es must satisfy 0 <= es < t_cycle, got es={self.es}, t_cycle={self.t_cycle}")
        if self.ed == self.es:
            raise ConfigError(f"ed and es must differ, both are {self.ed}")

    @property
    def systole_length(self) -> int:
        """Frames from ED to ES, measured forward around the cycle."""
        return (self.es - self.ed) % self.t_cycle

    def cycle_offset(self, t: int) -> int:
        """Position of frame ``t`` relative to ED, in ``[0, t_cycle)``."""
        return (int(t) - self.ed) % self.t_cycle


@dataclass(frozen=True)
class PhaseCodeSequence:
    values: tuple
    spec: CardiacCycleSpec
    t_start: int = 0

    def __len__(self):
        return len(self.values)

    def __getitem__(self, i):
        return self.values[i]

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)


def phase_at(t: int, spec: CardiacCycleSpec) -> float:
    if isinstance(t, bool) or not isinstance(t, numbers.Integral):
        raise ConfigError(f"frame index must be an integer, got {t!r}")
    offset = spec.cycle_offset(t)
    systole = spec.systole_length
    if 0 < offset <= systole:
        return math.cos(math.pi * offset / systole)
    # offset == 0 (ED itself) lands at the end of diastole: cos(2*pi) = 1
    diastole = spec.t_cycle - systole
    return math.cos(math.pi * (1.0 + ((offset - systole) % spec.t_cycle) / diastole))


def phase_sequence(spec: CardiacCycleSpec, t_start: int, length: int) -> PhaseCodeSequence:
    if length < 1:
        raise ConfigError(f"length must be >= 1, got {length}")
    values = tuple(phase_at(int(t_start) + i, spec) for i in range(length))
    return PhaseCodeSequence(values=values, spec=spec, t_start=int(t_start))
