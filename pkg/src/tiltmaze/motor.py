"""Servo actuation model and the learned inverse motor map.

The platform is driven by position-mode hobby servos whose settling time is
longer than one control interval, so commanded tilts arrive late. The plant is
modeled as a first-order lag with a slew-rate cap. An order-(1,1) ARX model is
fit per axis from sinusoidal excitation logs and inverted to produce the
command that realizes a desired next platform angle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TWO_PI_F = 2.0 * math.pi


class ArxFitError(RuntimeError):
    """Regressor matrix is rank deficient; coefficients unidentifiable."""


@dataclass(frozen=True)
class ServoParams:
    """First-order servo lag: time constant, tilt limit, slew cap."""

    tau: float = 0.05
    max_tilt: float = 0.15
    rate_limit: float = 4.0

    def __post_init__(self) -> None:
        if self.tau <= 0 or self.rate_limit <= 0 or self.max_tilt <= 0:
            raise ValueError("tau, rate_limit and max_tilt must all be positive")


def servo_step(angles, command, dt: float, servo: ServoParams) -> np.ndarray:
    """Advance the two platform angles one interval toward a command.

    Targets are clamp(command)*max_tilt; motion follows the first-order lag
    1 - exp(-dt/tau), then the per-step change is slew-limited and the result
    clamped to +/- max_tilt.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    angles = np.asarray(angles, dtype=float)
    target = np.clip(np.asarray(command, dtype=float), -1.0, 1.0) * servo.max_tilt
    step = (1.0 - math.exp(-dt / servo.tau)) * (target - angles)
    cap = servo.rate_limit * dt
    step = np.clip(step, -cap, cap)
    return np.clip(angles + step, -servo.max_tilt, servo.max_tilt)


@dataclass(frozen=True)
class ExcitationDataset:
    """Per-tick (angle_k, command_k, angle_{k+1}) triples for both axes."""

    angles: np.ndarray      # (n, 2)
    commands: np.ndarray    # (n, 2)
    next_angles: np.ndarray  # (n, 2)
    dt: float

    def __len__(self) -> int:
        return self.angles.shape[0]

    def save(self, path: str) -> None:
        header = "beta,gamma,ux,uy,beta_next,gamma_next"
        data = np.hstack([self.angles, self.commands, self.next_angles])
        np.savetxt(path, data, delimiter=",", header=header, comments="")

    @classmethod
    def load(cls, path: str, dt: float = 1.0 / 30.0) -> "ExcitationDataset":
        data = np.loadtxt(path, delimiter=",", skiprows=1)
        data = np.atleast_2d(data)
        return cls(angles=data[:, 0:2], commands=data[:, 2:4],
                   next_angles=data[:, 4:6], dt=dt)


def excite_and_collect(servo: ServoParams, amplitudes, frequencies,
                       duration: float, dt: float = 1.0 / 30.0,
                       phases=None) -> ExcitationDataset:
    """Drive each axis with a sum of sinusoid commands and log the response.

    ``amplitudes`` and ``frequencies`` (Hz) are per-sinusoid sequences applied
    to both axes; the second axis runs a quarter-period phase offset so the
    two channels decorrelate. Deterministic for fixed arguments.
    """
    amplitudes = np.atleast_1d(np.asarray(amplitudes, dtype=float))
    frequencies = np.atleast_1d(np.asarray(frequencies, dtype=float))
    if amplitudes.shape != frequencies.shape:
        raise ValueError("amplitudes and frequencies must align")
    nyquist = 0.5 / dt
    if np.any(frequencies >= nyquist):
        raise ValueError(f"excitation frequencies must stay below {nyquist} Hz")
    if phases is None:
        phases = np.zeros_like(amplitudes)
    n = int(round(duration / dt))
    t = np.arange(n) * dt
    ux = np.zeros(n)
    uy = np.zeros(n)
    for a, f, p in zip(amplitudes, frequencies, phases):
        ux += a * np.sin(TWO_PI_F * f * t + p)
        uy += a * np.sin(TWO_PI_F * f * t + p + math.pi / 2)
    commands = np.clip(np.stack([ux, uy], axis=1), -1.0, 1.0)

    angles = np.zeros((n + 1, 2))
    for k in range(n):
        angles[k + 1] = servo_step(angles[k], commands[k], dt, servo)
    return ExcitationDataset(angles=angles[:-1], commands=commands,
                             next_angles=angles[1:], dt=dt)


@dataclass(frozen=True)
class ArxModel:
    """Per-axis beta_{k+1} = a*beta_k + b*u_k (same for gamma)."""

    a: np.ndarray  # (2,)
    b: np.ndarray  # (2,)
    max_tilt: float = 0.15

    def forward(self, angles, command) -> np.ndarray:
        angles = np.asarray(angles, dtype=float)
        command = np.asarray(command, dtype=float)
        return self.a * angles + self.b * command


def fit_arx(dataset: ExcitationDataset, max_tilt: float = 0.15) -> ArxModel:
    """Least-squares fit of the per-axis (a, b) coefficients.

    Raises ArxFitError when the regressor is rank deficient (for example,
    commands that never vary leave b unidentifiable).
    """
    n = len(dataset)
    if n < 10:
        raise ArxFitError(f"need at least 10 samples, got {n}")
    a = np.zeros(2)
    b = np.zeros(2)
    for axis in range(2):
        phi = np.stack([dataset.angles[:, axis], dataset.commands[:, axis]], axis=1)
        y = dataset.next_angles[:, axis]
        # rank check on the scaled regressor: a constant-zero column (or two
        # proportional columns) means the coefficients are not identifiable
        scale = np.linalg.norm(phi, axis=0)
        if np.any(scale < 1e-12):
            raise ArxFitError(f"axis {axis}: regressor column with no excitation")
        if np.linalg.matrix_rank(phi / scale, tol=1e-6) < 2:
            raise ArxFitError(f"axis {axis}: rank-deficient regressor")
        coef, *_ = np.linalg.lstsq(phi, y, rcond=None)
        a[axis], b[axis] = coef
    return ArxModel(a=a, b=b, max_tilt=max_tilt)


def imm_invert(arx: ArxModel, current, desired) -> np.ndarray:
    """Command that drives the ARX plant from ``current`` toward ``desired``.

    Solves u = (desired - a*current)/b per axis and clamps to [-1, 1]. The
    unclamped value is an exact algebraic inverse of ``ArxModel.forward``.
    """
    if np.any(np.asarray(arx.b) == 0.0):
        raise ZeroDivisionError("ARX model has b = 0; inverse undefined")
    current = np.asarray(current, dtype=float)
    desired = np.asarray(desired, dtype=float)
    u = (desired - arx.a * current) / arx.b
    return np.clip(u, -1.0, 1.0)
