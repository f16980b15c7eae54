"""Monte Carlo model of multi-domain ferroelectric switching in a FeFET.

The ferroelectric film is an ensemble of independent domains. Each domain
carries an activation field, a binary polarization and a switching history
that accumulates ``dt / tau`` while the applied field opposes its state. A
domain flips within a step with probability ``1 - exp(h0**beta - h1**beta)``.
The film polarization shifts the transistor threshold voltage, which sets the
channel conductance read in the linear region.

All default constants below are calibration values chosen to reproduce the
qualitative shape of measured conductance-vs-programming-voltage curves. They
are not measured device parameters.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

#: Domains per square micrometre; 1 um x 1 um holds ~5000 domains.
DOMAIN_DENSITY = 5000.0

#: Linear-region transistor constants (volts, volts, microsiemens per volt per W/L).
VTH0 = 1.3
DELTA_VTH_MAX = 1.2
K_PRIME = 30.0


def _seed_sequence(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(seed)


@dataclass(frozen=True)
class DeviceGeometry:
    """Gate dimensions in micrometres and the number of FE domains.

    Use :meth:`from_area` to derive ``n_domains`` from the areal density.
    """

    width: float
    length: float
    n_domains: int

    def __post_init__(self):
        if not self.width > 0 or not self.length > 0:
            raise ValueError("width and length must be positive")
        if int(self.n_domains) != self.n_domains or self.n_domains < 1:
            raise ValueError(f"n_domains must be a positive integer, got {self.n_domains}")

    @classmethod
    def from_area(cls, width: float, length: float, density: float = DOMAIN_DENSITY):
        return cls(width, length, max(1, int(round(density * width * length))))

    @property
    def aspect(self) -> float:
        return self.width / self.length

    @property
    def label(self) -> str:
        return f"{self.width:g}um/{self.length:g}um"


@dataclass(frozen=True)
class SimParams:
    """Switching-kinetics parameters.

    ``dt`` is the largest allowed integration step; a pulse is split into
    ``max(waveform.n_steps, ceil(width / dt))`` steps.
    """

    beta: float = 2.0
    tau0: float = 1e-10
    nls_exponent: float = 2.0
    fe_thickness: float = 8.0  # nm
    ea_mean: float = 11.4  # MV/cm
    ea_std: float = 1.6  # MV/cm
    dt: float = 1e-3
    vth0: float = VTH0
    delta_vth_max: float = DELTA_VTH_MAX
    k_prime: float = K_PRIME

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.tau0 <= 0:
            raise ValueError("tau0 must be positive")
        if self.fe_thickness <= 0:
            raise ValueError("fe_thickness must be positive")
        if self.ea_std < 0:
            raise ValueError("ea_std must be non-negative")
        if self.dt <= 0:
            raise ValueError("dt must be positive")


@dataclass(frozen=True)
class PulseWaveform:
    """Rectangular gate pulse: amplitude in volts, width in seconds."""

    amplitude: float
    width: float
    n_steps: int = 4

    def __post_init__(self):
        if self.width <= 0:
            raise ValueError("pulse width must be positive")
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")


@dataclass(frozen=True)
class PulseScheme:
    """Reset / program / read protocol for one conductance sweep."""

    reset: PulseWaveform = field(default_factory=lambda: PulseWaveform(-4.0, 1e-2, 4))
    program_start: float = 2.0
    program_stop: float = 4.0
    program_step: float = 0.02
    program_width: float = 1e-6
    program_steps: int = 4
    read_voltage: float = 1.2
    drain_read: float = 0.05
    drain_program: float = 0.0

    def __post_init__(self):
        if self.program_stop < self.program_start:
            raise ValueError("program_stop must not be below program_start")
        if self.program_step <= 0:
            raise ValueError("program_step must be positive")
        if self.reset.amplitude >= 0:
            raise ValueError("reset amplitude must be negative")

    def program_voltages(self) -> np.ndarray:
        # small epsilon so 2 -> 4 V in 20 mV steps gives 101 points despite rounding
        n = int(math.floor((self.program_stop - self.program_start) / self.program_step + 1e-9)) + 1
        return self.program_start + self.program_step * np.arange(n)

    def program_pulse(self, amplitude: float) -> PulseWaveform:
        return PulseWaveform(float(amplitude), self.program_width, self.program_steps)


@dataclass
class Domain:
    activation_field: float
    polarization: int = -1
    history: float = 0.0


@dataclass
class DomainEnsemble:
    """State of one FE film. Per-domain quantities are stored as arrays."""

    geometry: DeviceGeometry
    activation_field: np.ndarray
    polarization: np.ndarray
    history: np.ndarray
    rng: np.random.Generator

    def __len__(self):
        return self.activation_field.shape[0]

    @property
    def domains(self) -> list[Domain]:
        return [
            Domain(float(a), int(p), float(h))
            for a, p, h in zip(self.activation_field, self.polarization, self.history)
        ]

    def copy(self) -> "DomainEnsemble":
        return DomainEnsemble(
            self.geometry,
            self.activation_field.copy(),
            self.polarization.copy(),
            self.history.copy(),
            copy.deepcopy(self.rng),
        )


@dataclass
class ConductanceTrace:
    device_label: str
    cycle_index: int
    read_voltage: float
    v_prg: np.ndarray
    conductance: np.ndarray

    def __post_init__(self):
        self.v_prg = np.asarray(self.v_prg, dtype=float)
        self.conductance = np.asarray(self.conductance, dtype=float)
        if self.v_prg.shape != self.conductance.shape:
            raise ValueError("v_prg and conductance must have the same length")
        if np.any(np.diff(self.v_prg) <= 0):
            raise ValueError("program voltages must be strictly increasing")
        if np.any(self.conductance < 0):
            raise ValueError("conductance must be non-negative")

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.v_prg.tolist(), self.conductance.tolist()))


def init_ensemble(geometry: DeviceGeometry, params: SimParams, seed) -> DomainEnsemble:
    """Sample activation fields from a positive-truncated normal; all domains down."""
    if params.ea_mean <= 0:
        raise ValueError("ea_mean must be positive")
    rng = np.random.default_rng(_seed_sequence(seed))
    n = geometry.n_domains
    ea = params.ea_mean + params.ea_std * rng.standard_normal(n)
    bad = ea <= 0
    while np.any(bad):
        ea[bad] = params.ea_mean + params.ea_std * rng.standard_normal(int(bad.sum()))
        bad = ea <= 0
    return DomainEnsemble(
        geometry=geometry,
        activation_field=ea,
        polarization=-np.ones(n, dtype=np.int8),
        history=np.zeros(n),
        rng=rng,
    )


def gate_field(voltage, params: SimParams):
    """Uniform field across the FE layer in MV/cm (1 V / 1 nm = 10 MV/cm)."""
    return 10.0 * np.asarray(voltage, dtype=float) / params.fe_thickness


def switching_time_constant(field, activation_field, params: SimParams):
    """Nucleation-limited switching time ``tau0 * exp((Ea / E)**n)``.

    Non-positive fields give ``inf``.
    """
    field = np.asarray(field, dtype=float)
    activation_field = np.asarray(activation_field, dtype=float)
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        ratio = activation_field / field
        tau = params.tau0 * np.exp(ratio ** params.nls_exponent)
    tau = np.where(field > 0, tau, np.inf)
    return tau[()] if tau.ndim == 0 else tau


def update_history(domain: Domain, field: float, dt: float, params: SimParams) -> Domain:
    if dt <= 0:
        raise ValueError("dt must be positive")
    tau = switching_time_constant(field, domain.activation_field, params)
    return replace(domain, history=domain.history + dt / tau)


def switching_probability(h_before, h_after, beta: float):
    h_before = np.asarray(h_before, dtype=float)
    h_after = np.asarray(h_after, dtype=float)
    if beta <= 0:
        raise ValueError("beta must be positive")
    if np.any(h_before < 0) or np.any(h_after < h_before):
        raise ValueError("history must satisfy 0 <= h_before <= h_after")
    with np.errstate(over="ignore", invalid="ignore"):
        p = -np.expm1(h_before ** beta - h_after ** beta)
    # inf - inf: the domain has already accumulated unbounded history
    p = np.where(np.isnan(p), 1.0, p)
    return p[()] if p.ndim == 0 else p


def apply_pulse(
    ensemble: DomainEnsemble,
    waveform: PulseWaveform,
    params: SimParams,
    inplace: bool = False,
) -> DomainEnsemble:
    """Evolve the ensemble under a rectangular gate pulse.

    Domains opposing the field accumulate history and may flip; a flip
    resets that domain's history. Domains already aligned with a non-zero
    field have their history cleared as well, since the field erases any
    partial nucleation toward the opposite state.
    """
    ens = ensemble if inplace else ensemble.copy()
    n_steps = max(waveform.n_steps, int(math.ceil(waveform.width / params.dt - 1e-9)))
    dt = waveform.width / n_steps
    e_fe = float(gate_field(waveform.amplitude, params))
    direction = int(np.sign(e_fe))
    if direction != 0:
        tau = switching_time_constant(abs(e_fe), ens.activation_field, params)
        increment = dt / tau
    for _ in range(n_steps):
        u = ens.rng.random(len(ens))
        if direction == 0:
            continue
        opposing = ens.polarization != direction
        ens.history[~opposing] = 0.0
        h0 = ens.history[opposing]
        h1 = h0 + increment[opposing]
        p = switching_probability(h0, h1, params.beta)
        flip = u[opposing] < p
        h1[flip] = 0.0
        ens.history[opposing] = h1
        idx = np.flatnonzero(opposing)[flip]
        ens.polarization[idx] = direction
    return ens


def film_polarization(ensemble: DomainEnsemble) -> float:
    return float(np.mean(ensemble.polarization))


def conductance_from_polarization(p, read_voltage: float, geometry: DeviceGeometry, params: SimParams):
    """Triode-region channel conductance in microsiemens."""
    vth = params.vth0 - params.delta_vth_max * (np.asarray(p, dtype=float) + 1.0) / 2.0
    return params.k_prime * geometry.aspect * np.maximum(0.0, read_voltage - vth)


def read_conductance(
    ensemble: DomainEnsemble, read_voltage: float, geometry: DeviceGeometry, params: SimParams
) -> float:
    if read_voltage <= 0:
        raise ValueError("read_voltage must be positive")
    return float(conductance_from_polarization(film_polarization(ensemble), read_voltage, geometry, params))


def _sweep(ens, geometry, params, scheme, label, cycle) -> ConductanceTrace:
    v = scheme.program_voltages()
    g = np.empty_like(v)
    for i, vp in enumerate(v):
        apply_pulse(ens, scheme.reset, params, inplace=True)
        apply_pulse(ens, scheme.program_pulse(vp), params, inplace=True)
        g[i] = read_conductance(ens, scheme.read_voltage, geometry, params)
    return ConductanceTrace(label, cycle, scheme.read_voltage, v, g)


def run_program_sweep(
    geometry: DeviceGeometry,
    params: SimParams,
    scheme: PulseScheme,
    seed,
    device_label: Optional[str] = None,
) -> ConductanceTrace:
    """Reset, program and read at each programming amplitude of the scheme."""
    ens = init_ensemble(geometry, params, seed)
    return _sweep(ens, geometry, params, scheme, device_label or geometry.label, 0)


def device_seeds(base_seed, n_devices: int) -> list[np.random.SeedSequence]:
    return _seed_sequence(base_seed).spawn(n_devices)


def monte_carlo_d2d(
    geometry: DeviceGeometry,
    params: SimParams,
    scheme: PulseScheme,
    n_devices: int,
    base_seed,
    seeds: Optional[Sequence] = None,
    n_jobs: Optional[int] = None,
) -> list[ConductanceTrace]:
    """One single-cycle sweep per device; each device draws its own domains.

    ``seeds`` overrides the per-device seeds spawned from ``base_seed``.
    """
    if n_devices < 2:
        raise ValueError("a device-to-device campaign needs at least 2 devices")
    if seeds is None:
        seeds = device_seeds(base_seed, n_devices)
    elif len(seeds) != n_devices:
        raise ValueError("len(seeds) must equal n_devices")
    labels = [f"dev{i:04d}" for i in range(n_devices)]
    if n_jobs and n_jobs != 1:
        from joblib import Parallel, delayed

        return Parallel(n_jobs=n_jobs)(
            delayed(run_program_sweep)(geometry, params, scheme, s, lab)
            for s, lab in zip(seeds, labels)
        )
    return [run_program_sweep(geometry, params, scheme, s, lab) for s, lab in zip(seeds, labels)]


def monte_carlo_c2c(
    geometry: DeviceGeometry,
    params: SimParams,
    scheme: PulseScheme,
    n_cycles: int,
    seed,
    device_label: Optional[str] = None,
) -> list[ConductanceTrace]:
    """Repeat the full sweep ``n_cycles`` times on one device."""
    if n_cycles < 2:
        raise ValueError("a cycle-to-cycle campaign needs at least 2 cycles")
    ens = init_ensemble(geometry, params, seed)
    label = device_label or geometry.label
    return [_sweep(ens, geometry, params, scheme, label, c) for c in range(n_cycles)]


def monte_carlo_combined(
    geometry: DeviceGeometry,
    params: SimParams,
    scheme: PulseScheme,
    n_devices: int,
    n_cycles: int,
    base_seed,
) -> list[ConductanceTrace]:
    """Cycles x devices campaign feeding the combined variation estimate."""
    traces = []
    for i, s in enumerate(device_seeds(base_seed, n_devices)):
        traces.extend(monte_carlo_c2c(geometry, params, scheme, n_cycles, s, f"dev{i:04d}"))
    return traces
