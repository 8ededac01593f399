"""Modal-superposition surrogate for the boxed-source measurement setup.

Synthesizes labeled 150x3 spectra for a "source" (simulation-like) domain
and a perturbed "target" (pseudo-real) domain. The acoustic cavity is a
rigid-walled cube whose analytic modes drive a damped second-order response
at each of three virtual accelerometers; the structural path from cavity
pressure to each sensor is condensed into one seeded pseudo-random coupling
weight per (mode, sensor). Domain shift is injected as controlled
perturbations of modal frequencies, damping, couplings, sensor gains,
amplitude compression, and additive noise.

Everything is a pure function of the configuration and a master seed:
per-position synthesis can run in parallel with results identical to
sequential execution.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .data import (
    FORMAT_VERSION,
    IMAGE_SHAPE,
    N_BINS,
    N_SENSORS,
    DatasetBundle,
    DomainSample,
    FsaImage,
    OctantLabel,
)

LOG_FLOOR = 1e-12
DEFAULT_ZETA = 0.08
DEFAULT_MASTER_SEED = 12345

# stream tags for the counter-based seeded draws
_TAG_COUPLING = 1
_TAG_FREQ = 2
_TAG_DAMP = 3
_TAG_GAIN = 4
_TAG_NOISE = 5
_TAG_COUPLING_PERTURB = 6

_DAMPING_FLOOR = 1e-4


def _default_sensors() -> list[tuple[float, float, float]]:
    # one accelerometer per face on three distinct faces (meters)
    return [(0.4, 0.25, 0.30), (0.20, 0.4, 0.30), (0.30, 0.15, 0.4)]


@dataclass
class BoxConfig:
    """Geometry and frequency grid of the cubic acoustic cavity."""

    edge_length: float = 0.4  # m
    speed_of_sound: float = 343.0  # m/s
    freq_lo: float = 10.0  # Hz
    freq_step: float = 10.0  # Hz
    n_bins: int = N_BINS
    sensor_positions: list[tuple[float, float, float]] = field(default_factory=_default_sensors)
    max_mode_order: int = 6

    def validate(self) -> None:
        if self.edge_length <= 0 or self.speed_of_sound <= 0:
            raise ValueError("edge_length and speed_of_sound must be positive")
        if self.freq_lo <= 0 or self.freq_step <= 0:
            raise ValueError("frequency grid must be positive")
        if self.n_bins != N_BINS:
            raise ValueError(f"pipeline is fixed to {N_BINS} frequency bins")
        if len(self.sensor_positions) != N_SENSORS:
            raise ValueError(f"exactly {N_SENSORS} sensors are supported")
        if self.max_mode_order < 0:
            raise ValueError("max_mode_order must be >= 0")
        seen = set()
        for p in self.sensor_positions:
            if len(p) != 3:
                raise ValueError("sensor positions are 3-D points (m)")
            if not all(0.0 <= c <= self.edge_length for c in p):
                raise ValueError(f"sensor {p} lies outside the box")
            if not any(c in (0.0, self.edge_length) for c in p):
                raise ValueError(f"sensor {p} does not lie on the box surface")
            key = tuple(float(c) for c in p)
            if key in seen:
                raise ValueError("sensor positions must be pairwise distinct")
            seen.add(key)

    @property
    def freq_hi(self) -> float:
        return self.freq_lo + (self.n_bins - 1) * self.freq_step

    def frequencies(self) -> np.ndarray:
        return self.freq_lo + self.freq_step * np.arange(self.n_bins, dtype=np.float64)

    def to_dict(self) -> dict:
        return {
            "edge_length": self.edge_length,
            "speed_of_sound": self.speed_of_sound,
            "freq_lo": self.freq_lo,
            "freq_step": self.freq_step,
            "n_bins": self.n_bins,
            "sensor_positions": [list(map(float, p)) for p in self.sensor_positions],
            "max_mode_order": self.max_mode_order,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BoxConfig":
        d = dict(d)
        if "sensor_positions" in d:
            d["sensor_positions"] = [tuple(p) for p in d["sensor_positions"]]
        return cls(**d)


@dataclass
class AcousticMode:
    """One rigid-cavity mode: order triple, natural frequency, damping."""

    order: tuple[int, int, int]
    natural_frequency: float  # Hz
    damping_ratio: float

    def __post_init__(self):
        self.order = tuple(int(v) for v in self.order)
        if any(v < 0 for v in self.order):
            raise ValueError("mode orders must be non-negative")
        if self.order == (0, 0, 0):
            raise ValueError("the rigid (0,0,0) mode is excluded from synthesis")
        if self.damping_ratio <= 0:
            raise ValueError("damping ratio must be positive")


@dataclass
class DomainShiftConfig:
    """Perturbations that manufacture the pseudo-real domain.

    All standard deviations are relative; source-domain defaults leave the
    model exactly unperturbed. Draws are keyed by (master_seed, stream tag,
    mode order / sensor index), never by the domain tag, so a target config
    with source parameters reproduces source spectra bit-exactly.
    """

    domain_tag: str = "source"
    freq_perturb_sd: float = 0.0
    damping_perturb_sd: float = 0.0
    coupling_perturb_sd: float = 0.0
    sensor_gain_sd: float = 0.0
    noise_snr_db: float = math.inf
    compression_exponent: float = 1.0
    master_seed: int = DEFAULT_MASTER_SEED

    def validate(self) -> None:
        if self.domain_tag not in ("source", "target"):
            raise ValueError("domain_tag must be 'source' or 'target'")
        for name in ("freq_perturb_sd", "damping_perturb_sd", "coupling_perturb_sd", "sensor_gain_sd"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not (self.noise_snr_db > 0):
            raise ValueError("noise_snr_db must be positive (or infinite)")
        if self.compression_exponent <= 0:
            raise ValueError("compression_exponent must be positive")
        if self.master_seed < 0:
            raise ValueError("master_seed must be non-negative")

    @classmethod
    def source_defaults(cls, master_seed: int = DEFAULT_MASTER_SEED) -> "DomainShiftConfig":
        return cls(domain_tag="source", master_seed=master_seed)

    @classmethod
    def target_defaults(cls, master_seed: int = DEFAULT_MASTER_SEED) -> "DomainShiftConfig":
        return cls(
            domain_tag="target",
            freq_perturb_sd=0.02,
            damping_perturb_sd=0.15,
            coupling_perturb_sd=0.10,
            sensor_gain_sd=0.05,
            noise_snr_db=30.0,
            compression_exponent=0.9,
            master_seed=master_seed,
        )

    def to_dict(self) -> dict:
        d = {
            "domain_tag": self.domain_tag,
            "freq_perturb_sd": self.freq_perturb_sd,
            "damping_perturb_sd": self.damping_perturb_sd,
            "coupling_perturb_sd": self.coupling_perturb_sd,
            "sensor_gain_sd": self.sensor_gain_sd,
            "noise_snr_db": None if math.isinf(self.noise_snr_db) else self.noise_snr_db,
            "compression_exponent": self.compression_exponent,
            "master_seed": self.master_seed,
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DomainShiftConfig":
        d = dict(d)
        if d.get("noise_snr_db") is None:
            d["noise_snr_db"] = math.inf
        return cls(**d)


@dataclass
class SourceGrid:
    """Cell-centered grid of candidate source positions (mm)."""

    spacing_mm: float
    positions_mm: np.ndarray  # (N, 3)

    def __len__(self) -> int:
        return len(self.positions_mm)


def cavity_mode_table(box: BoxConfig, zeta_base: float = DEFAULT_ZETA) -> list[AcousticMode]:
    """All cavity modes with 0 < f <= 1.1 * top of the frequency grid.

    f(n,l,m) = (c/2) * sqrt((n/L)^2 + (l/L)^2 + (m/L)^2); the rigid (0,0,0)
    mode is excluded and the result is sorted by ascending frequency.
    """
    box.validate()
    if zeta_base <= 0:
        raise ValueError("zeta_base must be positive")
    c, L = box.speed_of_sound, box.edge_length
    f_cut = 1.1 * box.freq_hi
    modes: list[AcousticMode] = []
    rng_orders = range(box.max_mode_order + 1)
    for n in rng_orders:
        for l in rng_orders:
            for m in rng_orders:
                if (n, l, m) == (0, 0, 0):
                    continue
                f = (c / 2.0) * math.sqrt((n / L) ** 2 + (l / L) ** 2 + (m / L) ** 2)
                if f <= f_cut:
                    modes.append(AcousticMode((n, l, m), f, zeta_base))
    if not modes:
        raise ValueError(
            f"max_mode_order={box.max_mode_order} yields no mode below {f_cut:.1f} Hz"
        )
    modes.sort(key=lambda mo: (mo.natural_frequency, mo.order))
    return modes


def make_source_grid(spacing_mm: float, box: BoxConfig) -> SourceGrid:
    """Cell-centered cubic grid: coordinates (i + 0.5) * spacing per axis."""
    box.validate()
    if spacing_mm <= 0:
        raise ValueError("spacing must be positive")
    edge_mm = box.edge_length * 1000.0
    k = edge_mm / spacing_mm
    if abs(k - round(k)) > 1e-9:
        raise ValueError(f"box edge {edge_mm} mm is not divisible by spacing {spacing_mm} mm")
    k = int(round(k))
    axis = (np.arange(k, dtype=np.float64) + 0.5) * spacing_mm
    xs, ys, zs = np.meshgrid(axis, axis, axis, indexing="ij")
    positions = np.stack([xs.ravel(), ys.ravel(), zs.ravel()], axis=1)
    return SourceGrid(spacing_mm=spacing_mm, positions_mm=positions)


def octant_label(position_mm, edge_mm: float = 400.0) -> OctantLabel:
    """Octant index of an interior point: bit k set when coordinate k >= mid.

    Positions on an octant boundary (coordinate equal to the midplane) are
    rejected as ambiguous.
    """
    pos = np.asarray(position_mm, dtype=np.float64)
    if pos.shape != (3,):
        raise ValueError("position must be a 3-vector (mm)")
    if not np.all((pos > 0) & (pos < edge_mm)):
        raise ValueError(f"position {pos.tolist()} is not strictly inside the box")
    mid = edge_mm / 2.0
    if np.any(pos == mid):
        raise ValueError(f"position {pos.tolist()} lies on an octant boundary")
    bits = (pos >= mid).astype(int)
    return OctantLabel(int(bits[0] + 2 * bits[1] + 4 * bits[2]))


def _unit_normal(master_seed: int, *key: int) -> float:
    ss = np.random.SeedSequence([int(master_seed), *[int(k) for k in key]])
    return float(np.random.Generator(np.random.PCG64(ss)).standard_normal())


def _noise_field(master_seed: int, position_mm, shape) -> np.ndarray:
    key = [int(round(float(c) * 1000.0)) for c in position_mm]  # micrometres
    ss = np.random.SeedSequence([int(master_seed), _TAG_NOISE, *key])
    return np.random.Generator(np.random.PCG64(ss)).standard_normal(shape)


class FsaSynthesizer:
    """Precomputed (possibly shift-perturbed) modal model for one domain.

    Building it resolves every structure-level random draw (couplings and
    their perturbations, frequency/damping/gain perturbations) from the
    master seed, so ``render`` is a pure function of the position.
    """

    def __init__(self, box: BoxConfig, modes: list[AcousticMode], shift: DomainShiftConfig):
        box.validate()
        shift.validate()
        if not modes:
            raise ValueError("mode table is empty")
        self.box = box
        self.shift = shift
        seed = shift.master_seed
        n_modes = len(modes)

        self.orders = np.array([mo.order for mo in modes], dtype=np.int64)
        freqs = np.array([mo.natural_frequency for mo in modes], dtype=np.float64)
        zetas = np.array([mo.damping_ratio for mo in modes], dtype=np.float64)

        coupling = np.empty((n_modes, N_SENSORS), dtype=np.float64)
        for i, mo in enumerate(modes):
            n, l, m = mo.order
            for s in range(N_SENSORS):
                coupling[i, s] = _unit_normal(seed, _TAG_COUPLING, n, l, m, s)

        if shift.freq_perturb_sd > 0 or shift.damping_perturb_sd > 0 or shift.coupling_perturb_sd > 0:
            for i, mo in enumerate(modes):
                n, l, m = mo.order
                freqs[i] *= 1.0 + shift.freq_perturb_sd * _unit_normal(seed, _TAG_FREQ, n, l, m)
                zetas[i] *= 1.0 + shift.damping_perturb_sd * _unit_normal(seed, _TAG_DAMP, n, l, m)
                for s in range(N_SENSORS):
                    coupling[i, s] *= 1.0 + shift.coupling_perturb_sd * _unit_normal(
                        seed, _TAG_COUPLING_PERTURB, n, l, m, s
                    )
        self.freqs = np.maximum(freqs, 1e-6)
        self.zetas = np.maximum(zetas, _DAMPING_FLOOR)
        self.coupling = coupling

        gains = np.ones(N_SENSORS, dtype=np.float64)
        if shift.sensor_gain_sd > 0:
            for s in range(N_SENSORS):
                gains[s] += shift.sensor_gain_sd * _unit_normal(seed, _TAG_GAIN, s)
        self.gains = gains

        f = box.frequencies()
        # H[k, i] = f_k^2 / (f_i^2 - f_k^2 + 2j * zeta_i * f_i * f_k)
        denom = (
            self.freqs[None, :] ** 2
            - f[:, None] ** 2
            + 2j * self.zetas[None, :] * self.freqs[None, :] * f[:, None]
        )
        self._H = (f[:, None] ** 2) / denom

    def mode_shapes(self, position_mm) -> np.ndarray:
        """Product-of-cosines cavity shape for every mode at one point."""
        pos_m = np.asarray(position_mm, dtype=np.float64) / 1000.0
        L = self.box.edge_length
        args = math.pi * self.orders * (pos_m[None, :] / L)
        return np.prod(np.cos(args), axis=1)

    def render(self, position_mm) -> FsaImage:
        pos = np.asarray(position_mm, dtype=np.float64)
        edge_mm = self.box.edge_length * 1000.0
        if not np.all((pos > 0) & (pos < edge_mm)):
            raise ValueError(f"source position {pos.tolist()} is not strictly inside the box")
        phi = self.mode_shapes(pos)
        response = self._H @ (phi[:, None] * self.coupling)  # (n_bins, 3) complex
        signal = self.gains[None, :] * np.abs(response) ** self.shift.compression_exponent
        if math.isfinite(self.shift.noise_snr_db):
            sigma = np.sqrt(np.mean(signal**2)) * 10.0 ** (-self.shift.noise_snr_db / 20.0)
            signal = signal + sigma * _noise_field(self.shift.master_seed, pos, signal.shape)
        raw = np.log10(LOG_FLOOR + np.maximum(signal, 0.0))
        return FsaImage(raw.astype(np.float32), normalized=False)


def synthesize_fsa(
    position_mm, box: BoxConfig, modes: list[AcousticMode], shift: DomainShiftConfig
) -> FsaImage:
    """One raw 150x3 spectrum image; deterministic in (position, configs, seed)."""
    return FsaSynthesizer(box, modes, shift).render(position_mm)


def _render_chunk(args) -> list[np.ndarray]:
    box, modes, shift, positions = args
    synth = FsaSynthesizer(box, modes, shift)
    return [synth.render(p).values for p in positions]


def _resolve_workers(workers: int | None) -> int:
    if workers is None:
        workers = int(os.environ.get("INLOC_THREADS", "1") or "1")
    return max(1, workers)


def generate_dataset(
    grid: SourceGrid,
    box: BoxConfig,
    modes: list[AcousticMode],
    shift: DomainShiftConfig,
    workers: int | None = None,
) -> DatasetBundle:
    """Labeled bundle with one sample per grid position.

    ``workers`` (default: the INLOC_THREADS environment variable, else 1)
    caps process-level parallelism; results are identical to sequential
    execution because each sample is independently seeded.
    """
    workers = _resolve_workers(workers)
    positions = grid.positions_mm
    edge_mm = box.edge_length * 1000.0

    if workers == 1 or len(positions) < 4 * workers:
        values = _render_chunk((box, modes, shift, positions))
    else:
        chunks = np.array_split(np.arange(len(positions)), workers)
        jobs = [(box, modes, shift, positions[idx]) for idx in chunks if len(idx)]
        values = []
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for part in pool.map(_render_chunk, jobs):
                values.extend(part)

    samples = [
        DomainSample(
            FsaImage(vals, normalized=False),
            octant_label(pos, edge_mm),
            pos,
            shift.domain_tag,
        )
        for pos, vals in zip(positions, values)
    ]
    manifest = {
        "format_version": FORMAT_VERSION,
        "domain_tag": shift.domain_tag,
        "box": box.to_dict(),
        "shift": shift.to_dict(),
        "grid_spacing_mm": float(grid.spacing_mm),
        "modes": [
            {
                "order": list(mo.order),
                "natural_frequency": mo.natural_frequency,
                "damping_ratio": mo.damping_ratio,
            }
            for mo in modes
        ],
        "n_samples": len(samples),
        "n_bins": N_BINS,
        "n_sensors": N_SENSORS,
        "normalized": False,
        "normalization": None,
    }
    bundle = DatasetBundle(samples, manifest)
    manifest["counts_per_octant"] = bundle.class_counts().tolist()
    return bundle


def modes_from_manifest(manifest: dict) -> list[AcousticMode]:
    return [
        AcousticMode(tuple(entry["order"]), entry["natural_frequency"], entry["damping_ratio"])
        for entry in manifest["modes"]
    ]


def shifted_copy(shift: DomainShiftConfig, **changes) -> DomainShiftConfig:
    """Replace fields on a shift config (convenience for sweeps/tests)."""
    return replace(shift, **changes)
