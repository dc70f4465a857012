"""Synthetic vehicular channels for a two-lane street served by a roadside unit.

Geometry replaces ray tracing: vehicles are dropped uniformly along the
street, the line-of-sight path follows the exact RSU-to-vehicle geometry
with free-space gain, and non-line-of-sight energy comes from specular
images across two parallel canyon walls with a configurable per-bounce
loss.  Labels are beamspace argmax indices, so the ensemble produces the
two-strip beamspace prior that the learned sensing matrix exploits.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import linalg
from .fileio import (
    DataFormatError,
    manifest_get,
    read_artifact,
    write_artifact,
)
from .sensing import counter_rng

__all__ = [
    "PathSet",
    "ScenarioConfig",
    "WidebandConfig",
    "ChannelSample",
    "Dataset",
    "array_response",
    "narrowband_channel",
    "beamspace",
    "best_beam_label",
    "scenario_paths",
    "gen_scenario",
    "gen_wideband_scenario",
    "wideband_taps",
    "subcarriers",
    "normalize_stage1",
    "normalize_eval",
    "beamspace_prior",
    "prior_support",
]

SPEED_OF_LIGHT = 299_792_458.0
RECEIVER_HEIGHT = 2.5  # vehicle rooftop antenna (m)


@dataclass(frozen=True)
class PathSet:
    """Propagation paths: linear gains, phases, angles and delays."""

    gains: np.ndarray       # alpha_l >= 0, linear amplitude
    phases: np.ndarray      # beta_l (rad)
    elevations: np.ndarray  # theta_l (rad)
    azimuths: np.ndarray    # phi_l (rad)
    delays: np.ndarray      # tau_l (s), sorted non-decreasing

    def __post_init__(self):
        arrays = {}
        for name in ("gains", "phases", "elevations", "azimuths", "delays"):
            arrays[name] = np.atleast_1d(np.asarray(getattr(self, name), dtype=np.float64))
            object.__setattr__(self, name, arrays[name])
        lengths = {a.shape[0] for a in arrays.values()}
        if len(lengths) != 1:
            raise ValueError("all path arrays must have equal length")
        if self.gains.shape[0] < 1:
            raise ValueError("a PathSet needs at least one path")
        if np.any(self.gains < 0):
            raise ValueError("path gains must be nonnegative")
        if np.any(self.delays < 0):
            raise ValueError("path delays must be nonnegative")
        if np.any(np.diff(self.delays) < 0):
            raise ValueError("path delays must be sorted non-decreasing")

    def __len__(self) -> int:
        return self.gains.shape[0]


@dataclass(frozen=True)
class ScenarioConfig:
    """Two-lane street geometry and sampling parameters."""

    n: int = 16
    rsu_height: float = 5.0
    lane_offsets: tuple[float, ...] = (4.0, 7.0)
    street_length: float = 100.0
    blockage_prob: float = 0.27
    max_reflections: int = 1
    carrier_freq: float = 28e9
    bandwidth: float = 100e6
    seed: int = 0
    wall_distance: float = 10.0
    reflection_loss_db: float = 10.0

    def __post_init__(self):
        if any(d <= 0 for d in self.lane_offsets):
            raise ValueError("lane offsets must be positive")
        if len(set(self.lane_offsets)) != len(self.lane_offsets):
            raise ValueError("lane offsets must be distinct")
        if not 0.0 <= self.blockage_prob <= 1.0:
            raise ValueError("blockage probability must lie in [0, 1]")
        if self.max_reflections < 1:
            raise ValueError("need at least one reflection order for NLOS coverage")

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.carrier_freq


@dataclass(frozen=True)
class WidebandConfig:
    """Multi-tap channel parameters and subcarrier extraction rule."""

    l_c: int = 128            # tap count
    sample_period: float = 1e-8
    l_sub: int = 8            # subcarrier stride
    pulse: str = "rc"         # 'rc' (raised cosine) or 'sinc'
    rolloff: float = 0.35
    n_t: int | None = None    # defaults to N^2
    n_r: int = 1

    def __post_init__(self):
        if self.l_c % self.l_sub != 0:
            raise ValueError(f"tap count {self.l_c} not divisible by stride {self.l_sub}")
        if self.pulse not in ("rc", "sinc"):
            raise ValueError(f"unknown pulse shape {self.pulse!r}")

    @property
    def n_sc(self) -> int:
        return self.l_c // self.l_sub

    def subcarrier_indices(self) -> np.ndarray:
        """Retained frequency indices s*L_sub + 1; the DC bin is never used."""
        return np.arange(self.n_sc) * self.l_sub + 1


@dataclass(frozen=True)
class ChannelSample:
    """One realization: channel matrix (or subcarrier stack) plus its label."""

    channel: np.ndarray
    label: tuple[int, int]
    los: bool


@dataclass(frozen=True)
class Dataset:
    """Immutable sample collection with uniform (count, n_sc, N, N) storage."""

    n: int
    kind: str  # 'narrowband' | 'wideband'
    channels: np.ndarray       # complex128 (count, n_sc, N, N)
    labels: np.ndarray         # flat indices i*N + j
    los: np.ndarray            # bool (count,)
    seed: int
    normalization: str = "none"

    def __post_init__(self):
        if self.kind not in ("narrowband", "wideband"):
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if self.channels.ndim != 4:
            raise ValueError("channels must have shape (count, n_sc, N, N)")

    @property
    def count(self) -> int:
        return self.channels.shape[0]

    @property
    def n_sc(self) -> int:
        return self.channels.shape[1]

    def label_pairs(self) -> np.ndarray:
        return np.stack(np.divmod(self.labels, self.n), axis=1)

    def sample(self, i: int) -> ChannelSample:
        chan = self.channels[i, 0] if self.kind == "narrowband" else self.channels[i]
        i_row, i_col = divmod(int(self.labels[i]), self.n)
        return ChannelSample(channel=chan, label=(i_row, i_col), los=bool(self.los[i]))

    def subset(self, idx) -> "Dataset":
        return replace(
            self,
            channels=self.channels[idx],
            labels=self.labels[idx],
            los=self.los[idx],
        )

    def save(self, path: str, extra_manifest: list[tuple[str, str]] | None = None) -> None:
        manifest = [
            ("format", "ccsbeam-dataset/1"),
            ("n", str(self.n)),
            ("kind", self.kind),
            ("count", str(self.count)),
            ("n_sc", str(self.n_sc)),
            ("seed", str(self.seed)),
            ("normalization", self.normalization),
        ]
        if extra_manifest:
            manifest.extend(extra_manifest)
        interleaved = np.empty(self.channels.shape + (2,), dtype="<f8")
        interleaved[..., 0] = self.channels.real
        interleaved[..., 1] = self.channels.imag
        payload = (
            interleaved.tobytes()
            + np.ascontiguousarray(self.labels, dtype="<u4").tobytes()
            + np.ascontiguousarray(self.los, dtype=np.uint8).tobytes()
        )
        write_artifact(path, manifest, payload)

    @classmethod
    def load(cls, path: str) -> "Dataset":
        manifest, payload = read_artifact(path)
        if manifest_get(manifest, "format") != "ccsbeam-dataset/1":
            raise DataFormatError(f"{path}: not a ccsbeam dataset")
        n = int(manifest_get(manifest, "n"))
        count = int(manifest_get(manifest, "count"))
        n_sc = int(manifest_get(manifest, "n_sc"))
        chan_bytes = count * n_sc * n * n * 2 * 8
        label_bytes = count * 4
        if len(payload) != chan_bytes + label_bytes + count:
            raise DataFormatError(f"{path}: payload size mismatch")
        raw = np.frombuffer(payload[:chan_bytes], dtype="<f8").reshape(count, n_sc, n, n, 2)
        channels = raw[..., 0] + 1j * raw[..., 1]
        labels = np.frombuffer(payload[chan_bytes : chan_bytes + label_bytes], dtype="<u4")
        los = np.frombuffer(payload[chan_bytes + label_bytes :], dtype=np.uint8).astype(bool)
        return cls(
            n=n,
            kind=manifest_get(manifest, "kind"),
            channels=np.ascontiguousarray(channels),
            labels=labels.astype(np.int64),
            los=los,
            seed=int(manifest_get(manifest, "seed")),
            normalization=manifest_get(manifest, "normalization"),
        )


def array_response(n: int, delta: float) -> np.ndarray:
    """Half-wavelength UPA steering vector: entry k = exp(1j*pi*delta*k)."""
    return np.exp(1j * np.pi * delta * np.arange(n))


def narrowband_channel(paths: PathSet, n: int) -> np.ndarray:
    """Sum of rank-1 path terms alpha*exp(1j*beta) * a(cos(el)) a(sin(el)cos(az))^T."""
    if len(paths) < 1:
        raise ValueError("need at least one path")
    h = np.zeros((n, n), dtype=np.complex128)
    for a, b, th, ph in zip(paths.gains, paths.phases, paths.elevations, paths.azimuths):
        row = array_response(n, np.cos(th))
        col = array_response(n, np.sin(th) * np.cos(ph))
        h += a * np.exp(1j * b) * np.outer(row, col)
    return h


def beamspace(h: np.ndarray) -> np.ndarray:
    """Beamspace representation of a channel (its 2D unitary transform)."""
    return linalg.dft2(h)


def best_beam_label(h: np.ndarray) -> tuple[int, int]:
    """Index of the strongest beamspace entry; ties break to the smallest
    row-major index."""
    x = np.abs(beamspace(h))
    if not x.any():
        raise ValueError("all-zero channel has no best beam")
    i, j = np.unravel_index(int(np.argmax(x)), x.shape)
    return int(i), int(j)


def _batch_labels(channels: np.ndarray) -> np.ndarray:
    """Flat best-beam indices for a (count, N, N) stack."""
    n = channels.shape[-1]
    uc = linalg.dft_kernel(n).conj()
    x = np.abs(uc @ channels @ uc)
    return np.argmax(x.reshape(len(channels), -1), axis=1)


def _direction_angles(dx: float, dy: float, dz: float) -> tuple[float, float]:
    """(elevation, azimuth) of a departure direction, z-axis polar convention."""
    r = float(np.sqrt(dx * dx + dy * dy + dz * dz))
    theta = float(np.arccos(np.clip(dz / r, -1.0, 1.0)))
    phi = float(np.arctan2(dy, dx))
    return theta, phi


def _sample_paths(config: ScenarioConfig, rng: np.random.Generator) -> tuple[PathSet, bool]:
    """Draw one vehicle drop and return its path set and LOS flag."""
    x = float(rng.uniform(-config.street_length / 2.0, config.street_length / 2.0))
    lane = float(config.lane_offsets[int(rng.integers(len(config.lane_offsets)))])
    blocked = bool(rng.uniform() < config.blockage_prob)

    lam = config.wavelength
    gamma = 10.0 ** (-config.reflection_loss_db / 20.0)
    dz = RECEIVER_HEIGHT - config.rsu_height
    records = []  # (delay, gain, phase, elevation, azimuth)

    def add_path(target_y: float, bounces: int) -> None:
        r = float(np.sqrt(x * x + target_y * target_y + dz * dz))
        theta, phi = _direction_angles(x, target_y, dz)
        gain = lam / (4.0 * np.pi * r) * gamma**bounces
        phase = float((-2.0 * np.pi * r / lam) % (2.0 * np.pi))
        records.append((r / SPEED_OF_LIGHT, gain, phase, theta, phi))

    if not blocked:
        add_path(lane, 0)
    # Specular images across the canyon walls at y = +/- wall_distance.
    walls = (config.wall_distance, -config.wall_distance)
    for first in range(2):
        y_img = lane
        for bounce in range(1, config.max_reflections + 1):
            y_img = 2.0 * walls[(first + bounce - 1) % 2] - y_img
            add_path(y_img, bounce)

    records.sort(key=lambda rec: rec[0])
    delays, gains, phases, thetas, phis = (np.array(v) for v in zip(*records))
    paths = PathSet(gains=gains, phases=phases, elevations=thetas, azimuths=phis, delays=delays)
    return paths, not blocked


def scenario_paths(config: ScenarioConfig, count: int) -> list[tuple[PathSet, bool]]:
    """Per-sample path sets; each sample uses its own counter-derived stream."""
    if count <= 0:
        raise ValueError(f"sample count must be positive, got {count}")
    return [_sample_paths(config, counter_rng(config.seed, i)) for i in range(count)]


def gen_scenario(config: ScenarioConfig, count: int) -> Dataset:
    """Generate `count` narrowband samples with beamspace-argmax labels."""
    drops = scenario_paths(config, count)
    channels = np.stack([narrowband_channel(p, config.n) for p, _ in drops])
    labels = _batch_labels(channels)
    los = np.array([flag for _, flag in drops])
    return Dataset(
        n=config.n,
        kind="narrowband",
        channels=channels[:, None],
        labels=labels,
        los=los,
        seed=config.seed,
    )


def gen_wideband_scenario(config: ScenarioConfig, wcfg: WidebandConfig, count: int) -> Dataset:
    """Generate subcarrier-stack samples; labels come from the first retained
    subcarrier (the near-DC one, which is the narrowband-equivalent slice)."""
    drops = scenario_paths(config, count)
    stacks = []
    for paths, _ in drops:
        taps = wideband_taps(paths, wcfg, config.n)
        stacks.append(np.stack(subcarriers(taps, wcfg)))
    channels = np.stack(stacks)
    labels = _batch_labels(channels[:, 0])
    los = np.array([flag for _, flag in drops])
    return Dataset(
        n=config.n,
        kind="wideband",
        channels=channels,
        labels=labels,
        los=los,
        seed=config.seed,
    )


def _pulse(cfg: WidebandConfig, t: np.ndarray) -> np.ndarray:
    x = t / cfg.sample_period
    if cfg.pulse == "sinc":
        return np.sinc(x)
    beta = cfg.rolloff
    denom = 1.0 - (2.0 * beta * x) ** 2
    on_singularity = np.isclose(np.abs(2.0 * beta * x), 1.0)
    safe = np.where(on_singularity, 1.0, denom)
    g = np.sinc(x) * np.cos(np.pi * beta * x) / safe
    return np.where(on_singularity, np.pi / 4.0 * np.sinc(1.0 / (2.0 * beta)), g)


def wideband_taps(paths: PathSet, cfg: WidebandConfig, n: int) -> list[np.ndarray]:
    """Tapped delay-line channel: tap n sums sqrt(Nt*Nr)*g(nT - tau_l) times
    each path's rank-1 term."""
    if len(paths) < 1:
        raise ValueError("need at least one path")
    n_t = cfg.n_t if cfg.n_t is not None else n * n
    scale = np.sqrt(n_t * cfg.n_r)
    grid = np.arange(cfg.l_c) * cfg.sample_period
    taps = [np.zeros((n, n), dtype=np.complex128) for _ in range(cfg.l_c)]
    for a, b, th, ph, tau in zip(
        paths.gains, paths.phases, paths.elevations, paths.azimuths, paths.delays
    ):
        term = a * np.exp(1j * b) * np.outer(
            array_response(n, np.cos(th)), array_response(n, np.sin(th) * np.cos(ph))
        )
        weights = _pulse(cfg, grid - tau)
        for tap_idx in np.nonzero(weights)[0]:
            taps[tap_idx] += scale * weights[tap_idx] * term
    return taps


def subcarriers(taps: list[np.ndarray], cfg: WidebandConfig) -> list[np.ndarray]:
    """Frequency response at the retained indices {s*L_sub + 1}, skipping DC.

    Unnormalized DFT across taps: Hhat[k] = sum_n taps[n] * exp(-2j*pi*k*n/L_c).
    """
    if len(taps) != cfg.l_c:
        raise ValueError(f"expected {cfg.l_c} taps, got {len(taps)}")
    stack = np.stack(taps)  # (L_c, N, N)
    ks = cfg.subcarrier_indices()
    phases = np.exp(-2j * np.pi * np.outer(ks, np.arange(cfg.l_c)) / cfg.l_c)
    return list(np.tensordot(phases, stack, axes=(1, 0)))


def _anchor_norms(dataset: Dataset) -> np.ndarray:
    """Per-sample Frobenius norm of the narrowband-equivalent matrix (the
    first retained subcarrier for wideband stacks)."""
    return np.linalg.norm(dataset.channels[:, 0], axis=(1, 2))


def normalize_stage1(dataset: Dataset) -> Dataset:
    """Scale each sample so its channel has Frobenius norm exactly N."""
    norms = _anchor_norms(dataset)
    if np.any(norms == 0):
        raise ValueError("cannot normalize a zero-power channel")
    scale = dataset.n / norms
    return replace(
        dataset,
        channels=dataset.channels * scale[:, None, None, None],
        normalization="stage1",
    )


def normalize_eval(dataset: Dataset) -> Dataset:
    """Apply one common scalar so the mean squared channel norm equals N^2.

    Relative power differences between samples are preserved exactly.
    """
    if dataset.count == 0:
        raise ValueError("cannot normalize an empty dataset")
    mean_power = float(np.mean(_anchor_norms(dataset) ** 2))
    if mean_power == 0:
        raise ValueError("cannot normalize an all-zero dataset")
    scale = np.sqrt(dataset.n**2 / mean_power)
    return replace(dataset, channels=dataset.channels * scale, normalization="eval")


def beamspace_prior(dataset: Dataset) -> np.ndarray:
    """Empirical probability that each beamspace direction is the best beam."""
    if dataset.count == 0:
        raise ValueError("prior of an empty dataset is undefined")
    counts = np.bincount(dataset.labels, minlength=dataset.n**2)
    return counts.reshape(dataset.n, dataset.n) / dataset.count


def prior_support(prior: np.ndarray, factor: float = 10.0) -> np.ndarray:
    """Boolean support mask: entries with probability above 1/(factor*N^2)."""
    n_sq = prior.size
    return prior > 1.0 / (factor * n_sq)
