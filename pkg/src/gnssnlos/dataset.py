"""Synthetic labeled GNSS scenarios, feature windows, normalization, and CSV I/O.

The generator plays the role of a measurement campaign: it simulates a
receiver driving through a masked sky and injects positive pseudorange
biases on blocked (NLOS) receptions. The labeler then mimics the
mask-plus-residual labeling rule, so its output can be scored against the
generator's injected ground truth.
"""

from __future__ import annotations

import copy
import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import geodesy
from .geodesy import EcefPosition, EnuVector

LOS = 1
NLOS = 0

# Feature channel order of the network input.
FEATURE_NAMES = ("elevation_deg", "azimuth_deg", "cn0_dbhz", "ls_residual_m", "rss_m")

CSV_COLUMNS = (
    "epoch_index",
    "sat_id",
    "sat_x",
    "sat_y",
    "sat_z",
    "pseudorange",
    "cn0",
    "rx_truth_x",
    "rx_truth_y",
    "rx_truth_z",
    "label_visibility",
    "label_error_m",
)
_LABEL_COLUMNS = ("label_visibility", "label_error_m")

CN0_MIN = 0.0
CN0_MAX = 65.0


class ConfigError(ValueError):
    """A scenario or mask configuration violates its invariants."""


class CsvFormatError(ValueError):
    """A dataset or mask CSV file is malformed."""


@dataclass
class SatObservation:
    """One satellite's measurement at one epoch.

    label_visibility is LOS (1) / NLOS (0) / None; the generator fills it
    with injected truth, the labeler with the mask-plus-residual rule.
    label_error_m is the pseudorange error label in meters (injected
    multipath-plus-noise for generated data, LS residual as a proxy
    otherwise).
    """

    sat_id: int
    epoch_index: int
    sat_pos: EcefPosition
    pseudorange_corrected: float
    cn0: float
    label_visibility: int | None = None
    label_error_m: float | None = None

    def validate(self, where: str = "observation"):
        if not self.pseudorange_corrected > 0:
            raise CsvFormatError(f"{where}: pseudorange must be positive, got {self.pseudorange_corrected}")
        if not (CN0_MIN <= self.cn0 <= CN0_MAX):
            raise CsvFormatError(f"{where}: cn0 {self.cn0} outside [{CN0_MIN}, {CN0_MAX}] dB-Hz")
        if self.label_visibility not in (None, LOS, NLOS):
            raise CsvFormatError(f"{where}: label_visibility must be 0, 1 or empty")


@dataclass
class Epoch:
    """All observations received at one measurement instant.

    receiver_ls, ls_residuals and ls_clock_bias are derived quantities
    filled in by attach_ls_solutions; they are excluded from equality so
    a file round trip compares clean.
    """

    epoch_index: int
    receiver_truth: EcefPosition
    observations: list[SatObservation]
    receiver_ls: EcefPosition | None = field(default=None, compare=False)
    ls_residuals: dict[int, float] | None = field(default=None, compare=False)
    ls_clock_bias: float | None = field(default=None, compare=False)

    def sat_ids(self) -> list[int]:
        return [o.sat_id for o in self.observations]

    def validate(self):
        ids = self.sat_ids()
        if len(ids) != len(set(ids)):
            raise CsvFormatError(f"epoch {self.epoch_index}: duplicate sat_id")
        for o in self.observations:
            o.validate(where=f"epoch {self.epoch_index}, sat {o.sat_id}")


@dataclass(frozen=True)
class SkyMask:
    """Azimuth-indexed minimum open elevation boundary, degrees.

    A satellite below the (piecewise-linearly interpolated, wraparound)
    boundary at its azimuth counts as blocked.
    """

    boundary: tuple

    def __post_init__(self):
        az = [a for a, _ in self.boundary]
        el = [e for _, e in self.boundary]
        if not az:
            raise ConfigError("sky mask needs at least one boundary sample")
        if any(not (0.0 <= a < 360.0) for a in az):
            raise ConfigError("mask azimuth samples must lie in [0, 360)")
        if any(a2 <= a1 for a1, a2 in zip(az, az[1:])):
            raise ConfigError("mask azimuth samples must be strictly increasing")
        if any(not (0.0 <= e <= 90.0) for e in el):
            raise ConfigError("mask elevations must lie in [0, 90]")

    def min_open_elevation_deg(self, azimuth: float) -> float:
        az = np.array([a for a, _ in self.boundary])
        el = np.array([e for _, e in self.boundary])
        if az.size == 1:
            return float(el[0])
        q = azimuth % 360.0
        # close the circle: wrap the first sample to az0 + 360
        az_ext = np.append(az, az[0] + 360.0)
        el_ext = np.append(el, el[0])
        if q < az_ext[0]:
            q += 360.0
        return float(np.interp(q, az_ext, el_ext))

    def is_blocked(self, azimuth: float, elevation: float) -> bool:
        return elevation < self.min_open_elevation_deg(azimuth)

    @staticmethod
    def open_sky() -> "SkyMask":
        return SkyMask(boundary=((0.0, 0.0),))

    @staticmethod
    def fully_blocked() -> "SkyMask":
        return SkyMask(boundary=((0.0, 90.0),))

    @staticmethod
    def from_sectors(base_elevation_deg: float, sectors, step_deg: float = 1.0) -> "SkyMask":
        """Build a boundary from canyon-style sectors (az_lo, az_hi, wall_elevation).

        Sampled every step_deg so the piecewise-linear interpolation tracks
        the sector walls closely.
        """
        samples = []
        a = 0.0
        while a < 360.0:
            e = base_elevation_deg
            for lo, hi, wall in sectors:
                inside = lo <= a < hi if lo <= hi else (a >= lo or a < hi)
                if inside:
                    e = max(e, wall)
            samples.append((a, float(e)))
            a += step_deg
        return SkyMask(boundary=tuple(samples))


@dataclass
class Normalizer:
    """Per-channel z-score statistics, fitted on training data only."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.std = np.asarray(self.std, dtype=float)
        if self.mean.shape != (len(FEATURE_NAMES),) or self.std.shape != (len(FEATURE_NAMES),):
            raise ConfigError("normalizer statistics must have one entry per feature channel")
        if np.any(self.std <= 0):
            raise ConfigError("normalizer std must be positive (clamp happens at fit time)")


@dataclass
class FeatureWindow:
    """Network input for one T-step window: [N_max, T, 5] features plus masks.

    A slot holds a satellite only if that satellite is present in every
    epoch of the window; all other slots are zero-filled and masked out.
    Labels are taken at the window's final epoch; missing labels are NaN.
    """

    features: np.ndarray
    sat_mask: np.ndarray
    labels_visibility: np.ndarray
    labels_error: np.ndarray
    slot_to_sat_id: dict[int, int]
    start_epoch_index: int
    end_epoch_index: int

    def n_valid(self) -> int:
        return int(self.sat_mask.sum())

    def validate(self):
        n_max, t, f = self.features.shape
        if f != len(FEATURE_NAMES) or t < 1:
            raise ConfigError(f"feature window has bad shape {self.features.shape}")
        if not np.isfinite(self.features).all():
            raise ConfigError("feature window contains non-finite values")
        if np.any(self.features[~self.sat_mask] != 0.0):
            raise ConfigError("masked slots must be zero-filled")


@dataclass
class ScenarioConfig:
    """Knobs of the synthetic measurement campaign.

    The mask sectors describe urban-canyon walls: any satellite whose
    azimuth falls in a sector and whose elevation is below the wall height
    is received NLOS. All randomness flows from rng_seed.
    """

    duration_s: float = 300.0
    epoch_rate_hz: float = 1.0
    n_satellites: int = 12
    T_window: int = 5
    N_max: int = 25
    mask_base_elevation_deg: float = 0.0
    mask_sectors: tuple = (
        (10.0, 41.0, 56.0),
        (100.0, 131.0, 61.0),
        (190.0, 221.0, 51.0),
        (280.0, 311.0, 58.0),
    )
    nlos_bias_range_m: tuple = (20.0, 100.0)
    nlos_cn0_penalty_dbhz: float = 7.0
    noise_sigma_los_m: float = 1.0
    noise_sigma_nlos_m: float = 3.0
    label_residual_threshold_m: float = 10.0
    rng_seed: int = 0
    # receiver trajectory and signal model plumbing
    origin_lat_deg: float = 50.78
    origin_lon_deg: float = 6.08
    origin_height_m: float = 200.0
    receiver_speed_mps: float = 10.0
    segment_duration_s: float = 30.0
    receiver_clock_bias_m: float = 150.0
    cn0_base_dbhz: float = 42.0
    cn0_elevation_gain_dbhz: float = 10.0
    cn0_jitter_dbhz: float = 1.5
    sat_range_m: tuple = (2.0e7, 2.6e7)
    min_elevation_deg: float = 5.0
    # sky drift rates, deg/s; the receiver weaving through streets makes the
    # satellite-relative-to-mask geometry change much faster than orbital motion
    az_drift_deg_s: tuple = (0.3, 0.9)
    el_drift_deg_s: tuple = (0.03, 0.1)

    def validate(self):
        if self.duration_s <= 0 or self.epoch_rate_hz <= 0:
            raise ConfigError("duration and epoch rate must be positive")
        if self.n_satellites < 4:
            raise ConfigError("need at least 4 satellites for positioning")
        if self.N_max < self.n_satellites:
            raise ConfigError("N_max must cover all simultaneously visible satellites")
        if self.T_window < 1:
            raise ConfigError("window length must be >= 1")
        lo, hi = self.nlos_bias_range_m
        if not (0.0 <= lo <= hi):
            raise ConfigError("NLOS bias range must satisfy 0 <= lo <= hi")
        if self.noise_sigma_los_m < 0 or self.noise_sigma_nlos_m < 0:
            raise ConfigError("noise sigmas must be non-negative")
        if self.label_residual_threshold_m < 0:
            raise ConfigError("residual threshold must be non-negative")
        if self.sat_range_m[0] <= 0 or self.sat_range_m[0] > self.sat_range_m[1]:
            raise ConfigError("satellite range interval must be positive and ordered")
        if not (0.0 <= self.mask_base_elevation_deg <= 90.0):
            raise ConfigError("mask base elevation must lie in [0, 90]")

    def sky_mask(self) -> SkyMask:
        if not self.mask_sectors:
            if self.mask_base_elevation_deg >= 90.0:
                return SkyMask.fully_blocked()
            return SkyMask(boundary=((0.0, self.mask_base_elevation_deg),))
        return SkyMask.from_sectors(self.mask_base_elevation_deg, self.mask_sectors)

    def n_epochs(self) -> int:
        return int(round(self.duration_s * self.epoch_rate_hz))

    # Presets. The sector geometry is tuned against the generator so the
    # resulting NLOS ratios land where each scenario family needs them.

    @staticmethod
    def standard(seed: int = 0) -> "ScenarioConfig":
        """Urban scene with roughly 20% NLOS receptions and 20-100 m biases."""
        return ScenarioConfig(rng_seed=seed, N_max=14)

    @staticmethod
    def ac_like(seed: int = 0) -> "ScenarioConfig":
        """Mildly urban, unbalanced scene: NLOS ratio close to 18.9%, strong signals."""
        return ScenarioConfig(
            rng_seed=seed,
            duration_s=600.0,
            N_max=14,
            mask_sectors=(
                (10.0, 40.0, 54.0),
                (100.0, 130.0, 59.0),
                (190.0, 220.0, 49.0),
                (280.0, 310.0, 56.0),
            ),
            cn0_base_dbhz=42.0,
        )

    @staticmethod
    def hk_like(seed: int = 0) -> "ScenarioConfig":
        """Dense-canyon scene: NLOS ratio near 39%, weaker signals, 25 slots."""
        return ScenarioConfig(
            rng_seed=seed,
            duration_s=600.0,
            N_max=25,
            mask_sectors=(
                (0.0, 52.0, 62.0),
                (90.0, 142.0, 68.0),
                (180.0, 232.0, 58.0),
                (270.0, 322.0, 65.0),
            ),
            cn0_base_dbhz=27.0,
        )

    @staticmethod
    def labeling_study(seed: int = 0) -> "ScenarioConfig":
        """Lean-canyon scene for labeling-rule fidelity studies.

        Narrow sectors keep simultaneous NLOS receptions rare, so the
        least-squares residuals stay informative; with many satellites
        blocked at once the solution absorbs much of the bias and no
        residual threshold can recover the truth.
        """
        return ScenarioConfig(
            rng_seed=seed,
            N_max=14,
            mask_sectors=(
                (10.0, 28.0, 56.0),
                (100.0, 118.0, 61.0),
                (190.0, 208.0, 51.0),
                (280.0, 298.0, 58.0),
            ),
        )

    @staticmethod
    def open_sky(seed: int = 0) -> "ScenarioConfig":
        return ScenarioConfig(rng_seed=seed, N_max=14, mask_sectors=(), mask_base_elevation_deg=0.0)

    @staticmethod
    def fully_blocked(seed: int = 0) -> "ScenarioConfig":
        return ScenarioConfig(rng_seed=seed, N_max=14, mask_sectors=(), mask_base_elevation_deg=90.0)


def _reflect(value: float, lo: float, hi: float) -> float:
    """Fold a drifting angle back into [lo, hi] like a bouncing trajectory."""
    span = hi - lo
    x = (value - lo) % (2.0 * span)
    return lo + (x if x <= span else 2.0 * span - x)


def generate_scenario(config: ScenarioConfig) -> list[Epoch]:
    """Simulate a labeled measurement campaign.

    The receiver drives constant-velocity segments near the configured
    origin; satellites drift slowly across the sky. Receptions blocked by
    the sky mask are truth-NLOS and get a positive pseudorange bias drawn
    from nlos_bias_range plus Gaussian noise, and a reduced C/N0. LOS
    receptions get Gaussian noise only. Deterministic for a given config.
    """
    config.validate()
    rng = np.random.default_rng(config.rng_seed)
    mask = config.sky_mask()
    origin = geodesy.geodetic_to_ecef(
        config.origin_lat_deg, config.origin_lon_deg, config.origin_height_m
    )
    n_epochs = config.n_epochs()
    dt = 1.0 / config.epoch_rate_hz

    # receiver trajectory: constant speed, heading redrawn per segment
    seg_epochs = max(1, int(round(config.segment_duration_s * config.epoch_rate_hz)))
    east, north = 0.0, 0.0
    heading = rng.uniform(0.0, 2.0 * math.pi)
    truth_enu = []
    for t in range(n_epochs):
        if t > 0 and t % seg_epochs == 0:
            heading = rng.uniform(0.0, 2.0 * math.pi)
        truth_enu.append((east, north))
        east += math.sin(heading) * config.receiver_speed_mps * dt
        north += math.cos(heading) * config.receiver_speed_mps * dt

    # satellite sky tracks
    n_sat = config.n_satellites
    az0 = rng.uniform(0.0, 360.0, size=n_sat)
    el0 = rng.uniform(15.0, 75.0, size=n_sat)
    az_rate = rng.choice([-1.0, 1.0], size=n_sat) * rng.uniform(
        config.az_drift_deg_s[0], config.az_drift_deg_s[1], size=n_sat
    )
    el_rate = rng.choice([-1.0, 1.0], size=n_sat) * rng.uniform(
        config.el_drift_deg_s[0], config.el_drift_deg_s[1], size=n_sat
    )
    sat_range = rng.uniform(config.sat_range_m[0], config.sat_range_m[1], size=n_sat)

    epochs = []
    for t in range(n_epochs):
        sec = t * dt
        rx_truth = geodesy.enu_to_ecef(
            EnuVector(truth_enu[t][0], truth_enu[t][1], 0.0), origin
        )
        observations = []
        for k in range(n_sat):
            az = (az0[k] + az_rate[k] * sec) % 360.0
            el = _reflect(el0[k] + el_rate[k] * sec, 2.0, 88.0)
            if el < config.min_elevation_deg:
                continue
            el_rad, az_rad = math.radians(el), math.radians(az)
            direction = EnuVector(
                math.sin(az_rad) * math.cos(el_rad),
                math.cos(az_rad) * math.cos(el_rad),
                math.sin(el_rad),
            )
            sat_pos = geodesy.enu_to_ecef(
                EnuVector.from_array(direction.as_array() * sat_range[k]), rx_truth
            )
            blocked = mask.is_blocked(az, el)
            cn0 = config.cn0_base_dbhz + config.cn0_elevation_gain_dbhz * math.sin(el_rad)
            cn0 += rng.normal(0.0, config.cn0_jitter_dbhz)
            if blocked:
                bias = rng.uniform(*config.nlos_bias_range_m)
                noise = rng.normal(0.0, config.noise_sigma_nlos_m)
                cn0 -= config.nlos_cn0_penalty_dbhz
            else:
                bias = 0.0
                noise = rng.normal(0.0, config.noise_sigma_los_m)
            pr = geodesy.model_pseudorange(
                rx_truth, sat_pos, config.receiver_clock_bias_m, bias, noise
            )
            observations.append(
                SatObservation(
                    sat_id=k,
                    epoch_index=t,
                    sat_pos=sat_pos,
                    pseudorange_corrected=pr,
                    cn0=float(np.clip(cn0, CN0_MIN, CN0_MAX)),
                    label_visibility=NLOS if blocked else LOS,
                    label_error_m=bias + noise,
                )
            )
        epochs.append(Epoch(epoch_index=t, receiver_truth=rx_truth, observations=observations))
    return epochs


def attach_ls_solutions(epochs: list[Epoch], initial_guess: EcefPosition | None = None) -> list[int]:
    """Solve per-epoch least-squares positions and store residuals in place.

    The first epoch starts from `initial_guess` (or the epoch's truth when
    absent); later epochs chain from the previous solution. Epochs with
    fewer than 4 satellites are left unsolved; their indices are returned.
    """
    skipped = []
    guess = initial_guess
    for epoch in epochs:
        if len(epoch.observations) < 4:
            skipped.append(epoch.epoch_index)
            continue
        start = guess if guess is not None else epoch.receiver_truth
        solution = geodesy.ls_position_solve(
            [o.pseudorange_corrected for o in epoch.observations],
            [o.sat_pos for o in epoch.observations],
            initial_guess=start,
        )
        epoch.receiver_ls = solution.position
        epoch.ls_clock_bias = solution.clock_bias
        epoch.ls_residuals = {
            o.sat_id: float(r) for o, r in zip(epoch.observations, solution.residuals)
        }
        guess = solution.position
    return skipped


def _observation_angles(obs: SatObservation, receiver: EcefPosition) -> tuple[float, float]:
    enu = geodesy.ecef_to_enu(obs.sat_pos, receiver)
    return geodesy.elevation_deg(enu), geodesy.azimuth_deg(enu)


def label_observations(
    epochs: list[Epoch],
    mask: SkyMask,
    residual_threshold_m: float,
) -> tuple[list[Epoch], list[int]]:
    """Apply the mask-plus-residual labeling rule.

    An observation is labeled NLOS iff its satellite sits below the mask
    boundary at its azimuth AND its LS residual exceeds the threshold; both
    conditions must hold. Returns (labeled copies, skipped epoch indices);
    epochs that cannot be solved (< 4 satellites) pass through unchanged.
    The error label keeps an existing truth value when present and falls
    back to the LS residual as a proxy.
    """
    labeled = copy.deepcopy(epochs)
    needs_solve = [e for e in labeled if e.ls_residuals is None]
    skipped = attach_ls_solutions(needs_solve) if needs_solve else []
    skipped = sorted(set(skipped) | {e.epoch_index for e in labeled if e.ls_residuals is None})
    for epoch in labeled:
        if epoch.ls_residuals is None:
            continue
        for obs in epoch.observations:
            el, az = _observation_angles(obs, epoch.receiver_ls)
            residual = epoch.ls_residuals[obs.sat_id]
            is_nlos = mask.is_blocked(az, el) and residual > residual_threshold_m
            obs.label_visibility = NLOS if is_nlos else LOS
            if obs.label_error_m is None:
                obs.label_error_m = residual
    return labeled, skipped


def build_windows(epochs: list[Epoch], T: int, N_max: int) -> list[FeatureWindow]:
    """Cut sliding windows of length T (stride 1) into network inputs.

    A satellite occupies a slot only when present in all T epochs of the
    window; slots are ordered by sat_id. Features per step are
    (El, Az, C/N0, sigma_LS, RSS) with RSS computed from the window's own
    T residuals. Labels come from the window's final epoch. Windows
    touching unsolvable or non-consecutive epochs are dropped.
    """
    if T < 1:
        raise ConfigError("window length must be >= 1")
    ordered = sorted(epochs, key=lambda e: e.epoch_index)
    if any(e.ls_residuals is None for e in ordered if len(e.observations) >= 4):
        attach_ls_solutions([e for e in ordered if e.ls_residuals is None])
    windows = []
    for start in range(0, len(ordered) - T + 1):
        chunk = ordered[start : start + T]
        if any(c.epoch_index != chunk[0].epoch_index + i for i, c in enumerate(chunk)):
            continue
        if any(c.ls_residuals is None for c in chunk):
            continue
        common = set(chunk[0].sat_ids())
        for c in chunk[1:]:
            common &= set(c.sat_ids())
        slot_ids = sorted(common)[:N_max]
        features = np.zeros((N_max, T, len(FEATURE_NAMES)), dtype=float)
        sat_mask = np.zeros(N_max, dtype=bool)
        labels_vis = np.full(N_max, np.nan)
        labels_err = np.full(N_max, np.nan)
        slot_to_sat_id = {}
        final = chunk[-1]
        final_obs = {o.sat_id: o for o in final.observations}
        for slot, sid in enumerate(slot_ids):
            residuals = []
            for step, c in enumerate(chunk):
                obs = next(o for o in c.observations if o.sat_id == sid)
                el, az = _observation_angles(obs, c.receiver_ls)
                sigma = c.ls_residuals[sid]
                features[slot, step, 0] = el
                features[slot, step, 1] = az
                features[slot, step, 2] = obs.cn0
                features[slot, step, 3] = sigma
                residuals.append(sigma)
            features[slot, :, 4] = geodesy.rss(residuals)
            sat_mask[slot] = True
            slot_to_sat_id[slot] = sid
            fo = final_obs[sid]
            if fo.label_visibility is not None:
                labels_vis[slot] = float(fo.label_visibility)
            if fo.label_error_m is not None:
                labels_err[slot] = float(fo.label_error_m)
        window = FeatureWindow(
            features=features,
            sat_mask=sat_mask,
            labels_visibility=labels_vis,
            labels_error=labels_err,
            slot_to_sat_id=slot_to_sat_id,
            start_epoch_index=chunk[0].epoch_index,
            end_epoch_index=final.epoch_index,
        )
        window.validate()
        windows.append(window)
    return windows


def fit_normalizer(windows: list[FeatureWindow]) -> Normalizer:
    """Per-channel mean/std over all valid (slot, step) entries."""
    if not windows:
        raise ConfigError("cannot fit a normalizer on an empty split")
    rows = [w.features[w.sat_mask].reshape(-1, len(FEATURE_NAMES)) for w in windows]
    stacked = np.concatenate(rows, axis=0)
    if stacked.size == 0:
        raise ConfigError("cannot fit a normalizer: no valid satellite slots")
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0)
    std = np.where(std < 1e-12, 1.0, std)
    return Normalizer(mean=mean, std=std)


def apply_normalizer(windows: list[FeatureWindow], normalizer: Normalizer) -> list[FeatureWindow]:
    """Z-score valid entries; masked slots stay exactly zero."""
    out = []
    for w in windows:
        feats = np.zeros_like(w.features)
        feats[w.sat_mask] = (w.features[w.sat_mask] - normalizer.mean) / normalizer.std
        out.append(replace(w, features=feats))
    return out


# ---------------------------------------------------------------------------
# file formats


def _format_value(x: float) -> str:
    return repr(float(x))


def write_csv(epochs: list[Epoch], path):
    """One row per (epoch, satellite); labels written as empty when absent."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for epoch in sorted(epochs, key=lambda e: e.epoch_index):
            for obs in epoch.observations:
                writer.writerow(
                    [
                        epoch.epoch_index,
                        obs.sat_id,
                        _format_value(obs.sat_pos.x),
                        _format_value(obs.sat_pos.y),
                        _format_value(obs.sat_pos.z),
                        _format_value(obs.pseudorange_corrected),
                        _format_value(obs.cn0),
                        _format_value(epoch.receiver_truth.x),
                        _format_value(epoch.receiver_truth.y),
                        _format_value(epoch.receiver_truth.z),
                        "" if obs.label_visibility is None else obs.label_visibility,
                        "" if obs.label_error_m is None else _format_value(obs.label_error_m),
                    ]
                )


def read_csv(path) -> list[Epoch]:
    """Read a dataset CSV back into epochs, validating every row.

    The ten geometry/measurement columns are required; the two label
    columns may be absent entirely (labels stay None). Any malformed or
    invariant-violating row raises CsvFormatError naming its line number.
    """
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvFormatError(f"{path}: empty file, header row required") from None
        header = [h.strip() for h in header]
        required = list(CSV_COLUMNS[:10])
        if header[: len(required)] != required:
            raise CsvFormatError(
                f"{path}: header must start with {','.join(required)}, got {','.join(header)}"
            )
        has_labels = len(header) >= 12 and header[10:12] == list(_LABEL_COLUMNS)
        by_epoch: dict[int, dict] = {}
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < len(required) or (has_labels and len(row) < 12):
                raise CsvFormatError(f"{path} line {line_no}: expected {len(header)} fields, got {len(row)}")
            try:
                epoch_index = int(row[0])
                sat_id = int(row[1])
                sat = EcefPosition(float(row[2]), float(row[3]), float(row[4]))
                pseudorange = float(row[5])
                cn0 = float(row[6])
                rx = EcefPosition(float(row[7]), float(row[8]), float(row[9]))
            except (ValueError, IndexError) as exc:
                raise CsvFormatError(f"{path} line {line_no}: {exc}") from None
            visibility = None
            error_m = None
            if has_labels:
                v = row[10].strip()
                e = row[11].strip()
                try:
                    visibility = int(v) if v else None
                    error_m = float(e) if e else None
                except ValueError as exc:
                    raise CsvFormatError(f"{path} line {line_no}: {exc}") from None
            obs = SatObservation(
                sat_id=sat_id,
                epoch_index=epoch_index,
                sat_pos=sat,
                pseudorange_corrected=pseudorange,
                cn0=cn0,
                label_visibility=visibility,
                label_error_m=error_m,
            )
            try:
                obs.validate(where=f"{path} line {line_no}")
            except CsvFormatError:
                raise
            slot = by_epoch.setdefault(epoch_index, {"rx": rx, "obs": []})
            slot["obs"].append(obs)
    epochs = []
    for epoch_index in sorted(by_epoch):
        entry = by_epoch[epoch_index]
        epoch = Epoch(
            epoch_index=epoch_index, receiver_truth=entry["rx"], observations=entry["obs"]
        )
        epoch.validate()
        epochs.append(epoch)
    return epochs


def write_mask_csv(mask: SkyMask, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["azimuth_deg", "min_open_elevation_deg"])
        for az, el in mask.boundary:
            writer.writerow([_format_value(az), _format_value(el)])


def read_mask_csv(path) -> SkyMask:
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvFormatError(f"{path}: empty file, header row required") from None
        if [h.strip() for h in header[:2]] != ["azimuth_deg", "min_open_elevation_deg"]:
            raise CsvFormatError(f"{path}: expected header azimuth_deg,min_open_elevation_deg")
        boundary = []
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                boundary.append((float(row[0]), float(row[1])))
            except (ValueError, IndexError) as exc:
                raise CsvFormatError(f"{path} line {line_no}: {exc}") from None
    try:
        return SkyMask(boundary=tuple(boundary))
    except ConfigError as exc:
        raise CsvFormatError(f"{path}: {exc}") from None


def class_balance(epochs: list[Epoch]) -> tuple[float, float]:
    """(R_LOS, R_NLOS) percentages over all labeled observations."""
    n_los = 0
    n_nlos = 0
    for epoch in epochs:
        for obs in epoch.observations:
            if obs.label_visibility == LOS:
                n_los += 1
            elif obs.label_visibility == NLOS:
                n_nlos += 1
    total = n_los + n_nlos
    if total == 0:
        raise ConfigError("no labeled observations")
    return 100.0 * n_los / total, 100.0 * n_nlos / total
