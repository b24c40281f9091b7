"""Synthetic impression logs and their CSV serialization.

A log covers a fixed number of episodes; each episode is a sequence of
timesteps, each timestep a set of impression opportunities, and every
opportunity lists the same candidate ads (a few per advertiser group).
Per-ad impression values are log-normal with group-specific location,
quality sits in a narrow uniform band, and the manual bid column (msb)
tracks value with multiplicative noise.

CSV columns, in order: episode, timestep, opportunity_id, ad_id, group,
value, quality, msb. Floats are written with 9 significant digits.
"""

import csv
from dataclasses import dataclass, field
from typing import Iterator, Tuple

import numpy as np

from .errors import LogParseError, LogSchemaError

GROUPS = ("CLICK", "CONV", "CART")
LOG_HEADER = (
    "episode", "timestep", "opportunity_id", "ad_id", "group",
    "value", "quality", "msb",
)


@dataclass(frozen=True)
class ImpressionRecord:
    episode: int
    timestep: int
    opportunity_id: int
    ad_id: int
    group: str
    value: float
    quality: float
    msb: float


@dataclass(frozen=True)
class LogConfig:
    num_episodes: int = 10
    episode_length: int = 60
    opportunities_per_timestep: int = 20
    ads_per_group: int = 4
    seed: int = 0
    value_mu: Tuple[float, float, float] = (-1.2, -1.6, -1.4)
    value_sigma: float = 0.5
    quality_range: Tuple[float, float] = (0.9, 1.1)
    msb_scale: float = 2.0
    msb_noise: float = 0.1
    msb_cap: float = 5.0

    def __post_init__(self):
        for name in ("num_episodes", "episode_length",
                     "opportunities_per_timestep", "ads_per_group"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.value_sigma <= 0:
            raise ValueError("value_sigma must be > 0")
        qlo, qhi = self.quality_range
        if not (0 < qlo <= qhi):
            raise ValueError("quality_range must satisfy 0 < low <= high")
        if self.msb_scale <= 0 or self.msb_cap <= 0:
            raise ValueError("msb_scale and msb_cap must be > 0")


@dataclass
class LogTable:
    """Array view of a log: axes (episode, timestep, opportunity, ad column).

    Ad columns are grouped contiguously: group g owns columns
    [g * ads_per_group, (g + 1) * ads_per_group). ad_id equals the column
    index.
    """

    values: np.ndarray
    qualities: np.ndarray
    msbs: np.ndarray
    ads_per_group: int
    group_names: Tuple[str, ...] = GROUPS

    def __post_init__(self):
        if not (self.values.shape == self.qualities.shape == self.msbs.shape):
            raise ValueError("values, qualities, msbs must share a shape")
        if self.values.ndim != 4:
            raise ValueError("log arrays must be 4-d")
        expected = self.ads_per_group * len(self.group_names)
        if self.values.shape[3] != expected:
            raise ValueError(
                f"last axis must be {expected} ad columns, got {self.values.shape[3]}"
            )

    @property
    def num_episodes(self) -> int:
        return self.values.shape[0]

    @property
    def episode_length(self) -> int:
        return self.values.shape[1]

    @property
    def opportunities_per_timestep(self) -> int:
        return self.values.shape[2]

    @property
    def num_groups(self) -> int:
        return len(self.group_names)

    def group_of_column(self, column: int) -> int:
        return column // self.ads_per_group

    def group_columns(self, group_index: int) -> slice:
        lo = group_index * self.ads_per_group
        return slice(lo, lo + self.ads_per_group)


def generate_log(config: LogConfig) -> LogTable:
    """Draw a full synthetic log from the config's seed."""
    rng = np.random.default_rng(config.seed)
    n_groups = len(GROUPS)
    shape = (
        config.num_episodes,
        config.episode_length,
        config.opportunities_per_timestep,
        n_groups * config.ads_per_group,
    )
    values = np.empty(shape)
    for g in range(n_groups):
        cols = slice(g * config.ads_per_group, (g + 1) * config.ads_per_group)
        values[..., cols] = rng.lognormal(
            mean=config.value_mu[g],
            sigma=config.value_sigma,
            size=shape[:3] + (config.ads_per_group,),
        )
    qualities = rng.uniform(*config.quality_range, size=shape)
    noise = rng.normal(0.0, config.msb_noise, size=shape)
    msbs = np.clip(config.msb_scale * values * (1.0 + noise), 0.0, config.msb_cap)
    return LogTable(
        values=values,
        qualities=qualities,
        msbs=msbs,
        ads_per_group=config.ads_per_group,
    )


def iter_records(table: LogTable) -> Iterator[ImpressionRecord]:
    for e in range(table.num_episodes):
        for t in range(table.episode_length):
            for o in range(table.opportunities_per_timestep):
                for a in range(table.values.shape[3]):
                    yield ImpressionRecord(
                        episode=e,
                        timestep=t,
                        opportunity_id=o,
                        ad_id=a,
                        group=table.group_names[table.group_of_column(a)],
                        value=float(table.values[e, t, o, a]),
                        quality=float(table.qualities[e, t, o, a]),
                        msb=float(table.msbs[e, t, o, a]),
                    )


def write_log(path: str, table: LogTable) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_HEADER)
        for rec in iter_records(table):
            writer.writerow([
                rec.episode,
                rec.timestep,
                rec.opportunity_id,
                rec.ad_id,
                rec.group,
                f"{rec.value:.9g}",
                f"{rec.quality:.9g}",
                f"{rec.msb:.9g}",
            ])


def _parse_int(raw: str, line: int, column: str) -> int:
    try:
        v = int(raw)
    except ValueError:
        raise LogParseError(line, column, f"not an integer: {raw!r}") from None
    if v < 0:
        raise LogParseError(line, column, f"must be >= 0, got {v}")
    return v


def _parse_float(raw: str, line: int, column: str) -> float:
    try:
        v = float(raw)
    except ValueError:
        raise LogParseError(line, column, f"not a number: {raw!r}") from None
    if not np.isfinite(v) or v < 0:
        raise LogParseError(line, column, f"must be finite and >= 0, got {raw!r}")
    return v


def read_log(path: str) -> LogTable:
    """Parse a log CSV back into arrays, validating schema and structure.

    Raises LogSchemaError for a bad header or a non-rectangular log, and
    LogParseError (with line and column) for malformed cells.
    """
    records = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise LogSchemaError("empty log file") from None
        if tuple(header) != LOG_HEADER:
            raise LogSchemaError(
                f"bad header: expected {','.join(LOG_HEADER)}, got {','.join(header)}"
            )
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(LOG_HEADER):
                raise LogSchemaError(
                    f"line {line_no}: expected {len(LOG_HEADER)} fields, got {len(row)}"
                )
            group = row[4]
            if group not in GROUPS:
                raise LogParseError(line_no, "group", f"unknown group {group!r}")
            records.append(ImpressionRecord(
                episode=_parse_int(row[0], line_no, "episode"),
                timestep=_parse_int(row[1], line_no, "timestep"),
                opportunity_id=_parse_int(row[2], line_no, "opportunity_id"),
                ad_id=_parse_int(row[3], line_no, "ad_id"),
                group=group,
                value=_parse_float(row[5], line_no, "value"),
                quality=_parse_float(row[6], line_no, "quality"),
                msb=_parse_float(row[7], line_no, "msb"),
            ))
    if not records:
        raise LogSchemaError("log has a header but no rows")

    num_episodes = max(r.episode for r in records) + 1
    episode_length = max(r.timestep for r in records) + 1
    num_opps = max(r.opportunity_id for r in records) + 1
    num_ads = max(r.ad_id for r in records) + 1
    if num_ads % len(GROUPS) != 0:
        raise LogSchemaError(
            f"ad count {num_ads} is not divisible by {len(GROUPS)} groups"
        )
    ads_per_group = num_ads // len(GROUPS)
    expected_rows = num_episodes * episode_length * num_opps * num_ads
    if len(records) != expected_rows:
        raise LogSchemaError(
            f"log is not rectangular: {len(records)} rows, expected {expected_rows}"
        )
    shape = (num_episodes, episode_length, num_opps, num_ads)
    values = np.full(shape, -1.0)
    qualities = np.empty(shape)
    msbs = np.empty(shape)
    for rec in records:
        if rec.group != GROUPS[rec.ad_id // ads_per_group]:
            raise LogSchemaError(
                f"ad_id {rec.ad_id} labeled {rec.group!r}, expected "
                f"{GROUPS[rec.ad_id // ads_per_group]!r}"
            )
        idx = (rec.episode, rec.timestep, rec.opportunity_id, rec.ad_id)
        if values[idx] >= 0:
            raise LogSchemaError(f"duplicate row for {idx}")
        values[idx] = rec.value
        qualities[idx] = rec.quality
        msbs[idx] = rec.msb
    return LogTable(
        values=values,
        qualities=qualities,
        msbs=msbs,
        ads_per_group=ads_per_group,
    )
