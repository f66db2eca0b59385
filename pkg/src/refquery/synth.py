"""Deterministic synthetic households for desk-scale end-to-end runs.

Five appliance archetypes (cycling fridge, multi-state washer, spike
kettle, pulse microwave, multi-phase dishwasher) are scheduled so that
thresholding at 20 W plus the 60 s / 300 s cleaning rules recovers the
generator's own activation schedule exactly: every ON sample stays above
25 W, activations last at least 64 s, and OFF gaps between activations
last at least 320 s. Per-home jitter rescales powers and durations to
create a domain shift between homes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyInputError
from .timeseries import TimeSeries

PERIOD_S = 8.0
MIN_ON_SAMPLES = 8    # 64 s: survives the 60 s rule
MIN_GAP_SAMPLES = 40  # 320 s: never bridged by the 300 s rule
MIN_ON_WATTS = 25.0   # stays strictly above the 20 W threshold

ARCHETYPES = (
    "cycling-fridge",
    "multi-state-washer",
    "spike-kettle",
    "pulse-microwave",
    "multi-phase-dishwasher",
)


@dataclass(frozen=True)
class ApplianceSpec:
    """One appliance's behavior: ON phases and an inter-activation gap model.

    ``phases`` lists (watts, seconds) segments played in order during each
    activation. ``mean_off_s`` is the average OFF time between activations.
    """

    name: str
    archetype: str
    phases: tuple
    mean_off_s: float

    def __post_init__(self):
        if self.archetype not in ARCHETYPES:
            raise ValueError(f"unknown archetype {self.archetype!r}")
        for watts, seconds in self.phases:
            if watts <= MIN_ON_WATTS:
                raise ValueError(f"{self.name}: phase power {watts} W too close "
                                 f"to the activation threshold")
        total = sum(s for _, s in self.phases)
        if total < MIN_ON_SAMPLES * PERIOD_S:
            raise ValueError(f"{self.name}: activation of {total} s would be "
                             f"removed by mask cleaning")


def default_appliances() -> list[ApplianceSpec]:
    return [
        ApplianceSpec("fridge", "cycling-fridge",
                      ((110.0, 600.0),), mean_off_s=1500.0),
        ApplianceSpec("washer", "multi-state-washer",
                      ((2000.0, 720.0), (180.0, 1320.0), (450.0, 480.0)),
                      mean_off_s=28000.0),
        ApplianceSpec("kettle", "spike-kettle",
                      ((2400.0, 96.0),), mean_off_s=9600.0),
        ApplianceSpec("microwave", "pulse-microwave",
                      ((1250.0, 120.0),), mean_off_s=14000.0),
        ApplianceSpec("dishwasher", "multi-phase-dishwasher",
                      ((2100.0, 560.0), (130.0, 1120.0), (2100.0, 400.0),
                       (220.0, 560.0)), mean_off_s=40000.0),
    ]


@dataclass
class HomeSpec:
    appliances: list[ApplianceSpec] = field(default_factory=default_appliances)
    base_load: float = 60.0
    noise_std: float = 8.0
    duration_s: float = 3 * 86400.0
    seed: int = 0
    period: float = PERIOD_S
    power_jitter: float = 0.15
    duration_jitter: float = 0.20


@dataclass
class SynthHome:
    mains: TimeSeries
    appliances: dict[str, TimeSeries]
    noise: np.ndarray
    base_load: float
    schedule: dict[str, list[tuple[int, int]]]  # sample-index ON intervals
    seed: int


def _place_activations(spec: ApplianceSpec, n: int, period: float, rng,
                       power_scale: float, duration_scale: float):
    """Build one appliance's signal and its ON-interval schedule."""
    values = np.zeros(n)
    schedule = []
    # start each home at a random point of the appliance's OFF cycle
    pos = MIN_GAP_SAMPLES + int(rng.uniform(0, spec.mean_off_s / period))
    while True:
        # activation: per-event duration wobble on top of the home-level scale
        event_scale = duration_scale * rng.uniform(0.9, 1.1)
        seg_lens = [max(MIN_ON_SAMPLES // len(spec.phases) + 1,
                        int(round(sec * event_scale / period)))
                    for _, sec in spec.phases]
        start = pos
        end = start + sum(seg_lens)
        if end + 1 >= n:
            break
        cursor = start
        for (watts, _), seg in zip(spec.phases, seg_lens):
            level = watts * power_scale * rng.uniform(0.97, 1.03)
            wobble = rng.normal(0.0, 2.0, size=seg)
            values[cursor:cursor + seg] = np.maximum(level + wobble, MIN_ON_WATTS)
            cursor += seg
        schedule.append((start, end))
        # OFF gap: exponential around the mean, floored at the no-bridge gap
        off = rng.exponential(spec.mean_off_s) / period
        pos = end + max(MIN_GAP_SAMPLES, int(off))
    return values, schedule


def synth_home(spec: HomeSpec, min_samples: int = 599) -> SynthHome:
    """Generate mains and per-appliance ground truth for one home.

    mains = base load + sum of appliances + noise, with noise clipped so
    the mains never falls below the largest single appliance contribution.
    Deterministic per seed; composition is exact: mains - noise - base
    equals the appliance sum at every sample.
    """
    n = int(spec.duration_s / spec.period)
    if n < min_samples:
        raise EmptyInputError(
            f"duration {spec.duration_s} s gives {n} samples; need {min_samples}")
    seeds = np.random.SeedSequence(spec.seed).spawn(len(spec.appliances) + 1)
    noise_rng = np.random.default_rng(seeds[0])

    appliances = {}
    schedule = {}
    total = np.zeros(n)
    max_single = np.zeros(n)
    for child, appl in zip(seeds[1:], spec.appliances):
        rng = np.random.default_rng(child)
        power_scale = 1.0 + rng.uniform(-spec.power_jitter, spec.power_jitter)
        duration_scale = 1.0 + rng.uniform(-spec.duration_jitter, spec.duration_jitter)
        values, sched = _place_activations(appl, n, spec.period, rng,
                                           power_scale, duration_scale)
        appliances[appl.name] = TimeSeries(0.0, spec.period, values)
        schedule[appl.name] = sched
        total += values
        np.maximum(max_single, values, out=max_single)

    noise = noise_rng.normal(0.0, spec.noise_std, size=n) if spec.noise_std > 0 \
        else np.zeros(n)
    # keep mains >= the largest single contribution at each instant
    floor = max_single - spec.base_load - total
    noise = np.maximum(noise, floor)
    mains = spec.base_load + total + noise
    return SynthHome(TimeSeries(0.0, spec.period, mains), appliances, noise,
                     spec.base_load, schedule, spec.seed)


# ---------------------------------------------------------------------------
# CSV emission (same two-column format the ingestion path reads)

def write_home_dir(home: SynthHome, path):
    """Write mains.csv and one <appliance>.csv per appliance under ``path``."""
    import os

    os.makedirs(path, exist_ok=True)

    def dump(name, series):
        times = series.times()
        with open(os.path.join(path, f"{name}.csv"), "w", encoding="utf-8") as fh:
            fh.write("timestamp,watts\n")
            for t, v in zip(times, series.values):
                fh.write(f"{t:.0f},{float(v)!r}\n")

    dump("mains", home.mains)
    for name, series in home.appliances.items():
        dump(name, series)
