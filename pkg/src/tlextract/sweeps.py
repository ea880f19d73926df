"""Noise-robustness sweeps for the detector and the trace classifiers.

Protocol: take a clean simulated trace, perturb n random kernels' durations
by a fixed amplitude, and measure how often the consumer still gets the
right answer — sweeping n at fixed amplitude, and amplitude at fixed n.
Each sweep point aggregates many independent trials (fresh trace jitter and
fresh noise placement per trial), so accuracies carry ~1/sqrt(trials)
sampling error; the curves are expected to decay slowly and monotonically
within that error.
"""

from __future__ import annotations

from dataclasses import dataclass

from .archextract import detect_period
from .cnn import CnnModel, predict
from .finetune import ArchSpec
from .raster import rasterize
from .rng import stream
from .tracesim import build_profile, gen_trace, inject_noise

DEFAULT_N_VALUES = (1, 2, 4, 8, 16, 32, 64)
DEFAULT_AMPLITUDES = (5.0, 10.0, 15.0, 20.0, 25.0, 30.0, 35.0, 40.0, 45.0)
DEFAULT_AMPLITUDE_US = 20.0
DEFAULT_FIXED_N = 16


@dataclass
class SweepPoint:
    n_kernels: int
    amplitude_us: float
    trials: int
    correct: int

    @property
    def accuracy(self) -> float:
        return self.correct / self.trials if self.trials else 0.0

    def to_json_dict(self) -> dict:
        return {"n_kernels": self.n_kernels,
                "amplitude_us": self.amplitude_us,
                "trials": self.trials,
                "accuracy": self.accuracy}


def _noise_grid(n_values, amplitudes, fixed_n, fixed_amplitude):
    grid = [(n, fixed_amplitude) for n in n_values]
    grid += [(fixed_n, a) for a in amplitudes if (fixed_n, a) not in grid]
    return grid


def _trial_seed(seed: int, n: int, amp: float, trial: int) -> int:
    return int(stream(seed, "sweep", f"{n}-{amp}-{trial}").raw(1)[0] >> 33)


def sweep_detector(vendor: str, framework: str, arch: ArchSpec,
                   trials: int = 50, seed: int = 0,
                   n_values=DEFAULT_N_VALUES,
                   amplitudes=DEFAULT_AMPLITUDES,
                   fixed_n: int = DEFAULT_FIXED_N,
                   fixed_amplitude: float = DEFAULT_AMPLITUDE_US
                   ) -> list[SweepPoint]:
    """Encoder-count recovery accuracy vs injected timing noise."""
    points = []
    for n, amp in _noise_grid(n_values, amplitudes, fixed_n,
                              fixed_amplitude):
        correct = 0
        for t in range(trials):
            s = _trial_seed(seed, n, amp, t)
            profile = build_profile(vendor, framework, arch, seed=s)
            trace = gen_trace(profile, seed=s + 1)
            noisy = inject_noise(trace, n, amp, seed=s + 2)
            if detect_period(noisy).count == arch.encoder_count:
                correct += 1
        points.append(SweepPoint(n, amp, trials, correct))
    return points


def sweep_classifier(model: CnnModel, task: str, cases,
                     trials: int = 50, seed: int = 0,
                     n_values=DEFAULT_N_VALUES,
                     amplitudes=DEFAULT_AMPLITUDES,
                     fixed_n: int = DEFAULT_FIXED_N,
                     fixed_amplitude: float = DEFAULT_AMPLITUDE_US
                     ) -> list[SweepPoint]:
    """Classifier accuracy vs injected timing noise.

    `cases` is a list of (vendor, framework, arch) triples; trials cycle
    through them so every sweep point sees the same case mix."""
    cases = list(cases)
    points = []
    for n, amp in _noise_grid(n_values, amplitudes, fixed_n,
                              fixed_amplitude):
        correct = 0
        for t in range(trials):
            vendor, framework, arch = cases[t % len(cases)]
            s = _trial_seed(seed, n, amp, t)
            profile = build_profile(vendor, framework, arch, seed=s)
            trace = gen_trace(profile, seed=s + 1)
            noisy = inject_noise(trace, n, amp, seed=s + 2)
            image = rasterize(noisy)
            if predict(model, image) == image.label(task):
                correct += 1
        points.append(SweepPoint(n, amp, trials, correct))
    return points


def nonincreasing_within(points: list[SweepPoint], slack: float) -> bool:
    """True when accuracy never rises by more than `slack` as noise grows.

    Checks the n-sweep (fixed amplitude) and the amplitude-sweep (fixed n)
    separately, each ordered by its own noise axis."""
    by_amp: dict[float, list[SweepPoint]] = {}
    by_n: dict[int, list[SweepPoint]] = {}
    for p in points:
        by_amp.setdefault(p.amplitude_us, []).append(p)
        by_n.setdefault(p.n_kernels, []).append(p)
    curves = [sorted(ps, key=lambda p: p.n_kernels)
              for ps in by_amp.values() if len(ps) > 1]
    curves += [sorted(ps, key=lambda p: p.amplitude_us)
               for ps in by_n.values() if len(ps) > 1]
    for curve in curves:
        for prev, cur in zip(curve, curve[1:]):
            if cur.accuracy > prev.accuracy + slack:
                return False
    return True
