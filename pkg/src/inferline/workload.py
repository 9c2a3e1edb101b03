"""Arrival traces: gamma and piecewise time-varying generators, statistics, file format."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from inferline.core import FORMAT_VERSION, PipelineSpec
from inferline.errors import ValidationError
from inferline.io import atomic_write_text

# purpose ids for independent random streams derived from one seed
STREAM_ARRIVALS = 0
STREAM_PATHS = 1


def rng_for(seed: int, purpose: int) -> np.random.Generator:
    """Counter-based generator for one purpose, split from the experiment seed."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, purpose])
    return np.random.Generator(np.random.Philox(ss))


@dataclass
class ArrivalTrace:
    arrivals: np.ndarray
    path_choices: np.ndarray
    branch_ids: tuple[str, ...] = ()
    seed: int = 0
    metadata: dict = field(default_factory=dict)
    # simultaneous arrivals are legal for hand-built estimator fixtures,
    # generated and file traces keep strict order
    allow_ties: bool = field(default=False, compare=False)

    def __post_init__(self) -> None:
        self.arrivals = np.asarray(self.arrivals, dtype=np.float64).reshape(-1)
        n = len(self.arrivals)
        self.branch_ids = tuple(self.branch_ids)
        self.path_choices = np.asarray(self.path_choices, dtype=np.int64).reshape(n, len(self.branch_ids))
        if n:
            if self.arrivals[0] < 0:
                raise ValidationError("first arrival must be at t >= 0")
            if not np.all(np.isfinite(self.arrivals)):
                raise ValidationError("arrival timestamps must be finite")
            gaps = np.diff(self.arrivals)
            if n > 1 and not (np.all(gaps >= 0) if self.allow_ties else np.all(gaps > 0)):
                raise ValidationError("arrival timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.arrivals)

    @property
    def duration(self) -> float:
        if "duration" in self.metadata:
            return float(self.metadata["duration"])
        return float(self.arrivals[-1]) if len(self) else 0.0

    def choices_for(self, spec: PipelineSpec) -> np.ndarray:
        """Path choices reordered to ``spec.branch_ids``; missing branch points raise."""
        if self.branch_ids == spec.branch_ids:
            return self.path_choices
        col = {b: i for i, b in enumerate(self.branch_ids)}
        missing = [b for b in spec.branch_ids if b not in col]
        if missing:
            raise ValidationError(f"trace has no path choices for branch points {missing}")
        return self.path_choices[:, [col[b] for b in spec.branch_ids]]

    def slice(self, start: float, stop: float) -> "ArrivalTrace":
        """Queries with ``start <= t < stop``."""
        lo, hi = np.searchsorted(self.arrivals, [start, stop], side="left")
        return ArrivalTrace(self.arrivals[lo:hi], self.path_choices[lo:hi], self.branch_ids, self.seed,
                            dict(self.metadata), self.allow_ties)

    @classmethod
    def from_times(cls, times: Sequence[float], spec: PipelineSpec | None = None,
                   choices: Sequence[Sequence[int]] | None = None) -> "ArrivalTrace":
        """Hand-built trace; ties allowed, choices default to "every conditional edge not taken"."""
        branch_ids = spec.branch_ids if spec is not None else ()
        if choices is None:
            choices = np.full((len(times), len(branch_ids)), -1, dtype=np.int64)
        return cls(np.asarray(times, dtype=np.float64), np.asarray(choices, dtype=np.int64), branch_ids,
                   allow_ties=True)


@dataclass(frozen=True)
class WorkloadStats:
    lam: float
    sigma: float
    cv: float
    n: int


def compute_stats(trace: ArrivalTrace | Sequence[float]) -> WorkloadStats:
    """Mean rate and CV = sigma^2 / mu^2 of the inter-arrival times (population variance)."""
    t = trace.arrivals if isinstance(trace, ArrivalTrace) else np.asarray(trace, dtype=np.float64)
    if len(t) < 2:
        raise ValidationError("need at least 2 arrivals to compute workload statistics")
    gaps = np.diff(t)
    mu = float(gaps.mean())
    sigma = float(gaps.std())
    return WorkloadStats(lam=1.0 / mu, sigma=sigma, cv=sigma**2 / mu**2, n=len(t))


def windowed_rates(arrivals: np.ndarray, width: float, start: float = 0.0, stop: float | None = None) -> np.ndarray:
    """Arrival counts per consecutive window of ``width`` seconds, divided by the width."""
    arrivals = np.asarray(arrivals)
    if stop is None:
        stop = float(arrivals[-1]) if len(arrivals) else start
    n_win = max(1, int(math.ceil((stop - start) / width)))
    edges = start + width * np.arange(n_win + 1)
    counts, _ = np.histogram(arrivals, bins=edges)
    return counts / width


def _make_strict(t: np.ndarray) -> np.ndarray:
    # tiny gamma shapes can underflow gaps to zero; nudge ties forward one ulp
    out = t.copy()
    for i in range(1, len(out)):
        if out[i] <= out[i - 1]:
            out[i] = np.nextafter(out[i - 1], np.inf)
    return out


def _ensure_strict(t: np.ndarray) -> np.ndarray:
    if len(t) > 1 and not np.all(np.diff(t) > 0):
        return _make_strict(t)
    return t


def sample_path_choices(spec: PipelineSpec | None, n: int, seed: int) -> np.ndarray:
    """One option index per (query, branch point), -1 when no conditional edge is taken."""
    if spec is None or not spec.branch_points:
        return np.zeros((n, 0), dtype=np.int64)
    rng = rng_for(seed, STREAM_PATHS)
    u = rng.random((n, len(spec.branch_points)))
    out = np.full(u.shape, -1, dtype=np.int64)
    for k, bp in enumerate(spec.branch_points):
        cum = np.cumsum(bp.probabilities)
        idx = np.searchsorted(cum, u[:, k], side="right")
        out[:, k] = np.where(idx < len(cum), idx, -1)
    return out


def _check_rate(lam: float, cv: float) -> None:
    if not (lam > 0 and math.isfinite(lam)):
        raise ValidationError(f"lambda must be positive, got {lam}")
    if not (cv > 0 and math.isfinite(cv)):
        raise ValidationError(f"cv must be positive, got {cv}")


def generate_gamma_trace(lam: float, cv: float, duration: float, seed: int,
                         spec: PipelineSpec | None = None) -> ArrivalTrace:
    """Stationary trace with gamma inter-arrivals, shape 1/cv and scale cv/lam."""
    _check_rate(lam, cv)
    if not duration > 0:
        raise ValidationError(f"duration must be positive, got {duration}")
    rng = rng_for(seed, STREAM_ARRIVALS)
    shape, scale = 1.0 / cv, cv / lam
    chunk = int(lam * duration * 1.05) + 64
    parts = []
    t_end = 0.0
    while t_end < duration:
        gaps = rng.gamma(shape, scale, size=chunk)
        times = t_end + np.cumsum(gaps)
        parts.append(times)
        t_end = float(times[-1])
        chunk = max(64, chunk // 4)
    t = np.concatenate(parts)
    t = _ensure_strict(t[t < duration])
    branch_ids = spec.branch_ids if spec is not None else ()
    meta = {"kind": "gamma", "lambda": lam, "cv": cv, "duration": duration}
    return ArrivalTrace(t, sample_path_choices(spec, len(t), seed), branch_ids, seed, meta)


def rate_schedule(segments: Sequence[tuple[float, float, float]], transition: float):
    """Breakpoints (time, lambda, cv) of the piecewise-linear schedule and its total length."""
    points = []
    t = 0.0
    for i, (lam, cv, hold) in enumerate(segments):
        if i > 0:
            t += transition
        points.append((t, lam, cv))
        t += hold
        points.append((t, lam, cv))
    return points, t


def _params_at(points, t: float) -> tuple[float, float]:
    for (t0, l0, c0), (t1, l1, c1) in zip(points, points[1:]):
        if t < t1 or (t1, l1, c1) == points[-1]:
            if t1 <= t0:
                return l1, c1
            w = min(1.0, max(0.0, (t - t0) / (t1 - t0)))
            return l0 + w * (l1 - l0), c0 + w * (c1 - c0)
    return points[-1][1], points[-1][2]


def generate_varying_trace(segments: Sequence[tuple[float, float, float]], transition: float, seed: int,
                           spec: PipelineSpec | None = None) -> ArrivalTrace:
    """Piecewise-stationary gamma trace; lambda and cv move linearly across each transition.

    Each segment is ``(lam, cv, hold_seconds)``. Every gap is drawn with the
    parameters in force at the previous arrival.
    """
    segments = [tuple(map(float, s)) for s in segments]
    if not segments:
        raise ValidationError("at least one segment is required")
    if transition < 0:
        raise ValidationError("transition must be nonnegative")
    for lam, cv, hold in segments:
        _check_rate(lam, cv)
        if not hold >= 0:
            raise ValidationError("segment hold must be nonnegative")
    if len(segments) == 1:
        lam, cv, hold = segments[0]
        trace = generate_gamma_trace(lam, cv, hold, seed, spec)
        trace.metadata.update({"kind": "varying", "segments": [list(segments[0])], "transition": transition})
        return trace
    points, total = rate_schedule(segments, transition)
    rng = rng_for(seed, STREAM_ARRIVALS)
    times = []
    t = 0.0
    while True:
        lam, cv = _params_at(points, t)
        t += float(rng.standard_gamma(1.0 / cv)) * cv / lam
        if t >= total:
            break
        times.append(t)
    arr = _ensure_strict(np.asarray(times, dtype=np.float64))
    branch_ids = spec.branch_ids if spec is not None else ()
    meta = {"kind": "varying", "segments": [list(s) for s in segments], "transition": transition,
            "duration": total}
    return ArrivalTrace(arr, sample_path_choices(spec, len(arr), seed), branch_ids, seed, meta)


# --------------------------------------------------------------------------
# File format: "# {json header}" line, then "timestamp,choice,..." rows
# --------------------------------------------------------------------------


def format_trace(trace: ArrivalTrace) -> str:
    header = {
        "format_version": FORMAT_VERSION,
        "seed": int(trace.seed),
        "branch_ids": list(trace.branch_ids),
        "n": len(trace),
        "metadata": trace.metadata,
    }
    lines = ["# " + json.dumps(header, sort_keys=True)]
    choices = trace.path_choices.tolist()
    for t, row in zip(trace.arrivals.tolist(), choices):
        lines.append(",".join([repr(t), *map(str, row)]))
    return "\n".join(lines) + "\n"


def write_trace(trace: ArrivalTrace, path: str | os.PathLike) -> None:
    atomic_write_text(path, format_trace(trace))


def parse_trace(text: str) -> ArrivalTrace:
    lines = text.splitlines()
    if not lines or not lines[0].startswith("#"):
        raise ValidationError("trace file must start with a '# {json}' header line")
    try:
        header = json.loads(lines[0][1:])
    except json.JSONDecodeError as exc:
        raise ValidationError(f"trace header is not valid JSON: {exc}") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise ValidationError(f"unsupported trace format_version {header.get('format_version')}")
    branch_ids = tuple(header.get("branch_ids", []))
    width = 1 + len(branch_ids)
    times, choices = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split(",")
        if len(fields) != width:
            raise ValidationError(f"trace line {lineno}: expected {width} fields, got {len(fields)}")
        try:
            times.append(float(fields[0]))
            choices.append([int(x) for x in fields[1:]])
        except ValueError:
            raise ValidationError(f"trace line {lineno}: malformed record") from None
    if "n" in header and header["n"] != len(times):
        raise ValidationError(f"trace header declares {header['n']} records, found {len(times)}")
    return ArrivalTrace(np.array(times, dtype=np.float64),
                        np.array(choices, dtype=np.int64).reshape(len(times), len(branch_ids)),
                        branch_ids, int(header.get("seed", 0)), dict(header.get("metadata", {})))


def read_trace(path: str | os.PathLike) -> ArrivalTrace:
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_trace(fh.read())
    except FileNotFoundError:
        raise ValidationError(f"file not found: {path}") from None
