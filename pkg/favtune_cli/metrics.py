"""Similarity metrics between two pieces.

D_A metrics average the overlapped area (min-sum) of per-bar class histograms;
PS counts interval windows of a candidate that also occur in a reference.
"""
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.stats import kendalltau

from favtune_cli.errors import BinMismatch, DegenerateInput, LengthMismatch, TooShort
from favtune_cli.midi_io import BarGrid, Score, note_sort_key, select_melody_track
from favtune_cli.remi_codec import EventFamily, SelectedEventStream, encode, selected_stream

logger = logging.getLogger(__name__)

INTERVAL_RANGE = 12


class Metric(str, Enum):
    PITCH_CLASS = "PitchClass"
    NOTE = "Note"
    DURATION = "Duration"
    IOI = "IOI"

    @property
    def bins(self) -> int:
        return {"PitchClass": 12, "Note": 128, "Duration": 32, "IOI": 32}[self.value]

    @property
    def report_name(self) -> str:
        return {"PitchClass": "D_P", "Note": "D_N", "Duration": "D_D", "IOI": "D_IOI"}[self.value]


@dataclass(frozen=True)
class Histogram:
    counts: np.ndarray

    @property
    def empty(self) -> bool:
        return not self.counts.any()

    @property
    def normalized(self) -> bool:
        return not self.empty

    @property
    def bins(self) -> np.ndarray:
        total = self.counts.sum()
        return self.counts / total if total else np.zeros(len(self.counts))

    def __len__(self):
        return len(self.counts)


def _steps(ticks: int, ticks_per_quarter: int) -> int:
    """ticks in 32nd notes, nearest"""
    return (16 * ticks + ticks_per_quarter) // (2 * ticks_per_quarter)


def _note_values(score: Score, track: int, metric: Metric) -> List[Tuple[int, int]]:
    """(onset tick, bin) per contributing note"""
    notes = sorted(score.tracks[track].notes, key=note_sort_key)
    tpq = score.ticks_per_quarter
    if metric is Metric.PITCH_CLASS:
        return [(n.start_tick, n.pitch % 12) for n in notes]
    if metric is Metric.NOTE:
        return [(n.start_tick, n.pitch) for n in notes]
    if metric is Metric.DURATION:
        return [(n.start_tick, min(32, max(1, _steps(n.duration_ticks, tpq))) - 1) for n in notes]
    # IOI goes to the bar of the earlier note; the last note has none
    return [
        (a.start_tick, min(31, max(0, _steps(b.start_tick - a.start_tick, tpq))))
        for a, b in zip(notes, notes[1:])
    ]


def bar_histograms(score: Score, track: int, metric: Union[Metric, str]) -> List[Histogram]:
    """One histogram per bar up to the bar of the track's last onset"""
    metric = Metric(metric)
    notes = score.tracks[track].notes
    if not notes:
        return []
    grid = BarGrid.of(score)
    n_bars = grid.index_of(max(n.start_tick for n in notes)) + 1
    counts = np.zeros((n_bars, metric.bins), dtype=np.int64)
    for onset, value in _note_values(score, track, metric):
        counts[grid.index_of(onset), value] += 1
    return [Histogram(row) for row in counts]


def piece_histogram(score: Score, track: int, metric: Union[Metric, str]) -> Histogram:
    metric = Metric(metric)
    counts = np.zeros(metric.bins, dtype=np.int64)
    for _, value in _note_values(score, track, metric):
        counts[value] += 1
    return Histogram(counts)


def melodic_interval_histogram(score: Score, track: int) -> Histogram:
    """Successive pitch steps in semitones, clamped to -12..+12 (25 bins)"""
    notes = sorted(score.tracks[track].notes, key=note_sort_key)
    counts = np.zeros(2 * INTERVAL_RANGE + 1, dtype=np.int64)
    for a, b in zip(notes, notes[1:]):
        step = min(INTERVAL_RANGE, max(-INTERVAL_RANGE, b.pitch - a.pitch))
        counts[step + INTERVAL_RANGE] += 1
    return Histogram(counts)


def overlapped_area(p: Histogram, q: Histogram) -> float:
    if len(p) != len(q):
        raise BinMismatch(f"{len(p)} bins vs {len(q)} bins")
    return float(np.minimum(p.bins, q.bins).sum())


@dataclass
class DMetricResult:
    value: float
    mode: str  # "per_bar" or "pooled"
    rows: List[Tuple[int, int, Optional[int], float]] = field(default_factory=list)


def _default_pairs(a: Score, b: Score) -> List[Tuple[int, int]]:
    return [(select_melody_track(a), select_melody_track(b))]


def compare(
    a: Score, b: Score, metric: Union[Metric, str], tracks: Optional[Sequence[Tuple[int, int]]] = None
) -> DMetricResult:
    """Mean OA over paired bars, or over pooled per-track histograms when bar counts differ"""
    metric = Metric(metric)
    pairs = list(tracks) if tracks is not None else _default_pairs(a, b)
    per_track = [(ta, tb, bar_histograms(a, ta, metric), bar_histograms(b, tb, metric)) for ta, tb in pairs]

    if all(len(ha) == len(hb) for _, _, ha, hb in per_track):
        rows = [
            (ta, tb, bar, overlapped_area(pa, pb))
            for ta, tb, ha, hb in per_track
            for bar, (pa, pb) in enumerate(zip(ha, hb))
            if not pa.empty and not pb.empty
        ]
        mode = "per_bar"
    else:
        rows = []
        for ta, tb, _, _ in per_track:
            pa, pb = piece_histogram(a, ta, metric), piece_histogram(b, tb, metric)
            if not pa.empty and not pb.empty:
                rows.append((ta, tb, None, overlapped_area(pa, pb)))
        mode = "pooled"
    value = float(np.mean([r[3] for r in rows])) if rows else math.nan
    if not rows:
        logger.warning("%s undefined: no comparable non-empty histograms", metric.report_name)
    return DMetricResult(value=value, mode=mode, rows=rows)


def d_metric(
    a: Score, b: Score, metric: Union[Metric, str], tracks: Optional[Sequence[Tuple[int, int]]] = None
) -> float:
    return compare(a, b, metric, tracks).value


def _values(stream: Union[SelectedEventStream, Sequence[int]]) -> Tuple[int, ...]:
    return stream.classes if isinstance(stream, SelectedEventStream) else tuple(stream)


def intervals(values: Sequence[int]) -> List[int]:
    return [b - a for a, b in zip(values, values[1:])]


def pattern_similarity(
    x: Union[SelectedEventStream, Sequence[int]],
    y_hat: Union[SelectedEventStream, Sequence[int]],
    p: int,
    normalized: bool = False,
) -> float:
    """Share of (p+1)-interval windows of y_hat that occur contiguously in x's intervals.

    By default windows start at 1..z-2-p and the count is divided by
    z-p, so PS(x, x) < 1. With `normalized` every window is scored and
    the count is divided by the number of windows.
    """
    if p < 1:
        raise ValueError("pattern length p must be >= 1")
    ix, iy = intervals(_values(x)), intervals(_values(y_hat))
    z = len(iy) + 1
    if z <= p + 1:
        raise TooShort(f"candidate has {z} values; need more than {p + 1} for p={p}")
    width = p + 1
    reference = {tuple(ix[i:i + width]) for i in range(len(ix) - width + 1)}
    n_windows = z - 1 - p if normalized else z - 2 - p
    match = sum(1 for s in range(n_windows) if tuple(iy[s:s + width]) in reference)
    return match / (n_windows if normalized else z - p)


def kendall_tau(x: Sequence[float], y: Sequence[float]) -> Tuple[float, float]:
    """Tau-b and its two-sided p-value (exact for n <= 10 without ties)"""
    if len(x) != len(y):
        raise LengthMismatch(f"{len(x)} values vs {len(y)} values")
    if len(x) < 2:
        raise DegenerateInput("need at least 2 pairs")
    if len(set(x)) == 1 or len(set(y)) == 1:
        raise DegenerateInput("all values tied in one of the lists")
    ties = len(set(x)) < len(x) or len(set(y)) < len(y)
    method = "exact" if len(x) <= 10 and not ties else "asymptotic"
    tau, p_value = kendalltau(x, y, variant="b", method=method)
    return float(tau), float(p_value)


@dataclass
class SimilarityReport:
    d_p: float
    d_n: float
    d_d: float
    d_ioi: float
    interval_oa: float
    ps_by_p: Dict[int, float]
    details: Dict[str, DMetricResult] = field(default_factory=dict)


def evaluate(
    reference: Score,
    candidate: Score,
    ps_lengths: Iterable[int] = (2, 3, 4, 5),
    selected: Iterable[EventFamily] = (EventFamily.NOTE_ON,),
    normalized: bool = False,
    tracks: Optional[Sequence[Tuple[int, int]]] = None,
) -> SimilarityReport:
    """All metrics of `candidate` against `reference` (melody tracks unless `tracks` is given)"""
    pairs = list(tracks) if tracks is not None else _default_pairs(reference, candidate)
    details = {m.report_name: compare(reference, candidate, m, pairs) for m in Metric}
    ta, tb = pairs[0]
    interval_oa = overlapped_area(
        melodic_interval_histogram(reference, ta), melodic_interval_histogram(candidate, tb)
    )

    selected = tuple(selected)
    x = selected_stream(encode(reference, ta), selected)
    y_hat = selected_stream(encode(candidate, tb), selected)
    ps_by_p = {}
    for p in ps_lengths:
        try:
            ps_by_p[p] = pattern_similarity(x, y_hat, p, normalized)
        except TooShort as e:
            logger.warning("PS undefined for p=%d: %s", p, e)
            ps_by_p[p] = math.nan
    return SimilarityReport(
        d_p=details["D_P"].value,
        d_n=details["D_N"].value,
        d_d=details["D_D"].value,
        d_ioi=details["D_IOI"].value,
        interval_oa=interval_oa,
        ps_by_p=ps_by_p,
        details=details,
    )


def report_rows(report: SimilarityReport) -> List[Dict[str, object]]:
    """Flat records: one per metric value, then one per compared bar"""
    rows: List[Dict[str, object]] = [
        {"metric": "D_P", "value": report.d_p},
        {"metric": "D_N", "value": report.d_n},
        {"metric": "D_D", "value": report.d_d},
        {"metric": "D_IOI", "value": report.d_ioi},
        {"metric": "OA_interval", "value": report.interval_oa},
    ]
    rows += [{"metric": f"PS_p{p}", "value": v} for p, v in sorted(report.ps_by_p.items())]
    for name, result in report.details.items():
        for ta, tb, bar, oa in result.rows:
            rows.append({"metric": name, "value": oa, "track_a": ta, "track_b": tb,
                         "bar": "" if bar is None else bar, "mode": result.mode})
    return rows


def histogram_rows(score: Score, track: int, label: str) -> List[Dict[str, object]]:
    """Non-zero per-bar histogram bins for plotting"""
    rows = []
    for metric in Metric:
        for bar, hist in enumerate(bar_histograms(score, track, metric)):
            for b in np.flatnonzero(hist.counts):
                rows.append({"piece": label, "metric": metric.value, "bar": bar, "bin": int(b),
                             "value": float(hist.bins[b])})
    return rows
