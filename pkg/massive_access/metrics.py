"""Metric accumulation, CSV persistence, aggregation and figure tables."""

import csv
import io
import logging
import math
from enum import Enum
from pathlib import Path
from typing import TYPE_CHECKING, Any, Dict, Iterable, List, Optional, Sequence, Tuple

import aiofiles  # type: ignore
import numpy as np
from pydantic import BaseModel
from tenacity import (
    retry,
    retry_if_exception_type,
    stop_after_attempt,
    wait_exponential,
)

from .errors import ExperimentIOError, MissingApproachError
from .models import Approach, EpisodeMetrics, LinkProfile, Service, SweepVariable

if TYPE_CHECKING:
    from .env import StepResult

logger = logging.getLogger(__name__)

METRIC_FIELDS = [
    "mean_ee",
    "success",
    "success_urllc",
    "success_normal",
    "mean_reward",
    "sinr_outage",
]
CELL_COLUMNS = [
    "phase",
    "index",
    *METRIC_FIELDS,
    "epsilon",
    "transfer_events",
    "coop_events",
    "outage_met",
]
EVENT_COLUMNS = ["slot", "agent", "event_type", "expert_id", "mu"]
AGGREGATE_COLUMNS = [
    "approach",
    "sweep",
    "value",
    "phase",
    "index",
    "n_seeds",
    *[f"{name}_{stat}" for name in METRIC_FIELDS for stat in ("mean", "se")],
]

FIGURE_SWEEPS = {
    4: SweepVariable.NONE,
    5: SweepVariable.RELIABILITY,
    6: SweepVariable.LATENCY,
    7: SweepVariable.ARRIVAL_RATE,
}
FIGURE_APPROACHES = {
    4: [Approach.PROPOSED, Approach.FULLY_DISTRIBUTED, Approach.RANDOM],
    5: list(Approach),
    6: list(Approach),
    7: list(Approach),
}
FIGURE_X_LABELS = {
    4: "episode",
    5: "reliability",
    6: "latency_ms",
    7: "arrival_rate",
}


def success_probability(
    indicators: np.ndarray,
    services: Sequence[Service],
    class_filter: Optional[Service] = None,
) -> float:
    """Share of link-slots with both failure indicators at zero.

    ``indicators`` has shape ``(slots, Z, 2)`` or ``(Z, 2)``.
    """
    flags = np.asarray(indicators)
    if flags.ndim == 2:
        flags = flags[None]
    selected = np.array(
        [class_filter is None or s is class_filter for s in services], dtype=bool
    )
    chosen = flags[:, selected, :]
    if chosen.shape[0] == 0 or chosen.shape[1] == 0:
        raise ValueError("No link-slot records to evaluate")
    return float(np.mean(chosen.sum(axis=2) == 0))


def convergence_episode(
    values: Sequence[float], fraction: float = 0.95, tail: float = 0.1
) -> int:
    """First episode whose running mean reaches ``fraction`` of the final level.

    The final level is the mean of the last ``tail`` share of episodes and the
    running mean spans as many episodes. Returns the last episode when the
    curve never gets there.
    """
    curve = np.asarray(values, dtype=float)
    if curve.size == 0:
        raise ValueError("No episodes to evaluate")
    span = max(1, int(round(curve.size * tail)))
    final = float(curve[-span:].mean())
    smoothed = np.convolve(curve, np.ones(span) / span, mode="valid")
    reached = np.flatnonzero(smoothed >= fraction * final)
    if reached.size == 0:
        return curve.size - 1
    return int(reached[0]) + span - 1


class EpisodeAccumulator:
    """Running sums for one training episode or evaluation window.

    With ``sinr_min`` given, URLLC link-slots also count toward an empirical
    SINR outage: idle, or below threshold on any used subchannel. The window
    meets ``outage_target`` when that share does not exceed it.
    """

    def __init__(
        self,
        services: Sequence[Service],
        sinr_min: Optional[Sequence[float]] = None,
        outage_target: Optional[float] = None,
    ):
        self._urllc = np.array([s is Service.URLLC for s in services], dtype=bool)
        self._normal = ~self._urllc
        self._sinr_min = (
            None if sinr_min is None else np.asarray(sinr_min, dtype=float)
        )
        self.outage_target = outage_target
        self.count = 0
        self._ee = 0.0
        self._reward = 0.0
        self._success = 0
        self._success_urllc = 0
        self._success_normal = 0
        self._outages = 0

    @classmethod
    def for_links(cls, profiles: Sequence[LinkProfile]) -> "EpisodeAccumulator":
        targets = [p.qos.p_outage_max for p in profiles if p.service is Service.URLLC]
        return cls(
            [p.service for p in profiles],
            sinr_min=[p.qos.sinr_min_linear for p in profiles],
            outage_target=min(targets, default=None),
        )

    def add(self, result: "StepResult") -> None:
        ok = result.indicators.sum(axis=1) == 0
        self.count += 1
        self._ee += result.network_ee
        self._reward += float(result.rewards.mean())
        self._success += int(ok.sum())
        self._success_urllc += int(ok[self._urllc].sum())
        self._success_normal += int(ok[self._normal].sum())
        if self._sinr_min is not None:
            used = result.assignment.rho > 0
            short = result.rates.sinr < self._sinr_min[:, None]
            outage = ~used.any(axis=1) | (used & short).any(axis=1)
            self._outages += int(outage[self._urllc].sum())

    def finish(
        self,
        index: int,
        epsilon: float = 0.0,
        transfer_events: int = 0,
        coop_events: int = 0,
    ) -> EpisodeMetrics:
        if self.count == 0:
            raise ValueError("No slots recorded")
        links = len(self._urllc)
        n_urllc = int(self._urllc.sum())
        n_normal = links - n_urllc
        outage = None
        if self._sinr_min is not None and n_urllc:
            outage = self._outages / (self.count * n_urllc)
        return EpisodeMetrics(
            index=index,
            mean_ee=self._ee / self.count,
            success=self._success / (self.count * links),
            success_urllc=(
                self._success_urllc / (self.count * n_urllc) if n_urllc else None
            ),
            success_normal=(
                self._success_normal / (self.count * n_normal) if n_normal else None
            ),
            mean_reward=self._reward / self.count,
            epsilon=epsilon,
            transfer_events=transfer_events,
            coop_events=coop_events,
            sinr_outage=outage,
            outage_met=(
                None
                if outage is None or self.outage_target is None
                else outage <= self.outage_target
            ),
        )


def format_value(value: Any) -> str:
    """CSV text; floats use ``repr`` so reruns are byte-identical."""
    if value is None:
        return ""
    if isinstance(value, Enum):
        return str(value.value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def rows_to_csv(columns: Sequence[str], rows: Iterable[Dict[str, Any]]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([format_value(row.get(c)) for c in columns])
    return buffer.getvalue()


def cell_rows(phase: str, metrics: Sequence[EpisodeMetrics]) -> List[Dict[str, Any]]:
    return [{"phase": phase, **m.model_dump()} for m in metrics]


def read_csv(path: Path) -> List[Dict[str, str]]:
    try:
        with open(path, newline="") as f:
            return list(csv.DictReader(f))
    except OSError as e:
        raise ExperimentIOError(path, e) from e


def _float_or_none(text: str) -> Optional[float]:
    return float(text) if text != "" else None


class MetricsWriter:
    """Writes CSV files asynchronously, retrying transient failures."""

    def __init__(self, output_dir: Path):
        self.output_dir = Path(output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)

    @retry(
        stop=stop_after_attempt(3),
        wait=wait_exponential(multiplier=0.1, min=0.1, max=1),
        retry=retry_if_exception_type(OSError),
        reraise=True,
    )
    async def _write_text(self, path: Path, text: str) -> None:
        async with aiofiles.open(path, "w", newline="") as f:
            await f.write(text)

    async def write_text(self, relative: str, text: str) -> Path:
        path = self.output_dir / relative
        path.parent.mkdir(parents=True, exist_ok=True)
        try:
            await self._write_text(path, text)
        except OSError as e:
            raise ExperimentIOError(path, e) from e
        logger.debug("Wrote %s", path)
        return path

    async def write_rows(
        self, relative: str, columns: Sequence[str], rows: Iterable[Dict[str, Any]]
    ) -> Path:
        return await self.write_text(relative, rows_to_csv(columns, rows))


def aggregate_rows(
    cells: Sequence[Tuple[Approach, SweepVariable, Optional[float], Path]],
) -> List[Dict[str, Any]]:
    """Across-seed mean and standard error for every (cell group, phase, index).

    ``cells`` lists one entry per seed file; entries sharing approach, sweep and
    value are pooled.
    """
    pooled: Dict[Tuple[Any, ...], List[Dict[str, str]]] = {}
    order: List[Tuple[Any, ...]] = []
    for approach, sweep, value, path in cells:
        for row in read_csv(path):
            key = (approach, sweep, value, row["phase"], int(row["index"]))
            if key not in pooled:
                pooled[key] = []
                order.append(key)
            pooled[key].append(row)

    out = []
    for key in order:
        rows = pooled[key]
        approach, sweep, value, phase, index = key
        record: Dict[str, Any] = {
            "approach": approach,
            "sweep": sweep,
            "value": value,
            "phase": phase,
            "index": index,
            "n_seeds": len(rows),
        }
        for name in METRIC_FIELDS:
            samples = [_float_or_none(r[name]) for r in rows]
            if any(s is None for s in samples):
                record[f"{name}_mean"] = None
                record[f"{name}_se"] = None
                continue
            values = np.array(samples, dtype=float)
            record[f"{name}_mean"] = float(values.mean())
            record[f"{name}_se"] = (
                float(values.std(ddof=1) / math.sqrt(len(values)))
                if len(values) > 1
                else 0.0
            )
        out.append(record)
    return out


class FigureTable(BaseModel):
    """Plot-ready columns: the x axis followed by one column per series."""

    figure_id: int
    x_label: str
    columns: List[str]
    rows: List[List[Optional[float]]]

    def to_csv(self) -> str:
        data = [dict(zip(self.columns, row)) for row in self.rows]
        return rows_to_csv(self.columns, data)


def figure_tables(aggregate_path: Path, figure_id: int) -> FigureTable:
    """Select and pivot ``aggregate.csv`` rows into one figure's table."""
    if figure_id not in FIGURE_SWEEPS:
        raise ValueError(f"Unknown figure {figure_id}; choose from 4, 5, 6, 7")
    sweep = FIGURE_SWEEPS[figure_id]
    required = FIGURE_APPROACHES[figure_id]
    rows = [r for r in read_csv(aggregate_path) if r["sweep"] == sweep.value]

    if figure_id == 4:
        rows = [r for r in rows if r["phase"] == "train"]
        series: Dict[Approach, Dict[int, float]] = {a: {} for a in required}
        for r in rows:
            if r["approach"] in {a.value for a in required}:
                series[Approach(r["approach"])][int(r["index"])] = float(
                    r["mean_ee_mean"]
                )
        missing = [a.value for a in required if not series[a]]
        if missing:
            raise MissingApproachError(figure_id, missing)
        xs = sorted({x for values in series.values() for x in values})
        columns = ["episode", *[f"{a.value}_ee" for a in required]]
        table = [[float(x), *[series[a].get(x) for a in required]] for x in xs]
        return FigureTable(figure_id=4, x_label="episode", columns=columns, rows=table)

    rows = [r for r in rows if r["phase"] == "eval"]
    per_point: Dict[Approach, Dict[float, Dict[str, List[float]]]] = {
        a: {} for a in required
    }
    for r in rows:
        approach = Approach(r["approach"])
        if approach not in per_point:
            continue
        point = per_point[approach].setdefault(
            float(r["value"]), {"ee": [], "success": []}
        )
        point["ee"].append(float(r["mean_ee_mean"]))
        point["success"].append(float(r["success_mean"]))
    missing = [a.value for a in required if not per_point[a]]
    if missing:
        raise MissingApproachError(figure_id, missing)

    xs = sorted({x for points in per_point.values() for x in points})
    columns = [FIGURE_X_LABELS[figure_id]]
    for a in required:
        columns += [f"{a.value}_ee", f"{a.value}_success"]
    table = []
    for x in xs:
        row: List[Optional[float]] = [x]
        for a in required:
            point = per_point[a].get(x)
            if point is None:
                row += [None, None]
            else:
                row += [float(np.mean(point["ee"])), float(np.mean(point["success"]))]
        table.append(row)
    return FigureTable(
        figure_id=figure_id,
        x_label=FIGURE_X_LABELS[figure_id],
        columns=columns,
        rows=table,
    )
