"""Displacement errors and Mahalanobis-based calibration statistics.

PPEI_a is the fraction of ground-truth points whose Mahalanobis distance under
the predicted Gaussian is strictly below ``a``.  For a calibrated bi-variate
Gaussian the squared distance is chi-square with two degrees of freedom, so the
ideal values are 1 - exp(-a^2 / 2) and the ideal median distance is
sqrt(2 ln 2).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .covnet import PredictedDistribution
from .gauss import mahalanobis_arrays

PPEI1_IDEAL = 1.0 - math.exp(-0.5)
PPEI3_IDEAL = 1.0 - math.exp(-4.5)
MD_MEDIAN_IDEAL = math.sqrt(2.0 * math.log(2.0))


@dataclass
class EvalRecord:
    pred: PredictedDistribution
    truth: np.ndarray  # (T, 2)

    def __post_init__(self):
        self.truth = np.asarray(self.truth, dtype=np.float64)
        if len(self.pred) != len(self.truth):
            raise ValueError(f"horizon mismatch: {len(self.pred)} predictions vs {len(self.truth)} truths")


@dataclass
class _Arrays:
    mu: np.ndarray
    sx: np.ndarray
    sy: np.ndarray
    rho: np.ndarray
    truth: np.ndarray


def _stack(records: Sequence[EvalRecord]) -> _Arrays:
    if not records:
        raise ValueError("no evaluation records")
    horizon = len(records[0].truth)
    if any(len(r.truth) != horizon for r in records):
        raise ValueError("records have different horizons")
    mu = np.array([[(g.mu.x, g.mu.y) for g in r.pred] for r in records])
    sx = np.array([[g.sigma_x for g in r.pred] for r in records])
    sy = np.array([[g.sigma_y for g in r.pred] for r in records])
    rho = np.array([[g.rho for g in r.pred] for r in records])
    truth = np.stack([r.truth for r in records])
    return _Arrays(mu, sx, sy, rho, truth)


def records_from_arrays(mu, sx, sy, rho, truth) -> list[EvalRecord]:
    """Build records from arrays of shape (N, T, 2) / (N, T)."""
    from .covnet import assemble

    sigma = np.stack([np.asarray(sx), np.asarray(sy)], axis=-1)
    return [EvalRecord(assemble(m, s, r), t) for m, s, r, t in zip(mu, sigma, rho, truth)]


def _displacements(a: _Arrays) -> np.ndarray:
    return np.linalg.norm(a.truth - a.mu, axis=-1)


def ade(records: Sequence[EvalRecord]) -> tuple[list[float], float]:
    per_step = _displacements(_stack(records)).mean(axis=0)
    return per_step.tolist(), float(per_step.mean())


def fde(records: Sequence[EvalRecord]) -> float:
    return float(_displacements(_stack(records)).mean(axis=0)[-1])


def _md(a: _Arrays) -> np.ndarray:
    return mahalanobis_arrays(a.mu, a.sx, a.sy, a.rho, a.truth)


@dataclass
class PpeiResult:
    alpha: float
    per_step: list[float]
    mean: float
    std: float


def ppei(records: Sequence[EvalRecord], alpha: float) -> PpeiResult:
    """Per-step fraction inside the ``alpha`` ellipse; mean/std are taken across steps."""
    inside = _md(_stack(records)) < alpha
    per_step = inside.mean(axis=0)
    return PpeiResult(alpha, per_step.tolist(), float(per_step.mean()), float(per_step.std()))


@dataclass
class MdStats:
    p25: list[float]
    p50: list[float]
    p75: list[float]
    pooled_median: float


def md_stats(records: Sequence[EvalRecord]) -> MdStats:
    md = _md(_stack(records))
    q = np.percentile(md, [25, 50, 75], axis=0)
    return MdStats(q[0].tolist(), q[1].tolist(), q[2].tolist(), float(np.median(md)))


@dataclass
class CalibrationReport:
    n_records: int
    ade_per_step: list[float]
    ppei1_per_step: list[float]
    ppei3_per_step: list[float]
    md_p25: list[float]
    md_p50: list[float]
    md_p75: list[float]
    ade: float
    fde: float
    ppei1_mean: float
    ppei1_std: float
    ppei3_mean: float
    ppei3_std: float
    md_median: float
    expected: dict = field(default_factory=lambda: {
        "ppei1": PPEI1_IDEAL, "ppei3": PPEI3_IDEAL, "md_median": MD_MEDIAN_IDEAL,
    })
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for a, b in zip(self.ppei1_per_step, self.ppei3_per_step):
            if not (0.0 <= a <= b <= 1.0):
                raise ValueError("PPEI values must satisfy 0 <= ppei1 <= ppei3 <= 1")

    @property
    def deltas(self) -> dict:
        return {
            "ppei1": self.ppei1_mean - PPEI1_IDEAL,
            "ppei3": self.ppei3_mean - PPEI3_IDEAL,
            "md_median": self.md_median - MD_MEDIAN_IDEAL,
        }

    @property
    def horizon(self) -> int:
        return len(self.ade_per_step)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["deltas"] = self.deltas
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationReport":
        d = {k: v for k, v in d.items() if k != "deltas"}
        return cls(**d)

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def read_json(cls, path) -> "CalibrationReport":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def step_rows(self) -> list[dict]:
        return [
            {"t": t + 1, "ade": self.ade_per_step[t], "ppei1": self.ppei1_per_step[t],
             "ppei3": self.ppei3_per_step[t], "md_p25": self.md_p25[t], "md_p50": self.md_p50[t],
             "md_p75": self.md_p75[t]}
            for t in range(self.horizon)
        ]

    def write_csv(self, path) -> None:
        _write_rows(path, self.step_rows())

    def summary_table(self) -> str:
        d = self.deltas
        return "\n".join([
            f"windows          {self.n_records}",
            f"ADE / FDE [m]    {self.ade:.3f} / {self.fde:.3f}",
            f"PPEI1 [%]        {100 * self.ppei1_mean:.1f} +- {100 * self.ppei1_std:.1f}  "
            f"(ideal {100 * PPEI1_IDEAL:.2f}, delta {100 * d['ppei1']:+.1f})",
            f"PPEI3 [%]        {100 * self.ppei3_mean:.1f} +- {100 * self.ppei3_std:.1f}  "
            f"(ideal {100 * PPEI3_IDEAL:.2f}, delta {100 * d['ppei3']:+.1f})",
            f"median MD        {self.md_median:.3f}  (ideal {MD_MEDIAN_IDEAL:.4f}, delta {d['md_median']:+.3f})",
        ])


def _write_rows(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in row.items()})


def build_report(records: Sequence[EvalRecord], meta: dict | None = None) -> CalibrationReport:
    ade_steps, ade_mean = ade(records)
    p1, p3 = ppei(records, 1.0), ppei(records, 3.0)
    md = md_stats(records)
    return CalibrationReport(
        n_records=len(records),
        ade_per_step=ade_steps,
        ppei1_per_step=p1.per_step,
        ppei3_per_step=p3.per_step,
        md_p25=md.p25,
        md_p50=md.p50,
        md_p75=md.p75,
        ade=ade_mean,
        fde=fde(records),
        ppei1_mean=p1.mean,
        ppei1_std=p1.std,
        ppei3_mean=p3.mean,
        ppei3_std=p3.std,
        md_median=md.pooled_median,
        meta=dict(meta or {}),
    )


def write_curves(report: CalibrationReport, out_dir) -> dict[str, Path]:
    """Per-step curve files plus an SVG of both panels."""
    out_dir = Path(out_dir)
    paths = {
        "ppei_csv": out_dir / "ppei_curve.csv",
        "md_csv": out_dir / "md_curve.csv",
        "svg": out_dir / "curves.svg",
    }
    _write_rows(paths["ppei_csv"], [
        {"t": t + 1, "ppei1": report.ppei1_per_step[t], "ppei3": report.ppei3_per_step[t]}
        for t in range(report.horizon)
    ])
    _write_rows(paths["md_csv"], [
        {"t": t + 1, "md_p25": report.md_p25[t], "md_p50": report.md_p50[t], "md_p75": report.md_p75[t],
         "ade": report.ade_per_step[t]}
        for t in range(report.horizon)
    ])
    paths["svg"].write_text(render_svg(report))
    return paths


def _polyline(xs, ys, x0, y0, w, h, xmax, ymax, color, dash=""):
    pts = " ".join(f"{x0 + w * (x - 1) / max(xmax - 1, 1):.2f},{y0 + h - h * y / ymax:.2f}" for x, y in zip(xs, ys))
    extra = f' stroke-dasharray="{dash}"' if dash else ""
    return f'<polyline fill="none" stroke="{color}" stroke-width="2"{extra} points="{pts}"/>'


def render_svg(report: CalibrationReport) -> str:
    """Static two-panel plot: PPEI vs horizon, Mahalanobis percentiles and ADE vs horizon."""
    T = report.horizon
    ts = list(range(1, T + 1))
    W, H, pad = 360, 240, 40
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{2 * W}" height="{H}" font-family="sans-serif" font-size="11">']

    def frame(ox, title, ymax):
        parts.append(f'<rect x="{ox + pad}" y="{pad / 2}" width="{W - 1.5 * pad}" height="{H - 1.5 * pad}" fill="none" stroke="#888"/>')
        parts.append(f'<text x="{ox + pad}" y="{pad / 2 - 5}">{title}</text>')
        parts.append(f'<text x="{ox + 2}" y="{pad / 2 + 8}">{ymax:.2g}</text>')
        parts.append(f'<text x="{ox + 2}" y="{H - pad}">0</text>')
        parts.append(f'<text x="{ox + W / 2}" y="{H - 5}">horizon step (1..{T})</text>')

    pw, ph = W - 1.5 * pad, H - 1.5 * pad
    frame(0, "PPEI (solid) vs ideal (dashed)", 1.0)
    parts.append(_polyline(ts, report.ppei1_per_step, pad, pad / 2, pw, ph, T, 1.0, "#1f77b4"))
    parts.append(_polyline(ts, report.ppei3_per_step, pad, pad / 2, pw, ph, T, 1.0, "#2ca02c"))
    parts.append(_polyline(ts, [PPEI1_IDEAL] * T, pad, pad / 2, pw, ph, T, 1.0, "#1f77b4", "4 3"))
    parts.append(_polyline(ts, [PPEI3_IDEAL] * T, pad, pad / 2, pw, ph, T, 1.0, "#2ca02c", "4 3"))

    ymax = max([*report.md_p75, *report.ade_per_step, MD_MEDIAN_IDEAL, 1e-9]) * 1.1
    frame(W, "Mahalanobis p25/p50/p75 (red), ADE (blue)", ymax)
    for series, dash in ((report.md_p25, "2 2"), (report.md_p50, ""), (report.md_p75, "2 2")):
        parts.append(_polyline(ts, series, W + pad, pad / 2, pw, ph, T, ymax, "#d62728", dash))
    parts.append(_polyline(ts, [MD_MEDIAN_IDEAL] * T, W + pad, pad / 2, pw, ph, T, ymax, "#d62728", "6 3"))
    parts.append(_polyline(ts, report.ade_per_step, W + pad, pad / 2, pw, ph, T, ymax, "#1f77b4"))
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
