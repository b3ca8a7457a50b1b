"""Evaluation metrics and the benchmark harness.

Prompt fidelity is scored with embedding cosine similarity; background
preservation is scored relative to edit success: per-example improvement
ratios feed a success curve, and reference-based scores are integrated over
the success threshold so partial edits cannot game them.
"""

from __future__ import annotations

import concurrent.futures
import csv
import dataclasses
import hashlib
import json
import os
import re
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from scoredit.backend.base import DenoiserBackend
from scoredit.core import EngineConfig
from scoredit.engine import EditRequest, run_edit
from scoredit.imgio import read_image

K_GRID_LO = 1.0
K_GRID_HI = 1.22
K_GRID_STEP = 0.01
MIN_SURVIVORS = 30

ADD_KEYWORDS = ("add", "put", "let there be")
OTHER_KEYWORDS = (
    "remove", "erase", "delete", "replace", "swap", "make", "change",
    "turn", "smaller", "bigger", "larger", "smile", "cry", "look",
)


class MetricError(ValueError):
    """Metric is undefined for the given inputs."""


def default_k_grid() -> np.ndarray:
    n = int(round((K_GRID_HI - K_GRID_LO) / K_GRID_STEP)) + 1
    return np.linspace(K_GRID_LO, K_GRID_HI, n)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise MetricError("cosine similarity undefined for zero vectors")
    return float(np.dot(a, b) / (na * nb))


def clip_r(
    x: np.ndarray, x_src: np.ndarray, y_tgt: str, provider: DenoiserBackend
) -> float:
    """Improvement ratio of prompt similarity over the source image."""
    e_tgt = provider.embed_text(y_tgt)
    num = cosine(provider.embed_image(x), e_tgt)
    den = cosine(provider.embed_image(x_src), e_tgt)
    if den == 0.0:
        raise MetricError("source image similarity is zero; ratio undefined")
    return num / den


def clip_t(x: np.ndarray, y_local: str, provider: DenoiserBackend) -> float:
    return cosine(provider.embed_image(x), provider.embed_text(y_local))


def success_curve(
    scores: Sequence[float], k_grid: np.ndarray | None = None
) -> list[tuple[float, float]]:
    """Fraction of scores strictly above each threshold."""
    if len(scores) == 0:
        raise MetricError("success curve needs at least one score")
    grid = default_k_grid() if k_grid is None else np.asarray(k_grid, dtype=float)
    if grid.size and grid[0] < 1.0:
        raise MetricError("thresholds start at 1.0")
    arr = np.asarray(scores, dtype=float)
    return [(float(k), float((arr > k).mean())) for k in grid]


def clip_auc(curve: Sequence[tuple[float, float]]) -> float:
    """Trapezoidal area under a success curve (not range-normalized)."""
    if len(curve) < 2:
        raise MetricError("curve needs at least two points")
    ks = np.array([p[0] for p in curve])
    fs = np.array([p[1] for p in curve])
    if (np.diff(ks) <= 0).any():
        raise MetricError("thresholds must be strictly increasing")
    return float(np.trapezoid(fs, ks))


@dataclass(frozen=True)
class ThresholdedAuc:
    value: float
    k_lo: float
    k_hi: float
    points_used: int


def thresholded_auc(
    metric_per_example: Sequence[float],
    clip_r_per_example: Sequence[float],
    k_grid: np.ndarray | None = None,
    min_count: int = MIN_SURVIVORS,
) -> ThresholdedAuc:
    """Integral over thresholds of the metric's mean on surviving examples.

    At each threshold only examples whose improvement ratio exceeds it
    contribute; thresholds with fewer than ``min_count`` survivors are
    dropped and the effective range is reported alongside the value.
    """
    metric = np.asarray(metric_per_example, dtype=float)
    ratios = np.asarray(clip_r_per_example, dtype=float)
    if metric.shape != ratios.shape:
        raise MetricError("metric and ratio lists must align")
    grid = default_k_grid() if k_grid is None else np.asarray(k_grid, dtype=float)
    ks, means = [], []
    for k in grid:
        survivors = ratios > k
        if int(survivors.sum()) < min_count:
            continue
        ks.append(float(k))
        means.append(float(metric[survivors].mean()))
    if len(ks) < 2:
        raise MetricError(
            f"fewer than 2 thresholds have {min_count}+ surviving examples"
        )
    value = float(np.trapezoid(np.asarray(means), np.asarray(ks)))
    return ThresholdedAuc(value=value, k_lo=ks[0], k_hi=ks[-1], points_used=len(ks))


def l1_distance(x: np.ndarray, x_ref: np.ndarray) -> float:
    """Mean absolute per-channel difference of [0, 1] images."""
    a = np.asarray(x, dtype=np.float64)
    b = np.asarray(x_ref, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"image shapes differ: {a.shape} vs {b.shape}")
    return float(np.abs(a - b).mean())


def classify_instruction(text: str) -> str:
    """Task category by keyword containment; insertion keywords win."""
    lowered = text.lower()
    for kw in ADD_KEYWORDS:
        if _contains_keyword(lowered, kw):
            return "Add"
    for kw in OTHER_KEYWORDS:
        if _contains_keyword(lowered, kw):
            return "Other"
    return "Unknown"


def _contains_keyword(text: str, keyword: str) -> bool:
    return re.search(rf"\b{re.escape(keyword)}\b", text) is not None


# ---------------------------------------------------------------------------
# Benchmark harness
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EvalExample:
    id: str
    image: str
    y_src: str
    y_tgt: str
    y_local: str | None = None
    ground_truth: str | None = None
    instruction: str | None = None
    nouns: tuple[str, ...] | None = None


@dataclass
class ExampleResult:
    id: str
    ok: bool
    error: str | None = None
    clip_r: float | None = None
    clip_t: float | None = None
    clip_t_fallback: bool = False
    l1_vs_gt: float | None = None
    clip_i_vs_gt: float | None = None
    instruction_class: str | None = None

    def to_json(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


@dataclass
class EvalReport:
    rows: list[ExampleResult]
    aggregate: dict[str, Any]
    config: dict[str, Any]
    warnings: list[str] = field(default_factory=list)

    def to_json(self) -> dict[str, Any]:
        return {
            "config": self.config,
            "warnings": self.warnings,
            "aggregate": self.aggregate,
            "examples": [r.to_json() for r in self.rows],
        }


def load_manifest(path: str) -> tuple[list[EvalExample], list[ExampleResult]]:
    """Parse a JSONL manifest; malformed lines become flagged failure rows."""
    examples: list[EvalExample] = []
    failures: list[ExampleResult] = []
    base = os.path.dirname(os.path.abspath(path))
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
                ex = EvalExample(
                    id=str(doc["id"]),
                    image=os.path.join(base, doc["image"]),
                    y_src=str(doc["y_src"]),
                    y_tgt=str(doc["y_tgt"]),
                    y_local=doc.get("y_local"),
                    ground_truth=(
                        os.path.join(base, doc["ground_truth"])
                        if doc.get("ground_truth")
                        else None
                    ),
                    instruction=doc.get("instruction"),
                    nouns=tuple(doc["nouns"]) if doc.get("nouns") else None,
                )
                if ex.id in seen:
                    raise ValueError(f"duplicate id {ex.id!r}")
                seen.add(ex.id)
                examples.append(ex)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                failures.append(
                    ExampleResult(id=f"line-{lineno}", ok=False, error=f"malformed line: {exc}")
                )
    return examples, failures


def _example_seed(base_seed: int, example_id: str) -> int:
    digest = hashlib.blake2b(
        f"{base_seed}|{example_id}".encode("utf-8"), digest_size=8
    ).digest()
    return int.from_bytes(digest, "little")


def evaluate_example(
    ex: EvalExample, cfg: EngineConfig, backend: DenoiserBackend
) -> ExampleResult:
    row = ExampleResult(id=ex.id, ok=False)
    if ex.instruction:
        row.instruction_class = classify_instruction(ex.instruction)
    try:
        run_cfg = dataclasses.replace(cfg, seed=_example_seed(cfg.seed, ex.id))
        source = read_image(ex.image)
        result = run_edit(
            EditRequest(
                source_image=source,
                y_src=ex.y_src,
                y_tgt=ex.y_tgt,
                config=run_cfg,
                nouns=ex.nouns,
            ),
            backend,
        )
        row.clip_r = clip_r(result.image, source, ex.y_tgt, backend)
        local = ex.y_local
        if local is None:
            local = ex.y_tgt
            row.clip_t_fallback = True
        row.clip_t = clip_t(result.image, local, backend)
        if ex.ground_truth:
            gt = read_image(ex.ground_truth)
            row.l1_vs_gt = l1_distance(
                result.image.astype(np.float64) / 255.0, gt.astype(np.float64) / 255.0
            )
            row.clip_i_vs_gt = cosine(
                backend.embed_image(result.image), backend.embed_image(gt)
            )
        row.ok = True
    except Exception as exc:  # noqa: BLE001 - per-example errors must not kill the batch
        row.error = f"{type(exc).__name__}: {exc}"
    return row


def run_benchmark(
    manifest_path: str,
    cfg: EngineConfig,
    backend: DenoiserBackend,
    workers: int = 1,
    min_count: int = MIN_SURVIVORS,
    out_dir: str | None = None,
) -> EvalReport:
    examples, failures = load_manifest(manifest_path)
    warnings = []
    if not examples:
        warnings.append("manifest contains no valid examples")

    rows: list[ExampleResult] = list(failures)
    if workers <= 1:
        for ex in examples:
            rows.append(evaluate_example(ex, cfg, backend.clone()))
    else:
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [
                pool.submit(evaluate_example, ex, cfg, backend.clone()) for ex in examples
            ]
            rows.extend(f.result() for f in futures)
    rows.sort(key=lambda r: r.id)

    aggregate = _aggregate(rows, min_count)
    report = EvalReport(
        rows=rows, aggregate=aggregate, config=cfg.to_mapping(), warnings=warnings
    )
    if out_dir is not None:
        write_report_files(report, out_dir)
    return report


def _aggregate(rows: list[ExampleResult], min_count: int) -> dict[str, Any]:
    scored = [r for r in rows if r.ok and r.clip_r is not None]
    agg: dict[str, Any] = {
        "examples_total": len(rows),
        "examples_ok": sum(r.ok for r in rows),
        "examples_failed": sum(not r.ok for r in rows),
    }
    if not scored:
        agg["success_curve"] = []
        return agg
    ratios = [r.clip_r for r in scored]
    curve = success_curve(ratios)
    agg["success_curve"] = [[k, f] for k, f in curve]
    agg["clip_auc"] = clip_auc(curve)
    agg["mean_clip_r"] = float(np.mean(ratios))
    agg["mean_clip_t"] = float(np.mean([r.clip_t for r in scored]))
    with_gt = [r for r in scored if r.l1_vs_gt is not None]
    if with_gt:
        agg["mean_l1"] = float(np.mean([r.l1_vs_gt for r in with_gt]))
        try:
            star = thresholded_auc(
                [r.l1_vs_gt for r in with_gt],
                [r.clip_r for r in with_gt],
                min_count=min_count,
            )
            agg["l1_star"] = star.value
            agg["l1_star_range"] = [star.k_lo, star.k_hi]
        except MetricError as exc:
            agg["l1_star_error"] = str(exc)
        try:
            star = thresholded_auc(
                [r.clip_i_vs_gt for r in with_gt],
                [r.clip_r for r in with_gt],
                min_count=min_count,
            )
            agg["clip_i_star"] = star.value
            agg["clip_i_star_range"] = [star.k_lo, star.k_hi]
        except MetricError as exc:
            agg["clip_i_star_error"] = str(exc)
    return agg


def write_report_files(report: EvalReport, out_dir: str) -> None:
    """report.json (full), report.csv (per-example), curve.csv (k, fraction)."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(report.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    columns = [
        "id", "ok", "error", "clip_r", "clip_t", "clip_t_fallback",
        "l1_vs_gt", "clip_i_vs_gt", "instruction_class",
    ]
    with open(os.path.join(out_dir, "report.csv"), "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in report.rows:
            doc = row.to_json()
            writer.writerow([doc[c] for c in columns])
    with open(os.path.join(out_dir, "curve.csv"), "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["k", "fraction"])
        for k, frac in report.aggregate.get("success_curve", []):
            writer.writerow([k, frac])
