"""Analytic FLOP accounting and wall-clock latency, sparse vs dense.

The FLOP report is exact (derived from geometry and active counts); the
latency benchmark times full head forwards on fixed evaluation scenes,
pinned to one BLAS thread by default so the speedup attribution is clean.
"""

from __future__ import annotations

import time
from contextlib import nullcontext
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import reports, scenes
from .config import RunConfig
from .head import BRANCHES, DetectionHead, assign_labels
from .ledger import FlopLedger

FLOPS_CSV_HEADER = ["level", "branch", "dense_macs", "sparse_macs", "mask_macs",
                    "g_macs", "activation_ratio", "reduction_pct"]


def eval_scenes(cfg: RunConfig, count: int | None = None, seed_offset: int = 10_000):
    """Deterministic held-out scenes: (features, labels) pairs."""
    head_cfg = cfg.head_config()
    spec = cfg.scene_spec()
    count = count if count is not None else cfg.bench.eval_scenes
    out = []
    for i in range(count):
        rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, seed_offset + i)))
        scene, feats = scenes.gen_scene(spec, head_cfg, rng)
        out.append((feats, assign_labels(scene, head_cfg)))
    return out


@dataclass
class FlopsReport:
    rows: list[dict]
    total_dense: int
    total_sparse: int  # includes mask-net and context overhead
    reduction_pct: float
    activation_ratios: dict  # (level, branch) -> ratio

    def csv_rows(self) -> list[list]:
        out = [[r["level"], r["branch"], r["dense_macs"], r["sparse_macs"],
                r["mask_macs"], r["g_macs"], r["activation_ratio"], r["reduction_pct"]]
               for r in self.rows]
        out.append(["total", "-", self.total_dense, self.total_sparse - _overhead(self.rows),
                    sum(r["mask_macs"] for r in self.rows),
                    sum(r["g_macs"] for r in self.rows),
                    float(np.mean([r["activation_ratio"] for r in self.rows])),
                    self.reduction_pct])
        return out


def _overhead(rows) -> int:
    return sum(r["mask_macs"] + r["g_macs"] for r in rows)


def bench_flops(head: DetectionHead, scene_batch, csv_path: str | Path | None = None,
                figure_path: str | Path | None = None) -> FlopsReport:
    """Run sparse inference over scenes and compare MACs to the dense model."""
    cfg = head.cfg
    ledger = FlopLedger()
    active = {(lv, b): 0 for lv in range(cfg.num_levels) for b in BRANCHES}
    pixels = {(lv, b): 0 for lv in range(cfg.num_levels) for b in BRANCHES}
    for feats, _ in scene_batch:
        out = head.forward_infer(feats, ledger)
        for lv in range(cfg.num_levels):
            for b in BRANCHES:
                mask = out.masks[lv][b]
                active[(lv, b)] += mask.num_active
                bb, _, h, w = mask.decisions.shape
                pixels[(lv, b)] += bb * h * w

    rows = []
    for lv in range(cfg.num_levels):
        g_share = ledger.context_macs[lv] / len(BRANCHES)  # one context conv feeds both branches
        for b in BRANCHES:
            conv = sum(macs for (l, br, _), macs in ledger.conv_macs.items()
                       if l == lv and br == b)
            dense = sum(macs for (l, br, _), macs in ledger.dense_macs.items()
                        if l == lv and br == b)
            mask_macs = ledger.mask_macs[(lv, b)]
            ratio = active[(lv, b)] / max(pixels[(lv, b)], 1)
            rows.append({
                "level": lv, "branch": b, "dense_macs": dense, "sparse_macs": conv,
                "mask_macs": mask_macs, "g_macs": int(g_share),
                "activation_ratio": ratio,
                "reduction_pct": 100.0 * (1.0 - (conv + mask_macs + g_share) / dense),
            })

    report = FlopsReport(
        rows=rows,
        total_dense=ledger.total_dense,
        total_sparse=ledger.total_sparse,
        reduction_pct=ledger.reduction_pct(),
        activation_ratios={k: active[k] / max(pixels[k], 1) for k in active},
    )
    if csv_path is not None:
        reports.write_csv(csv_path, FLOPS_CSV_HEADER, report.csv_rows())
    if figure_path is not None:
        reports.flops_figure(rows, figure_path)
    return report


@dataclass
class LatencyReport:
    sparse_ms: np.ndarray
    dense_ms: np.ndarray
    sparse_median: float
    dense_median: float
    speedup: float
    sparse_p10: float
    sparse_p90: float
    dense_p10: float
    dense_p90: float
    ledger_repeats_identical: bool

    def csv_rows(self) -> list[list]:
        return [
            ["sparse", self.sparse_median, self.sparse_p10, self.sparse_p90],
            ["dense", self.dense_median, self.dense_p10, self.dense_p90],
            ["speedup", self.speedup, "", ""],
        ]


def bench_latency(head: DetectionHead, scene_batch, repetitions: int = 50,
                  warmup: int = 5, single_thread: bool = True,
                  csv_path: str | Path | None = None,
                  figure_path: str | Path | None = None) -> LatencyReport:
    """Median/decile wall time per forward, sparse path vs dense reference."""
    if repetitions < 30:
        raise ValueError("need at least 30 repetitions for stable percentiles")
    feats_list = [feats for feats, _ in scene_batch]
    limits = threadpool_limits(limits=1) if single_thread else nullcontext()

    ledgers = []
    with limits:
        for i in range(warmup):
            head.forward_infer(feats_list[i % len(feats_list)])
            head.forward_dense_reference(feats_list[i % len(feats_list)])
        sparse_ms = np.empty(repetitions)
        dense_ms = np.empty(repetitions)
        for i in range(repetitions):
            feats = feats_list[i % len(feats_list)]
            ledger = FlopLedger()
            t0 = time.perf_counter()
            head.forward_infer(feats, ledger)
            sparse_ms[i] = (time.perf_counter() - t0) * 1e3
            if i < len(feats_list):
                ledgers.append(ledger)
            t0 = time.perf_counter()
            head.forward_dense_reference(feats)
            dense_ms[i] = (time.perf_counter() - t0) * 1e3

    # op counts must not vary across repetitions of the same scene
    check = FlopLedger()
    head.forward_infer(feats_list[0], check)
    identical = ledgers[0].conv_macs == check.conv_macs

    report = LatencyReport(
        sparse_ms=sparse_ms, dense_ms=dense_ms,
        sparse_median=float(np.median(sparse_ms)),
        dense_median=float(np.median(dense_ms)),
        speedup=float(np.median(dense_ms) / np.median(sparse_ms)),
        sparse_p10=float(np.percentile(sparse_ms, 10)),
        sparse_p90=float(np.percentile(sparse_ms, 90)),
        dense_p10=float(np.percentile(dense_ms, 10)),
        dense_p90=float(np.percentile(dense_ms, 90)),
        ledger_repeats_identical=bool(identical),
    )
    if csv_path is not None:
        reports.write_csv(csv_path, ["path", "median_ms", "p10_ms", "p90_ms"],
                          report.csv_rows())
    if figure_path is not None:
        reports.latency_figure(sparse_ms, dense_ms, figure_path)
    return report


def measured_activation(head: DetectionHead, scene_batch) -> list[float]:
    """Per-level hard activation ratio averaged over scenes and branches."""
    cfg = head.cfg
    totals = np.zeros(cfg.num_levels)
    counts = np.zeros(cfg.num_levels)
    for feats, _ in scene_batch:
        out = head.forward_infer(feats)
        for lv in range(cfg.num_levels):
            for b in BRANCHES:
                mask = out.masks[lv][b]
                bb, _, h, w = mask.decisions.shape
                totals[lv] += mask.num_active
                counts[lv] += bb * h * w
    return list(totals / np.maximum(counts, 1))
