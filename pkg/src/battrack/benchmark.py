"""Variant-ordering experiment on the synthetic switching benchmark.

Every variant starts from the same foundation head; the adapter variants are
then tuned in lockstep and all five are tracked on a held-out split.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .evaluation import report_for
from .synthdata import generate_dataset
from .tracker import BATModel, track_sequences, train_lockstep

log = logging.getLogger(__name__)

BASELINE = "Baseline-Dual"


@dataclass(frozen=True)
class TrendSetup:
    sequences: int = 20
    frames: int = 60
    steps: int = 2000
    foundation_steps: int = 1000
    distractor: float = 1.0
    train_seed: int = 1000
    eval_seed: int = 5000
    variants: tuple[str, ...] = ("BAT", "BAT-Dual", "BAT-RGB", "BAT-TIR", BASELINE)


@dataclass
class TrendResult:
    seeds: list[int]
    sr: dict[str, list[float]] = field(default_factory=dict)

    def median(self, variant: str) -> float:
        return float(np.median(self.sr[variant]))

    def margins(self) -> dict[str, float]:
        """Median SR of each adapter variant minus the baseline's."""
        base = self.median(BASELINE)
        return {v: self.median(v) - base for v in self.sr if v != BASELINE}

    def bat_gap(self) -> float:
        """Median BAT SR minus the better single-direction variant."""
        return self.median("BAT") - max(self.median("BAT-RGB"), self.median("BAT-TIR"))


def run_seed(setup: TrendSetup, seed: int) -> dict[str, float]:
    kw = dict(frames=setup.frames, distractor=setup.distractor)
    train_recs = generate_dataset(setup.sequences, setup.train_seed + seed, **kw)
    eval_recs = generate_dataset(setup.sequences, setup.eval_seed + seed, **kw)
    cfg = RunConfig(seed=seed, steps=setup.steps, foundation_steps=setup.foundation_steps)
    models = [BATModel(cfg.with_(variant=v)) for v in setup.variants]
    train_lockstep(models, train_recs, cfg)
    gts = {r.name: (r.gt_visible, r.gt_infrared) for r in eval_recs}
    out = {}
    for v, m in zip(setup.variants, models):
        preds = dict(zip((r.name for r in eval_recs), track_sequences(m, eval_recs)))
        out[v] = report_for(preds, gts).sr
        log.info("seed %d %s SR %.4f", seed, v, out[v])
    return out


def run_trend(setup: TrendSetup = TrendSetup(), seeds=(0, 1, 2)) -> TrendResult:
    res = TrendResult(list(seeds), {v: [] for v in setup.variants})
    for seed in seeds:
        for v, sr in run_seed(setup, seed).items():
            res.sr[v].append(sr)
    return res
