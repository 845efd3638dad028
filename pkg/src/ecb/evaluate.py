"""Inference, accuracy metrics, pseudo-label tracking, ablations and sweeps.

Test-time predictions come from the conv branch alone (encoder E2 with head
F2), so they are invariant to anything that happens to the attention branch.
Both branches' accuracies are still reported for the ablation tables.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from . import train as training
from .autodiff import ContractError, Tensor
from .data import DomainDataset, Sample, aug_weak
from .nn import Branch, ConfigError
from .train import EcbConfig, EcbState

_EVAL_BATCH = 256

ABLATION_MODES = ("cotrain_direction", "arch_pair")


def _branch_argmax(branch: Branch, images: np.ndarray) -> np.ndarray:
    out = []
    with ad.no_grad():
        for start in range(0, len(images), _EVAL_BATCH):
            logits = branch.logits(Tensor(images[start:start + _EVAL_BATCH]))
            # ties resolve to the lowest class index
            out.append(np.argmax(logits.data, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def predict(state: EcbState, x: Tensor | np.ndarray) -> np.ndarray:
    """argmax of F2(E2(x)); reads only conv-branch parameters."""
    images = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    return _branch_argmax(state.cnn_branch, images)


def branch_for(state: EcbState, branch: str) -> Branch:
    if branch == "cnn":
        return state.cnn_branch
    if branch == "vit":
        return state.vit_branch
    raise ConfigError(f"unknown branch {branch!r}, expected 'cnn' or 'vit'")


def accuracy(state: EcbState, split: list[Sample], branch: str = "cnn") -> float:
    """Percentage of correct predictions on a split (eval-only label channel)."""
    if not split:
        raise ContractError("accuracy needs a nonempty split")
    images = np.stack([s.image for s in split])
    preds = _branch_argmax(branch_for(state, branch), images)
    truth = np.asarray([s.eval_label() for s in split])
    return 100.0 * float(np.mean(preds == truth))


def pseudo_stats(teacher: Branch, split: list[Sample], tau: float,
                 rng: np.random.Generator) -> tuple[int, int]:
    """How many weak-view predictions clear the gate, and how many are right."""
    if not (0.0 <= tau <= 1.0):
        raise ConfigError(f"threshold {tau} outside [0, 1]")
    if not split:
        return 0, 0
    weak = np.stack([aug_weak(s, rng).image for s in split])
    with ad.no_grad():
        chunks = []
        for start in range(0, len(weak), _EVAL_BATCH):
            probs = ad.softmax(teacher.logits(Tensor(weak[start:start + _EVAL_BATCH])))
            chunks.append(probs.data)
    q = np.concatenate(chunks)
    mask = q.max(axis=1) >= tau
    truth = np.asarray([s.eval_label() for s in split])
    total = int(mask.sum())
    correct = int(np.sum(q.argmax(axis=1)[mask] == truth[mask])) if total else 0
    return total, correct


# ---------------------------------------------------------------------------
# ablations

@dataclass
class AblationRow:
    variant: str
    seed: int
    acc_cnn: float
    acc_vit: float
    error: str = ""


def ablation_variants(mode: str) -> list[str]:
    if mode == "cotrain_direction":
        return ["both", "vit2cnn", "cnn2vit"]
    if mode == "arch_pair":
        return ["attn+conv", "conv+conv", "attn+attn"]
    raise ConfigError(f"unknown ablation mode {mode!r}, expected one of {ABLATION_MODES}")


def run_ablation(mode: str, base: EcbConfig, ds: DomainDataset,
                 seeds: list[int], on_run=None) -> list[AblationRow]:
    """Run every variant with shared seeds; a failing run is recorded and
    does not abort its siblings."""
    rows: list[AblationRow] = []
    for variant in ablation_variants(mode):
        for seed in seeds:
            if mode == "cotrain_direction":
                cfg = replace(base, cotrain_mode=variant, seed=seed)
            else:
                cfg = replace(base, arch_pair=variant, seed=seed)
            try:
                state, history = training.train(cfg, ds)
                rows.append(AblationRow(variant=variant, seed=seed,
                                        acc_cnn=history[-1].acc_target_cnn,
                                        acc_vit=history[-1].acc_target_vit))
            except (ad.NumericError, ConfigError, ContractError) as exc:
                rows.append(AblationRow(variant=variant, seed=seed,
                                        acc_cnn=float("nan"), acc_vit=float("nan"),
                                        error=f"{type(exc).__name__}: {exc}"))
            if on_run is not None:
                on_run(rows[-1])
    return rows


def ablation_csv(rows: list[AblationRow]) -> str:
    lines = ["variant,acc_cnn,acc_vit,seed,error"]
    for r in rows:
        lines.append(f"{r.variant},{r.acc_cnn!r},{r.acc_vit!r},{r.seed},{r.error}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# threshold sweep with cell-level resume

@dataclass
class SweepCell:
    tau_vit: float
    tau_cnn: float
    seed: int
    acc_cnn: float
    acc_vit: float
    wall_time: float
    error: str = ""


@dataclass
class SweepResult:
    tau_list: list[float]
    cells: list[SweepCell]

    def cell(self, tau_vit: float, tau_cnn: float) -> SweepCell:
        for c in self.cells:
            if c.tau_vit == tau_vit and c.tau_cnn == tau_cnn:
                return c
        raise KeyError((tau_vit, tau_cnn))


def _cell_path(out_dir, tau_vit: float, tau_cnn: float):
    return out_dir / f"cell_{tau_vit:g}_{tau_cnn:g}.json"


def run_sweep_cell(cfg: EcbConfig, ds: DomainDataset) -> SweepCell:
    t0 = time.perf_counter()
    _, history = training.train(cfg, ds)
    return SweepCell(tau_vit=cfg.tau_vit, tau_cnn=cfg.tau_cnn, seed=cfg.seed,
                     acc_cnn=history[-1].acc_target_cnn,
                     acc_vit=history[-1].acc_target_vit,
                     wall_time=time.perf_counter() - t0)


def run_threshold_sweep(tau_list: list[float], base: EcbConfig, ds: DomainDataset,
                        out_dir, on_cell=None) -> SweepResult:
    """|tau_list|^2 seeded runs over (tau_vit, tau_cnn) pairs.

    Each finished cell is persisted as JSON under ``out_dir/cells`` and
    skipped on re-invocation, so an interrupted sweep resumes where it
    stopped.  Per-cell failures are recorded and the sweep continues.
    """
    from pathlib import Path

    for tau in tau_list:
        if not (0.0 <= tau <= 1.0):
            raise ConfigError(f"threshold {tau} outside [0, 1]")
    cell_dir = Path(out_dir) / "cells"
    cell_dir.mkdir(parents=True, exist_ok=True)
    cells: list[SweepCell] = []
    for tv in tau_list:
        for tc in tau_list:
            path = _cell_path(cell_dir, tv, tc)
            if path.exists():
                cells.append(SweepCell(**json.loads(path.read_text())))
                continue
            cfg = replace(base, tau_vit=tv, tau_cnn=tc)
            try:
                cell = run_sweep_cell(cfg, ds)
            except (ad.NumericError, ConfigError, ContractError) as exc:
                cell = SweepCell(tau_vit=tv, tau_cnn=tc, seed=cfg.seed,
                                 acc_cnn=float("nan"), acc_vit=float("nan"),
                                 wall_time=0.0, error=f"{type(exc).__name__}: {exc}")
            path.write_text(json.dumps(cell.__dict__, sort_keys=True))
            cells.append(cell)
            if on_cell is not None:
                on_cell(cell)
    result = SweepResult(tau_list=list(tau_list), cells=cells)
    out = Path(out_dir)
    (out / "sweep_long.csv").write_text(sweep_long_csv(result))
    (out / "sweep_grid.csv").write_text(sweep_grid_csv(result))
    return result


def sweep_long_csv(result: SweepResult) -> str:
    lines = ["tau_vit,tau_cnn,acc_cnn,acc_vit,seed"]
    for c in result.cells:
        lines.append(f"{c.tau_vit!r},{c.tau_cnn!r},{c.acc_cnn!r},{c.acc_vit!r},{c.seed}")
    return "\n".join(lines) + "\n"


def sweep_grid_csv(result: SweepResult) -> str:
    """conv-branch accuracy as a tau_vit (rows) x tau_cnn (columns) matrix."""
    header = "tau_vit\\tau_cnn," + ",".join(repr(t) for t in result.tau_list)
    lines = [header]
    for tv in result.tau_list:
        row = [repr(tv)]
        for tc in result.tau_list:
            row.append(repr(result.cell(tv, tc).acc_cnn))
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def write_summary(path, cfg: EcbConfig, history, wall_time: float) -> None:
    summary = {
        "config": {k: v for k, v in cfg.__dict__.items()},
        "config_hash": training.config_hash(cfg),
        "seed": cfg.seed,
        "final_iter": history[-1].iter if history else 0,
        "acc_target_cnn": history[-1].acc_target_cnn if history else None,
        "acc_target_vit": history[-1].acc_target_vit if history else None,
        "wall_time_s": wall_time,
    }
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
