"""Canonical cell names, the resumable experiment matrix, and learning-curve tables.

A cell is one trained system evaluated on the dev set.  Its name encodes
everything needed to rebuild it::

    1s-U_attn_s0                     stage 1, regime U, ATTN pooling, seed 0
    ft-P_attn_rand-bal_n100_d2_s0    stage 2 finetune, random balanced subset of 100, draw 2

``tr`` replaces ``ft`` for stage-2 training from scratch.  The curves tool
groups cells by everything except ``n``, draw and seed.
"""

from __future__ import annotations

import functools
import json
import logging
import os
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .data import load_manifest
from .errors import ConfigConflictError, ValidationError
from .evaluation import EvalReport, evaluate, pool_and_interval
from .model import ModelConfig, Pooling, load_checkpoint
from .selection import SelectionSpec, Strategy, absolute_errors, make_pool, select, write_selection
from .training import (BATCH_SIZE, FINETUNE_EPOCHS, LEARNING_RATE, SCRATCH_EPOCHS, STAGE1_EPOCHS,
                       SupervisionRegime, TrainPlan, finetune, train)

log = logging.getLogger(__name__)

STAGES = ("1s", "ft", "tr")
_CELL_RE = re.compile(
    r"^(?P<stage>1s|ft|tr)-(?P<regime>UWP|UW|P|W|U)_(?P<pooling>base|mean|attn)"
    r"(?:_(?P<strategy>rand|best)-(?P<bal>bal|unbal)_n(?P<n>\d+)_d(?P<draw>\d+))?"
    r"_s(?P<seed>\d+)$")
_STRATEGY_TAG = {Strategy.RANDOM: "rand", Strategy.BEST: "best"}


@dataclass(frozen=True)
class Cell:
    stage: str
    regime: str
    pooling: str
    seed: int
    strategy: str | None = None   # "rand" or "best"
    balanced: bool | None = None
    n: int | None = None
    draw: int | None = None

    @property
    def name(self) -> str:
        head = f"{self.stage}-{self.regime}_{self.pooling}"
        if self.stage == "1s":
            return f"{head}_s{self.seed}"
        bal = "bal" if self.balanced else "unbal"
        return f"{head}_{self.strategy}-{bal}_n{self.n}_d{self.draw}_s{self.seed}"

    @property
    def system(self) -> str:
        head = f"{self.stage}-{self.regime}_{self.pooling}"
        if self.stage == "1s":
            return head
        return f"{head}_{self.strategy}-{'bal' if self.balanced else 'unbal'}"

    @classmethod
    def parse(cls, name: str) -> "Cell":
        m = _CELL_RE.match(name)
        if m is None:
            raise ValidationError(f"not a canonical cell name: {name!r}")
        g = m.groupdict()
        if (g["stage"] == "1s") != (g["n"] is None):
            raise ValidationError(f"stage and subset fields disagree in {name!r}")
        if g["n"] is None:
            return cls("1s", g["regime"], g["pooling"], int(g["seed"]))
        return cls(g["stage"], g["regime"], g["pooling"], int(g["seed"]), g["strategy"],
                   g["bal"] == "bal", int(g["n"]), int(g["draw"]))

    def selection(self, bins: int) -> SelectionSpec:
        strategy = Strategy.RANDOM if self.strategy == "rand" else Strategy.BEST
        return SelectionSpec(self.n, strategy, bool(self.balanced), B=bins, seed=self.draw)


def parse_strategy(tag: str) -> tuple[str, bool]:
    """``rand-bal`` -> ("rand", True)."""
    try:
        strategy, bal = tag.split("-")
    except ValueError:
        raise ValidationError(f"strategy tag {tag!r} is not of the form rand|best-bal|unbal") from None
    if strategy not in ("rand", "best") or bal not in ("bal", "unbal"):
        raise ValidationError(f"strategy tag {tag!r} is not of the form rand|best-bal|unbal")
    return strategy, bal == "bal"


@dataclass(frozen=True)
class MatrixConfig:
    train_manifest: str
    dev_manifest: str
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    draws: tuple[int, ...] = (0, 1, 2, 3, 4)
    n_values: tuple[int, ...] = (100,)
    strategies: tuple[str, ...] = ("rand-bal",)
    stages: tuple[str, ...] = ("ft", "tr")
    regime: str = "P"
    stage1_regimes: tuple[str, ...] = ("U",)
    poolings: tuple[str, ...] = ("attn",)
    stage1_epochs: int = STAGE1_EPOCHS
    finetune_epochs: int = FINETUNE_EPOCHS
    scratch_epochs: int = SCRATCH_EPOCHS
    batch: int = BATCH_SIZE
    lr: float = LEARNING_RATE
    dropout: float = ModelConfig.__dataclass_fields__["dropout"].default
    bins: int = 5
    nboot: int = 1000
    eval_seed: int = 0

    def __post_init__(self):
        for key in ("seeds", "draws", "n_values", "strategies", "stages", "stage1_regimes", "poolings"):
            value = getattr(self, key)
            object.__setattr__(self, key, tuple(value) if isinstance(value, (list, tuple)) else (value,))
        for s in self.strategies:
            parse_strategy(s)
        for s in self.stages:
            if s not in ("ft", "tr"):
                raise ValidationError(f"stage-2 stage must be ft or tr, got {s!r}")
        for r in (self.regime, *self.stage1_regimes):
            SupervisionRegime.parse(r)
        for p in self.poolings:
            Pooling.parse(p)
        needs_u = "ft" in self.stages or any(s.startswith("best") for s in self.strategies)
        if needs_u and self.n_values and "U" not in self.stage1_regimes:
            raise ConfigConflictError("finetuning and best selection start from the stage-1 U model; "
                                      "add U to stage1_regimes")

    @classmethod
    def from_dict(cls, d: dict) -> "MatrixConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigConflictError(f"unknown matrix keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}

    def stage1_cells(self) -> list[Cell]:
        return [Cell("1s", r, p, s) for p in self.poolings for r in self.stage1_regimes for s in self.seeds]

    def stage2_cells(self) -> list[Cell]:
        cells = []
        for stage in self.stages:
            for p in self.poolings:
                for tag in self.strategies:
                    strategy, bal = parse_strategy(tag)
                    for n in self.n_values:
                        for d in self.draws:
                            for s in self.seeds:
                                cells.append(Cell(stage, self.regime, p, s, strategy, bal, n, d))
        return cells

    def cell_config(self, cell: Cell) -> dict:
        """The parts of the matrix configuration that determine ``cell``."""
        common = {"train_manifest": self.train_manifest, "dev_manifest": self.dev_manifest,
                  "batch": self.batch, "lr": self.lr, "dropout": self.dropout,
                  "nboot": self.nboot, "eval_seed": self.eval_seed}
        if cell.stage == "1s":
            return {**common, "epochs": self.stage1_epochs}
        epochs = self.finetune_epochs if cell.stage == "ft" else self.scratch_epochs
        out = {**common, "epochs": epochs, "bins": self.bins}
        if cell.stage == "ft" or cell.strategy == "best":
            out["stage1"] = {"cell": Cell("1s", "U", cell.pooling, cell.seed).name, "epochs": self.stage1_epochs}
        return out


# ---------------------------------------------------------------------------
# running cells


def _write_json_atomic(path: Path, doc: dict) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(doc, f, sort_keys=True, indent=1)
    os.replace(tmp, path)


@functools.lru_cache(maxsize=4)
def _records(path: str):
    return tuple(load_manifest(path))


def cell_paths(out: Path, cell: Cell) -> dict[str, Path]:
    return {"ckpt": out / f"{cell.name}.ckpt.json", "report": out / f"{cell.name}.report.json",
            "ids": out / f"{cell.name}.ids"}


def cell_state(out: Path, cell: Cell, expected: dict) -> str:
    """``done``, ``partial`` (restart it) or ``missing``; mismatched artifacts raise."""
    paths = cell_paths(out, cell)
    for key in ("report", "ckpt"):
        if paths[key].exists():
            with open(paths[key], encoding="utf-8") as f:
                meta = json.load(f).get("meta", {})
            found = meta.get("cell_config")
            if found != expected:
                raise ConfigConflictError(
                    f"{paths[key]} was produced with a different configuration; refusing to resume")
    if paths["report"].exists():
        return "done"
    return "partial" if paths["ckpt"].exists() else "missing"


def run_cell(out: str, cell: Cell, mcfg: MatrixConfig) -> str:
    out = Path(out)
    paths = cell_paths(out, cell)
    cfg = mcfg.cell_config(cell)
    train_recs = list(_records(mcfg.train_manifest))
    dev_recs = list(_records(mcfg.dev_manifest))
    pooling = Pooling.parse(cell.pooling)
    model_cfg = ModelConfig(K=len(train_recs[0].phones[0].gop_features) // 2, pooling=pooling,
                            dropout=mcfg.dropout, seed=cell.seed)
    meta = {"cell": cell.name, "cell_config": cfg, "tool_version": __version__}
    if cell.stage == "1s":
        plan = TrainPlan(regime=cell.regime, pooling=pooling, epochs=mcfg.stage1_epochs,
                         batch_size=mcfg.batch, lr=mcfg.lr, seed=cell.seed)
        ckpt = train(train_recs, plan, config=model_cfg).checkpoint
    else:
        source = None
        if "stage1" in cfg:
            source = load_checkpoint(out / f"{cfg['stage1']['cell']}.ckpt.json")
        spec = cell.selection(mcfg.bins)
        errors = absolute_errors(source, train_recs) if spec.strategy is Strategy.BEST else None
        ids = select(make_pool(train_recs, errors), spec)
        write_selection(paths["ids"], ids, {**spec.to_dict(), "cell": cell.name, "tool_version": __version__})
        chosen = set(ids)
        subset = [r for r in train_recs if r.utt_id in chosen]
        epochs = mcfg.finetune_epochs if cell.stage == "ft" else mcfg.scratch_epochs
        plan = TrainPlan(regime=cell.regime, pooling=pooling, epochs=epochs, batch_size=mcfg.batch,
                         lr=mcfg.lr, seed=cell.seed)
        if cell.stage == "ft":
            ckpt = finetune(source, subset, plan).checkpoint
        else:
            ckpt = train(subset, plan, config=model_cfg).checkpoint
        meta["draw"] = cell.draw
        meta["subset"] = spec.to_dict()
    ckpt.meta.update(meta)
    tmp = paths["ckpt"].with_suffix(".json.tmp")
    ckpt.save(tmp)
    os.replace(tmp, paths["ckpt"])
    report = evaluate(ckpt, dev_recs, n_boot=mcfg.nboot, seed=mcfg.eval_seed)
    report.meta.update(meta)
    _write_json_atomic(paths["report"], report.to_dict())
    return cell.name


@dataclass
class MatrixRun:
    scheduled: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)
    executed: list[str] = field(default_factory=list)


def run_matrix(mcfg: MatrixConfig, out, jobs: int = 1, dry_run: bool = False) -> MatrixRun:
    """Run every missing cell of the matrix into ``out``; completed cells are skipped."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    # per-cell configs decide resumability (a conflict raises before anything is written);
    # the stamp only records the latest matrix
    for cell in mcfg.stage1_cells() + mcfg.stage2_cells():
        cell_state(out, cell, mcfg.cell_config(cell))
    if not dry_run:
        _write_json_atomic(out / "matrix.json", {"matrix": mcfg.to_dict(), "tool_version": __version__})
    result = MatrixRun()
    needed_stage1 = {c.name for c in mcfg.stage1_cells()}
    for wave in (mcfg.stage1_cells(), mcfg.stage2_cells()):
        todo = []
        for cell in wave:
            result.scheduled.append(cell.name)
            state = cell_state(out, cell, mcfg.cell_config(cell))
            if state == "done":
                result.skipped.append(cell.name)
            else:
                todo.append(cell)
        if dry_run:
            continue
        for cell in wave:
            dep = mcfg.cell_config(cell).get("stage1", {}).get("cell")
            if dep is not None and dep not in needed_stage1:
                raise ConfigConflictError(f"{cell.name} needs {dep}, which the matrix does not train")
        if jobs > 1 and len(todo) > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                for name in pool.map(run_cell, [str(out)] * len(todo), todo, [mcfg] * len(todo)):
                    result.executed.append(name)
                    log.info("finished %s", name)
        else:
            for cell in todo:
                result.executed.append(run_cell(str(out), cell, mcfg))
                log.info("finished %s", cell.name)
    return result


# ---------------------------------------------------------------------------
# curves


@dataclass(frozen=True)
class CurvePoint:
    system: str
    n: int | None
    pcc_mean: float
    pcc_ci: float
    n_reports: int


def report_cell(path: Path, report: EvalReport) -> str:
    name = report.meta.get("cell") or report.meta.get("system")
    if name:
        return str(name)
    stem = path.name
    for suffix in (".report.json", ".json"):
        if stem.endswith(suffix):
            return stem[: -len(suffix)]
    return stem


def curve_points(reports: Sequence[tuple[str, EvalReport]], level: str = "phone") -> list[CurvePoint]:
    """Pool bootstrap values across seeds and draws for each (system, n)."""
    groups: dict[tuple[str, int | None], list[np.ndarray]] = {}
    for name, rep in reports:
        lvl = rep.levels.get(level)
        if lvl is None or not lvl.pcc_values:
            continue
        if name == "gop":
            key = ("gop", None)
        else:
            cell = Cell.parse(name)
            key = (cell.system, cell.n)
        groups.setdefault(key, []).append(np.asarray(lvl.pcc_values))
    points = []
    for (system, n), vals in groups.items():
        iv = pool_and_interval(np.concatenate(vals))
        points.append(CurvePoint(system, n, iv.mean, iv.ci, len(vals)))
    return sorted(points, key=lambda p: (p.system, -1 if p.n is None else p.n))


def curves_table(points: Sequence[CurvePoint], header: dict | None = None) -> str:
    lines = []
    if header is not None:
        lines.append("# " + json.dumps(header, sort_keys=True))
    lines.append("system\tn\tpcc_mean\tpcc_ci\tn_reports")
    for p in points:
        n = "all" if p.n is None else str(p.n)
        lines.append(f"{p.system}\t{n}\t{p.pcc_mean:.6f}\t{p.pcc_ci:.6f}\t{p.n_reports}")
    return "\n".join(lines) + "\n"


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f")


def curves_svg(points: Sequence[CurvePoint], title: str = "phone PCC vs. labelled utterances") -> str:
    """Line per stage-2 system over n; stage-1 systems and GOP as dashed reference lines.

    Written by hand (not a plotting library) so the bytes depend only on the data.
    """
    W, H, L, R, T, B = 640, 400, 60, 180, 30, 50
    lines = {s: sorted([p for p in points if p.system == s and p.n is not None], key=lambda p: p.n)
             for s in sorted({p.system for p in points})}
    refs = [p for p in points if p.n is None]
    ns = sorted({p.n for p in points if p.n is not None}) or [1]
    ys = [p.pcc_mean + sgn * p.pcc_ci for p in points for sgn in (-1, 1)] or [0.0, 1.0]
    y0, y1 = min(ys), max(ys)
    if y1 - y0 < 1e-9:
        y0, y1 = y0 - 0.5, y1 + 0.5
    logx = len(ns) > 1 and ns[-1] / ns[0] >= 10

    def sx(n):
        if len(ns) == 1:
            return L + (W - L - R) / 2
        a, b = (np.log(ns[0]), np.log(ns[-1])) if logx else (ns[0], ns[-1])
        v = np.log(n) if logx else n
        return L + (v - a) / (b - a) * (W - L - R)

    def sy(v):
        return T + (y1 - v) / (y1 - y0) * (H - T - B)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
           f'<rect width="{W}" height="{H}" fill="white"/>',
           f'<text x="{W / 2:.1f}" y="18" text-anchor="middle" font-size="14">{title}</text>',
           f'<line x1="{L}" y1="{H - B}" x2="{W - R}" y2="{H - B}" stroke="black"/>',
           f'<line x1="{L}" y1="{T}" x2="{L}" y2="{H - B}" stroke="black"/>']
    for n in ns:
        out.append(f'<text x="{sx(n):.1f}" y="{H - B + 16}" text-anchor="middle" font-size="11">{n}</text>')
    for k in range(5):
        v = y0 + (y1 - y0) * k / 4
        out.append(f'<text x="{L - 6}" y="{sy(v) + 4:.1f}" text-anchor="end" font-size="11">{v:.3f}</text>')
    out.append(f'<text x="{(L + W - R) / 2:.1f}" y="{H - 12}" text-anchor="middle" font-size="12">n</text>')
    legend_y = T + 10
    systems = [s for s in lines if lines[s]] + sorted({p.system for p in refs})
    for i, system in enumerate(systems):
        color = _PALETTE[i % len(_PALETTE)]
        if lines.get(system):
            pts = lines[system]
            coords = " ".join(f"{sx(p.n):.1f},{sy(p.pcc_mean):.1f}" for p in pts)
            out.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="2"/>')
            for p in pts:
                out.append(f'<line x1="{sx(p.n):.1f}" y1="{sy(p.pcc_mean - p.pcc_ci):.1f}" '
                           f'x2="{sx(p.n):.1f}" y2="{sy(p.pcc_mean + p.pcc_ci):.1f}" stroke="{color}"/>')
            dash = ""
        else:
            ref = next(p for p in refs if p.system == system)
            out.append(f'<line x1="{L}" y1="{sy(ref.pcc_mean):.1f}" x2="{W - R}" y2="{sy(ref.pcc_mean):.1f}" '
                       f'stroke="{color}" stroke-dasharray="6,4"/>')
            dash = ' stroke-dasharray="6,4"'
        out.append(f'<line x1="{W - R + 10}" y1="{legend_y}" x2="{W - R + 30}" y2="{legend_y}" '
                   f'stroke="{color}" stroke-width="2"{dash}/>')
        out.append(f'<text x="{W - R + 34}" y="{legend_y + 4}" font-size="11">{system}</text>')
        legend_y += 16
    out.append("</svg>")
    return "\n".join(out) + "\n"
