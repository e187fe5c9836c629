"""Command line interface.

Every subcommand takes ``--config FILE`` (a flat JSON object whose keys are
option names); explicit flags override the file, which overrides defaults.
``PRONSCORE_SEED`` supplies the seed when neither sets one.  Errors print a
JSON object on stderr and return the exit code of the error class (see
:mod:`pronscore.errors`; usage errors return 2, missing files 3).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from fractions import Fraction
from pathlib import Path

from . import __version__
from .data import SynthSpec, generate_synthetic, infer_K, read_manifest, split_by_speaker, write_manifest
from .errors import ConfigConflictError, PronScoreError, ValidationError
from .evaluation import LEVELS, EvalReport, evaluate, evaluate_gop_baseline
from .experiments import Cell, MatrixConfig, curve_points, curves_svg, curves_table, report_cell, run_matrix
from .gop import build_records, read_alignments, read_posteriors
from .model import ModelConfig, Pooling, load_checkpoint
from .selection import SelectionSpec, Strategy, absolute_errors, make_pool, read_selection, select, write_selection
from .training import (BATCH_SIZE, FINETUNE_EPOCHS, LEARNING_RATE, STAGE1_EPOCHS, TrainPlan, finetune,
                       train)

ENV_SEED = "PRONSCORE_SEED"
_MODEL_DEFAULTS = ModelConfig.__dataclass_fields__
EXIT_OTHER = 1
EXIT_USAGE = 2
EXIT_MISSING_FILE = 3

log = logging.getLogger("pronscore")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        _emit_error("UsageError", message, EXIT_USAGE)
        raise SystemExit(EXIT_USAGE)


def _emit_error(kind: str, message: str, code: int) -> None:
    sys.stderr.write(json.dumps({"error": kind, "message": message, "exit_code": code}) + "\n")


# ---------------------------------------------------------------------------
# option plumbing


class _Options:
    """Collects each subcommand's defaults; argparse itself defaults to None."""

    def __init__(self, parser):
        self.parser = parser
        self.defaults: dict = {}
        self.required: set[str] = set()

    def add(self, *flags, default=None, required=False, **kw):
        action = self.parser.add_argument(*flags, default=None, **kw)
        self.defaults[action.dest] = default
        if required:
            self.required.add(action.dest)
        return action

    def flag(self, name, default=False, help=None):
        return self.add(name, default=default, action=argparse.BooleanOptionalAction, help=help)


def _read_config(path) -> dict:
    with open(path, encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigConflictError(f"{path}: not valid JSON ({exc.msg})") from None
    if not isinstance(doc, dict):
        raise ConfigConflictError(f"{path}: config must be a flat JSON object")
    out = {}
    for key, value in doc.items():
        if isinstance(value, dict):
            raise ConfigConflictError(f"{path}: key {key!r} is nested; the config file is flat")
        out[key.replace("-", "_")] = value
    return out


def resolve(args, opts: _Options) -> dict:
    """Effective options: defaults < ``PRONSCORE_SEED`` < config file < flags."""
    config = _read_config(args.config) if args.config else {}
    unknown = sorted(set(config) - set(opts.defaults))
    if unknown:
        raise ConfigConflictError(f"config keys {unknown} are not options of {args.command!r}")
    eff = dict(opts.defaults)
    env_seed = os.environ.get(ENV_SEED)
    if "seed" in eff and env_seed not in (None, ""):
        try:
            eff["seed"] = int(env_seed)
        except ValueError:
            raise ConfigConflictError(f"{ENV_SEED}={env_seed!r} is not an integer") from None
    eff.update(config)
    for key in opts.defaults:
        value = getattr(args, key, None)
        if value is not None:
            eff[key] = value
    missing = sorted(k for k in opts.required if eff.get(k) in (None, [], ""))
    if missing:
        raise UsageError(f"{args.command}: missing required option(s): "
                         + ", ".join("--" + m.replace("_", "-") for m in missing))
    return eff


def _provenance(command: str, eff: dict) -> dict:
    return {"tool": "pronscore", "tool_version": __version__, "command": command, "config": eff}


def _out_path(path) -> Path:
    p = Path(path)
    if p.parent and not p.parent.exists():
        p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _load_records(path, max_seq_len=None):
    return read_manifest(path, max_seq_len)


def _subset(records, ids_path):
    ids, meta = read_selection(ids_path)
    by_id = {r.utt_id: r for r in records}
    missing = [u for u in ids if u not in by_id]
    if missing:
        raise ValidationError(f"{len(missing)} selected ids are not in the manifest, e.g. {missing[0]!r}")
    return [by_id[u] for u in ids], meta


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(eff):
    if eff["spec"] == "default":
        base = SynthSpec().to_dict()
    else:
        with open(eff["spec"], encoding="utf-8") as f:
            base = {**SynthSpec().to_dict(), **json.load(f)}
    for key in ("n_speakers", "utts_per_speaker", "K", "noise_phone", "noise_word", "noise_utt",
                "feature_snr", "phone_bias", "phone_difficulty", "seed"):
        if eff.get(key) is not None:
            base[key] = eff[key]
    spec = SynthSpec.from_dict(base)
    spec.validate()
    records = generate_synthetic(spec)
    write_manifest(_out_path(eff["out"]), records, spec.K,
                   meta={**_provenance("synth", eff), "synth_spec": spec.to_dict()})
    log.info("wrote %d utterances to %s", len(records), eff["out"])


def cmd_gop_features(eff):
    alignments = read_alignments(eff["alignments"])
    folder = Path(eff["posteriors"])
    posteriors = {}
    for utt_id in sorted(alignments):
        for suffix in (".bin", ".txt"):
            path = folder / f"{utt_id}{suffix}"
            if path.exists():
                posteriors[utt_id] = read_posteriors(path, eps=eff["floor"])
                break
        else:
            raise FileNotFoundError(f"no posterior file for {utt_id!r} under {folder}")
    Ks = {p.K for p in posteriors.values()}
    if len(Ks) != 1:
        raise ValidationError(f"posterior files disagree on K: {sorted(Ks)}")
    utt2spk = None
    if eff.get("utt2spk"):
        with open(eff["utt2spk"], encoding="utf-8") as f:
            utt2spk = dict(line.split()[:2] for line in f if line.strip())
    labels = None
    if eff.get("labels"):
        labels = {}
        with open(eff["labels"], encoding="utf-8") as f:
            for line in f:
                if line.strip():
                    obj = json.loads(line)
                    labels[obj["utt_id"]] = obj
    records = build_records(posteriors, alignments, utt2spk, labels)
    write_manifest(_out_path(eff["out"]), records, Ks.pop(), meta=_provenance("gop-features", eff))


def _fractions(value) -> tuple[float, float, float]:
    parts = value.split(",") if isinstance(value, str) else list(value)
    try:
        out = tuple(float(Fraction(str(p).strip())) for p in parts)
    except (ValueError, ZeroDivisionError):
        raise ValidationError(f"bad split fractions {value!r}") from None
    if len(out) != 3:
        raise ValidationError(f"need three split fractions, got {value!r}")
    return out


def cmd_split(eff):
    header, records = _load_records(eff["manifest"])
    split = split_by_speaker(records, _fractions(eff["fractions"]), eff["seed"])
    out = Path(eff["out"])
    out.mkdir(parents=True, exist_ok=True)
    for name in ("train", "dev", "test"):
        part = getattr(split, name)
        meta = {**_provenance("split", eff), "part": name, "speakers": sorted(split.speakers(name)),
                "source": header.get("meta")}
        write_manifest(out / f"{name}.jsonl", part, header["K"], meta=meta)
        print(f"{name}\t{len(split.speakers(name))} speakers\t{len(part)} utterances")


def _plan(eff, regime_default=None) -> TrainPlan:
    return TrainPlan(regime=eff["regime"] or regime_default, pooling=eff["pooling"] or Pooling.ATTN,
                     epochs=eff["epochs"], batch_size=eff["batch"], lr=eff["lr"], seed=eff["seed"],
                     select_best_dev=bool(eff["select_best_dev"]))


def _cell_name(stage: str, plan: TrainPlan, sel_meta: dict | None) -> str | None:
    """Canonical cell name so ``curves`` can group CLI-built reports."""
    if sel_meta is None:
        return Cell("1s", plan.regime.value, plan.pooling.value, plan.seed).name if stage == "train" else None
    try:
        tag = "rand" if Strategy(sel_meta["strategy"]) is Strategy.RANDOM else "best"
        return Cell("tr" if stage == "train" else "ft", plan.regime.value, plan.pooling.value, plan.seed,
                    tag, bool(sel_meta["balanced"]), int(sel_meta["n"]), int(sel_meta.get("seed", 0))).name
    except (KeyError, ValueError, TypeError):
        return None


def _emit_trace(result):
    sys.stdout.write(result.trace_table())


def cmd_train(eff):
    header, records = _load_records(eff["manifest"], eff["max_seq_len"])
    meta = {}
    if eff.get("subset"):
        records, sel_meta = _subset(records, eff["subset"])
        meta["subset"] = sel_meta
        meta["draw"] = sel_meta.get("seed", 0)
    dev = _load_records(eff["dev_manifest"])[1] if eff.get("dev_manifest") else None
    plan = _plan(eff)
    cfg = ModelConfig(K=header["K"], d_model=eff["d_model"], depth=eff["depth"], n_heads=eff["heads"],
                      max_seq_len=eff["max_seq_len"], pooling=plan.pooling, dropout=eff["dropout"],
                      seed=plan.seed)
    if infer_K(records) != cfg.K:
        raise ValidationError(f"manifest header K={cfg.K} but features imply K={infer_K(records)}")
    result = train(records, plan, config=cfg, dev_records=dev)
    result.checkpoint.meta.update(meta)
    result.checkpoint.meta["cell"] = _cell_name("train", plan, meta.get("subset"))
    result.checkpoint.meta["run"] = _provenance("train", eff)
    result.checkpoint.save(_out_path(eff["out"]))
    _emit_trace(result)


def cmd_finetune(eff):
    ckpt = load_checkpoint(eff["from_ckpt"])
    _, records = _load_records(eff["manifest"], ckpt.config.max_seq_len)
    meta = {}
    if eff.get("subset"):
        records, sel_meta = _subset(records, eff["subset"])
        meta["subset"] = sel_meta
        meta["draw"] = sel_meta.get("seed", 0)
    dev = _load_records(eff["dev_manifest"])[1] if eff.get("dev_manifest") else None
    eff = dict(eff, pooling=eff["pooling"] or ckpt.config.pooling.value)
    plan = _plan(eff, "P")
    result = finetune(ckpt, records, plan, dev_records=dev)
    result.checkpoint.meta.update(meta)
    result.checkpoint.meta["cell"] = _cell_name("finetune", plan, meta.get("subset"))
    result.checkpoint.meta["run"] = _provenance("finetune", eff)
    result.checkpoint.save(_out_path(eff["out"]))
    _emit_trace(result)


def cmd_select(eff):
    _, records = _load_records(eff["manifest"])
    strategy = Strategy(eff["strategy"])
    errors = None
    if strategy is Strategy.BEST:
        if not eff.get("ckpt"):
            raise ConfigConflictError("strategy 'best' ranks by absolute error and needs --ckpt")
        errors = absolute_errors(load_checkpoint(eff["ckpt"]), records)
    spec = SelectionSpec(eff["n"], strategy, bool(eff["balanced"]), B=eff["bins"], seed=eff["seed"])
    ids = select(make_pool(records, errors), spec)
    write_selection(_out_path(eff["out"]), ids, {**spec.to_dict(), **_provenance("select", eff)})


def cmd_evaluate(eff):
    _, records = _load_records(eff["manifest"])
    levels = eff["levels"].split(",") if isinstance(eff["levels"], str) else list(eff["levels"])
    for lvl in levels:
        if lvl not in LEVELS:
            raise ValidationError(f"unknown level {lvl!r}; expected {', '.join(LEVELS)}")
    if eff["gop_baseline"]:
        if eff.get("ckpt"):
            raise ConfigConflictError("--gop-baseline scores raw GOP and takes no --ckpt")
        report = evaluate_gop_baseline(records, n_boot=eff["nboot"], seed=eff["seed"])
        report.meta["cell"] = "gop"
    else:
        if not eff.get("ckpt"):
            raise UsageError("evaluate: give --ckpt (repeatable) or --gop-baseline")
        ckpts = [load_checkpoint(p) for p in eff["ckpt"]]
        report = evaluate(ckpts, records, levels=levels, n_boot=eff["nboot"], seed=eff["seed"])
        cells = [c.meta.get("cell") for c in ckpts]
        # several checkpoints of one system (seeds, draws) share its name
        if cells[0] and all(c for c in cells) and len({Cell.parse(c).system for c in cells}) == 1 \
                and len({Cell.parse(c).n for c in cells}) == 1:
            report.meta["cell"] = cells[0]
        report.meta["checkpoints"] = [{"path": str(p), "cell": c, "seed": ck.seed, "draw": ck.meta.get("draw")}
                                      for p, c, ck in zip(eff["ckpt"], cells, ckpts)]
    if eff.get("name"):
        report.meta["cell"] = eff["name"]
    report.meta["run"] = _provenance("evaluate", eff)
    report.save(_out_path(eff["out"]))
    for lvl, rep in report.levels.items():
        if rep is None:
            print(f"{lvl}\tn/a")
        else:
            mse = "n/a" if rep.mse_mean is None else f"{rep.mse_mean:.4f} +- {rep.mse_ci:.4f}"
            print(f"{lvl}\tPCC {rep.pcc_mean:.4f} +- {rep.pcc_ci:.4f}\tMSE {mse}")


def _report_files(entries) -> list[Path]:
    files = []
    for entry in entries:
        p = Path(entry)
        if p.is_dir():
            files += sorted(p.glob("*.report.json"))
        elif p.exists():
            files.append(p)
        else:
            raise FileNotFoundError(str(p))
    return files


def cmd_curves(eff):
    files = _report_files(eff["reports"])
    reports = []
    for path in files:
        rep = EvalReport.load(path)
        reports.append((report_cell(path, rep), rep))
    points = curve_points(reports, eff["level"])
    if not points:
        raise ValidationError(f"no report carries {eff['level']}-level PCC values")
    table = curves_table(points, header=_provenance("curves", eff))
    out = _out_path(eff["out"])
    out.write_text(table, encoding="utf-8")
    sys.stdout.write(table)
    if eff["plot"]:
        out.with_suffix(".svg").write_text(curves_svg(points, f"{eff['level']} PCC vs. labelled utterances"),
                                           encoding="utf-8")


def cmd_matrix(eff):
    keys = set(MatrixConfig.__dataclass_fields__)
    mcfg = MatrixConfig.from_dict({k: v for k, v in eff.items() if k in keys and v is not None})
    result = run_matrix(mcfg, eff["out"], jobs=eff["jobs"], dry_run=bool(eff["dry_run"]))
    if eff["dry_run"]:
        for name in result.scheduled:
            print(name)
    print(f"scheduled {len(result.scheduled)}\tskipped {len(result.skipped)}\t"
          f"executed {len(result.executed)}")


# ---------------------------------------------------------------------------
# parser


def _training_options(o: _Options, finetune_defaults: bool):
    o.add("--manifest", required=True, help="training manifest (JSONL)")
    o.add("--subset", help="selection file restricting the manifest")
    o.add("--dev-manifest", help="dev manifest, used by --select-best-dev")
    o.add("--regime", default=None if finetune_defaults else "U", choices=["UWP", "P", "W", "UW", "U"])
    o.add("--pooling", default=None if finetune_defaults else "attn", choices=["base", "mean", "attn"])
    o.add("--epochs", type=int, default=FINETUNE_EPOCHS if finetune_defaults else STAGE1_EPOCHS)
    o.add("--batch", type=int, default=BATCH_SIZE)
    o.add("--lr", type=float, default=LEARNING_RATE)
    o.add("--seed", type=int, default=0)
    o.flag("--select-best-dev", help="keep the epoch with the lowest dev loss")
    o.add("--out", required=True, help="checkpoint path")


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, tuple[_Options, callable]]]:
    parser = _Parser(prog="pronscore", description="Weakly supervised phoneme-level pronunciation scoring.")
    parser.add_argument("--version", action="version", version=f"pronscore {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    commands = {}

    def command(name, fn, help):
        p = sub.add_parser(name, help=help, description=help)
        p.add_argument("--config", help="flat JSON file of option values")
        o = _Options(p)
        commands[name] = (o, fn)
        return o

    o = command("synth", cmd_synth, "generate a synthetic labelled corpus")
    o.add("--spec", default="default", help="'default' or a JSON file of SynthSpec fields")
    o.add("--n-speakers", type=int)
    o.add("--utts-per-speaker", type=int)
    o.add("--K", dest="K", type=int)
    o.add("--noise-phone", type=float)
    o.add("--noise-word", type=float)
    o.add("--noise-utt", type=float)
    o.add("--feature-snr", type=float)
    o.add("--phone-bias", type=float)
    o.add("--phone-difficulty", type=float)
    o.add("--seed", type=int)
    o.add("--out", required=True)

    o = command("gop-features", cmd_gop_features, "build a manifest from posteriors and alignments")
    o.add("--posteriors", required=True, help="directory of <utt_id>.txt or <utt_id>.bin matrices")
    o.add("--alignments", required=True, help="lines: utt_id phone_id t_start t_end word_index")
    o.add("--utt2spk", help="lines: utt_id speaker_id")
    o.add("--labels", help="JSONL with utt_id, utt_label and word_labels (0-10), phone_labels (0-2)")
    o.add("--floor", type=float, default=1e-10, help="posterior floor applied on ingestion")
    o.add("--out", required=True)

    o = command("split", cmd_split, "speaker-disjoint train/dev/test split")
    o.add("--manifest", required=True)
    o.add("--fractions", default="5/7,1/7,1/7")
    o.add("--seed", type=int, default=0)
    o.add("--out", required=True, help="directory for train/dev/test.jsonl")

    o = command("train", cmd_train, "train a model from scratch")
    _training_options(o, finetune_defaults=False)
    o.add("--dropout", type=float, default=_MODEL_DEFAULTS["dropout"].default)
    o.add("--d-model", type=int, default=_MODEL_DEFAULTS["d_model"].default)
    o.add("--depth", type=int, default=_MODEL_DEFAULTS["depth"].default)
    o.add("--heads", type=int, default=_MODEL_DEFAULTS["n_heads"].default)
    o.add("--max-seq-len", type=int, default=_MODEL_DEFAULTS["max_seq_len"].default)

    o = command("finetune", cmd_finetune, "continue training a checkpoint")
    o.add("--from", dest="from_ckpt", required=True, help="checkpoint to start from")
    _training_options(o, finetune_defaults=True)

    o = command("select", cmd_select, "choose a stage-2 labelling subset")
    o.add("--manifest", required=True)
    o.add("--ckpt", help="stage-1 checkpoint scoring absolute errors (needed by 'best')")
    o.add("--n", type=int, required=True)
    o.add("--strategy", default="random", choices=["random", "best"])
    o.flag("--balanced", help="balance over equal-width utterance-score bins")
    o.add("--bins", type=int, default=5)
    o.add("--seed", type=int, default=0)
    o.add("--out", required=True)

    o = command("evaluate", cmd_evaluate, "bootstrap PCC/MSE per level")
    o.add("--ckpt", action="append", help="checkpoint; repeat to pool seeds and draws")
    o.flag("--gop-baseline", help="score raw GOP instead of a model")
    o.add("--manifest", required=True)
    o.add("--levels", default=",".join(LEVELS))
    o.add("--nboot", type=int, default=1000)
    o.add("--seed", type=int, default=0)
    o.add("--name", help="cell name recorded in the report")
    o.add("--out", required=True)

    o = command("curves", cmd_curves, "tabulate phone PCC against subset size")
    o.add("--reports", action="append", required=True, help="report file or directory; repeatable")
    o.add("--level", default="phone", choices=list(LEVELS))
    o.flag("--plot", help="also write an SVG next to --out")
    o.add("--out", required=True, help="table path (TSV)")

    o = command("matrix", cmd_matrix, "run a resumable grid of stage-1 and stage-2 cells")
    defaults = MatrixConfig.__dataclass_fields__
    o.add("--train-manifest", required=True)
    o.add("--dev-manifest", required=True)
    for key, conv in (("seeds", int), ("draws", int), ("n_values", int), ("strategies", str),
                      ("stages", str), ("stage1_regimes", str), ("poolings", str)):
        o.add("--" + key.replace("_", "-"), type=lambda s, c=conv: [c(x) for x in s.split(",")],
              default=list(defaults[key].default), help="comma-separated list")
    for key, conv in (("regime", str), ("stage1_epochs", int), ("finetune_epochs", int),
                      ("scratch_epochs", int), ("batch", int), ("lr", float), ("dropout", float),
                      ("bins", int), ("nboot", int), ("eval_seed", int)):
        o.add("--" + key.replace("_", "-"), type=conv, default=defaults[key].default)
    o.add("--jobs", type=int, default=1)
    o.flag("--dry-run", help="list the scheduled cells without running them")
    o.add("--out", required=True, help="directory for cell artifacts")
    return parser, commands


def main(argv=None) -> int:
    parser, commands = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        _emit_error("UsageError", "no subcommand given", EXIT_USAGE)
        return EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    opts, fn = commands[args.command]
    try:
        fn(resolve(args, opts))
    except UsageError as exc:
        _emit_error("UsageError", str(exc), EXIT_USAGE)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        _emit_error("FileNotFoundError", str(exc), EXIT_MISSING_FILE)
        return EXIT_MISSING_FILE
    except PronScoreError as exc:
        _emit_error(type(exc).__name__, str(exc), exc.exit_code)
        return exc.exit_code
    except (OSError, ValueError, IndexError, KeyError) as exc:
        _emit_error(type(exc).__name__, str(exc), EXIT_OTHER)
        return EXIT_OTHER
    return 0


if __name__ == "__main__":
    sys.exit(main())
