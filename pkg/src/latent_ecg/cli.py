"""Command-line entry point: ``latent-ecg <subcommand>``.

Each subcommand reads an optional JSON config file (keys of
:class:`~latent_ecg.pipeline.PipelineConfig`), applies ``--preset``,
``--set key=value`` and explicit flag overrides in that order, and writes a
``<stage>.manifest.json`` next to its outputs.

Exit codes: 0 success, 1 runtime failure, 2 usage error (bad flag, bad
config key, missing input).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import beats as beats_mod
from .beats import BeatClass, downsample, read_beats_jsonl, write_beats_jsonl
from .gbdt import GbdtModel
from .gbdt import fit as fit_gbdt
from .latent_ode import (
    LatentOdeModel,
    LatentVector,
    TrainConfig,
    init_model,
    read_latents_csv,
    train,
    write_latents_csv,
)
from .metrics import CLASS_NAMES, emit_report
from .ode import SolverConfig
from .pipeline import (
    DESK_PRESET,
    ExperimentManifest,
    PipelineConfig,
    Prediction,
    class_capped_subset,
    encode_beats,
    frequency_factor,
    latent_matrix,
    predict_ensemble,
    predictions_to_report,
    split_dataset,
)
from .smote import smote
from .synthetic import SurrogateConfig, write_surrogate_corpus

logger = logging.getLogger("latent_ecg")

PRESETS = {"paper": {}, "desk": DESK_PRESET}
CORPUS_ENV = "ECG_CORPUS_ROOT"


class UsageError(Exception):
    """Bad invocation: reported with exit code 2."""


# ---------------------------------------------------------------------------
# config handling
# ---------------------------------------------------------------------------


def _parse_set(items: list[str]) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            out[key.strip()] = json.loads(raw)
        except json.JSONDecodeError:
            out[key.strip()] = raw
    return out


def resolve_config(args: argparse.Namespace, flag_overrides: dict | None = None) -> PipelineConfig:
    values: dict = {}
    if args.preset:
        values.update(PRESETS[args.preset])
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file {path} does not exist")
        try:
            loaded = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path} is not valid JSON: {exc}") from None
        # a stage manifest can stand in for a config file
        if isinstance(loaded, dict) and {"stage", "config"} <= loaded.keys():
            loaded = loaded["config"]
        values.update(loaded)
    values.update(_parse_set(args.set))
    values.update({k: v for k, v in (flag_overrides or {}).items() if v is not None})
    try:
        return PipelineConfig.from_dict(values)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def _require(path: str | os.PathLike | None, what: str) -> Path:
    if path is None:
        raise UsageError(f"missing {what}")
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} {p} does not exist")
    return p


def _out_dir(path: str) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _write_manifest(stage: str, out_dir: Path, config: PipelineConfig | dict, inputs: dict, outputs: dict, extra=None) -> Path:
    cfg = config.to_dict() if isinstance(config, PipelineConfig) else config
    manifest = ExperimentManifest.build(stage, cfg, inputs, outputs, out_dir, extra)
    path = out_dir / f"{stage}.manifest.json"
    manifest.write(path)
    return path


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def cmd_synth(args, cfg: PipelineConfig) -> None:
    out = _out_dir(args.out)
    sc = SurrogateConfig(n_records=args.records, duration_s=args.duration, seed=args.seed if args.seed is not None else cfg.seed)
    names = write_surrogate_corpus(out, sc)
    files = {f"{n}.{ext}": out / f"{n}.{ext}" for n in names for ext in ("hea", "dat", "atr")}
    _write_manifest("synth", out, {"surrogate": vars(sc)}, {}, files)
    print(json.dumps({"records": names}))


def cmd_ingest(args, cfg: PipelineConfig) -> None:
    out = _out_dir(args.out)
    inputs = {}
    if args.beats_csv:
        src = _require(args.beats_csv, "beat CSV")
        beats = beats_mod.read_beats_csv(src)
        summary = {"n_beats": len(beats), "class_counts": _class_counts(beats), "source": "csv"}
        inputs["beats_csv"] = src
    else:
        root = args.corpus or os.environ.get(CORPUS_ENV)
        if root is None:
            raise UsageError(f"pass --corpus or set {CORPUS_ENV}")
        root = _require(root, "corpus directory")
        records = args.records.split(",") if args.records else None
        beats, summary = beats_mod.ingest_corpus(root, records, n_jobs=args.jobs)
        for name in summary["records"]:
            for ext in ("hea", "dat", "atr"):
                inputs[f"{name}.{ext}"] = root / f"{name}.{ext}"
    beats_path = out / "beats.jsonl"
    write_beats_jsonl(beats, beats_path)
    summary_path = out / "ingest_summary.json"
    summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _write_manifest("ingest", out, cfg, inputs, {"beats": beats_path, "summary": summary_path})
    print(json.dumps({"n_beats": summary["n_beats"], "class_counts": summary["class_counts"]}))


def _class_counts(beats) -> dict:
    counts = {c.name: 0 for c in BeatClass}
    for b in beats:
        counts[b.label.name] += 1
    return counts


def cmd_split(args, cfg: PipelineConfig) -> None:
    out = _out_dir(args.out)
    src = _require(args.beats, "beat file")
    beats = read_beats_jsonl(src)
    if cfg.subset_per_class:
        beats = class_capped_subset(beats, cfg.subset_per_class, cfg.seed)
    parts = split_dataset(beats, cfg.ratios, cfg.seed, by_patient=cfg.split_by_patient)
    outputs, summary = {}, {}
    for name, part in zip(("train", "val", "test"), parts):
        path = out / f"{name}.jsonl"
        write_beats_jsonl(part, path)
        outputs[name] = path
        summary[name] = {"n_beats": len(part), "class_counts": _class_counts(part)}
    summary_path = out / "split_summary.json"
    summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    outputs["summary"] = summary_path
    _write_manifest("split", out, cfg, {"beats": src}, outputs)
    print(json.dumps(summary))


def _stack(beats) -> tuple[np.ndarray, np.ndarray]:
    times, values, _ = beats_mod.beats_to_matrix(beats)
    return times, values


def cmd_train_ode(args, cfg: PipelineConfig) -> None:
    out = _out_dir(args.out)
    train_path = _require(args.train, "training beat file")
    inputs = {"train": train_path}
    times, values = _stack(read_beats_jsonl(train_path))
    val_values = None
    if args.val:
        val_path = _require(args.val, "validation beat file")
        inputs["val"] = val_path
        _, val_values = _stack(read_beats_jsonl(val_path))
    solver = SolverConfig(rtol=cfg.rtol, atol=cfg.atol, initial_dt=cfg.initial_dt)
    tc = TrainConfig(
        steps=cfg.steps,
        batch_size=cfg.batch_size,
        learning_rate=cfg.learning_rate,
        path_weight=cfg.path_weight,
        solver=solver,
        seed=cfg.seed,
        eval_every=cfg.eval_every,
        encoder_strides=cfg.encoder_strides,
    )
    model = init_model(cfg.latent_dim, cfg.hidden_dim, cfg.width, cfg.depth, seed=cfg.seed, solver=solver, time_scale=cfg.time_scale)
    log_path = out / "train_log.csv"
    model, log = train(values, times, tc, model=model, val_values=val_values, log_path=log_path)
    model_path = out / "latent_ode.json"
    model.save(model_path)
    vals = [r["val_mse"] for r in log if r["val_mse"] != ""]
    extra = {
        "steps_run": log[-1]["step"] if log else 0,
        "initial_val_mse": vals[0] if vals else None,
        "best_val_mse": min(vals) if vals else None,
    }
    _write_manifest("train-ode", out, cfg, inputs, {"model": model_path, "log": log_path}, extra)
    print(json.dumps(extra))


def cmd_encode(args, cfg: PipelineConfig) -> None:
    model_path = _require(args.model, "latent ODE checkpoint")
    beats_path = _require(args.beats, "beat file")
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    model = LatentOdeModel.load(model_path)
    beats = read_beats_jsonl(beats_path)
    factor = frequency_factor(args.frequency)
    if factor != 1:
        beats = [downsample(b, factor) for b in beats]
    latents = encode_beats(model, beats, cfg.seed, n_jobs=args.jobs)
    write_latents_csv(out_path, latents)
    _write_manifest(
        f"encode-{out_path.stem}",
        out_path.parent,
        cfg,
        {"model": model_path, "beats": beats_path},
        {"latents": out_path},
        {"frequency": args.frequency},
    )
    print(json.dumps({"n_latents": len(latents), "frequency": args.frequency}))


def _latents_to_xy(path: Path) -> tuple[np.ndarray, np.ndarray]:
    latents = read_latents_csv(path)
    if not latents:
        raise UsageError(f"{path} holds no latent vectors")
    return latent_matrix(latents)


def cmd_balance(args, cfg: PipelineConfig) -> None:
    src = _require(args.latents, "latent export")
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    X, y = _latents_to_xy(src)
    Xb, yb = smote(X, y, k=cfg.smote_k, seed=cfg.seed)
    rows = [LatentVector(z0=x, seed=-1, beat_id=f"smote:{i}", effective_frequency=0.0, label=CLASS_NAMES[int(c)]) for i, (x, c) in enumerate(zip(Xb, yb))]
    write_latents_csv(out_path, rows)
    counts = {CLASS_NAMES[c]: int(n) for c, n in zip(*np.unique(yb, return_counts=True))}
    _write_manifest(f"balance-{out_path.stem}", out_path.parent, cfg, {"latents": src}, {"balanced": out_path}, {"class_counts": counts})
    print(json.dumps({"class_counts": counts}))


def cmd_train_gbdt(args, cfg: PipelineConfig) -> None:
    src = _require(args.train, "training latents")
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    inputs = {"train": src}
    X, y = _latents_to_xy(src)
    X_val = y_val = None
    if args.val:
        val = _require(args.val, "validation latents")
        inputs["val"] = val
        X_val, y_val = _latents_to_xy(val)
    model = fit_gbdt(X, y, cfg.gbdt_config(), X_val, y_val)
    model.save(out_path)
    extra = {"rounds": model.n_rounds, "final_train_logloss": model.train_loss[-1] if model.train_loss else None}
    _write_manifest(f"train-gbdt-{out_path.stem}", out_path.parent, cfg, inputs, {"model": out_path}, extra)
    print(json.dumps(extra))


def _write_predictions(path: Path, preds: list[Prediction]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["beat_id", "label", "final", "votes", *[f"p_{c}" for c in CLASS_NAMES]])
        for p in preds:
            w.writerow(
                [
                    p.beat_id,
                    p.label.name if p.label is not None else "",
                    p.final.name,
                    " ".join(v.name for v in p.votes),
                    *[repr(float(x)) for x in p.mean_probability],
                ]
            )


def _read_predictions(path: Path) -> list[Prediction]:
    preds = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            probs = np.array([[float(row[f"p_{c}"]) for c in CLASS_NAMES]])
            preds.append(
                Prediction(
                    beat_id=row["beat_id"],
                    votes=[BeatClass[v] for v in row["votes"].split()],
                    final=BeatClass[row["final"]],
                    probabilities=probs,
                    label=BeatClass[row["label"]] if row["label"] else None,
                )
            )
    return preds


def _predict(model, gbdt, beats, frequency: int, cfg: PipelineConfig) -> list[Prediction]:
    factor = frequency_factor(frequency)
    out = []
    for beat in beats:
        b = downsample(beat, factor) if factor != 1 else beat
        out.append(predict_ensemble(model, gbdt, b, cfg.ensemble, cfg.seed))
    return out


def cmd_predict(args, cfg: PipelineConfig) -> None:
    model_path = _require(args.model, "latent ODE checkpoint")
    gbdt_path = _require(args.gbdt, "GBDT model")
    beats_path = _require(args.beats, "beat file")
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    preds = _predict(LatentOdeModel.load(model_path), GbdtModel.load(gbdt_path), read_beats_jsonl(beats_path), args.frequency, cfg)
    _write_predictions(out_path, preds)
    _write_manifest(
        f"predict-{out_path.stem}",
        out_path.parent,
        cfg,
        {"model": model_path, "gbdt": gbdt_path, "beats": beats_path},
        {"predictions": out_path},
        {"frequency": args.frequency},
    )
    print(json.dumps({"n_predictions": len(preds), "frequency": args.frequency}))


def _report_from_predictions(paths: dict[int, Path], out: Path):
    reports = []
    for f, path in sorted(paths.items(), key=lambda kv: -kv[0]):
        preds = _read_predictions(path)
        if any(p.label is None for p in preds):
            raise UsageError(f"{path} has unlabelled beats; cannot evaluate")
        reports.append(predictions_to_report(preds, f))
    return reports, emit_report(reports, out)


def cmd_evaluate(args, cfg: PipelineConfig) -> None:
    model_path = _require(args.model, "latent ODE checkpoint")
    gbdt_path = _require(args.gbdt, "GBDT model")
    beats_path = _require(args.beats, "beat file")
    out = _out_dir(args.out)
    model = LatentOdeModel.load(model_path)
    gbdt = GbdtModel.load(gbdt_path)
    beats = read_beats_jsonl(beats_path)
    pred_paths = {}
    for f in cfg.frequencies:
        path = out / f"predictions_{f}hz.csv"
        _write_predictions(path, _predict(model, gbdt, beats, f, cfg))
        pred_paths[f] = path
    reports, files = _report_from_predictions(pred_paths, out)
    outputs = {p.name: p for p in files}
    outputs.update({p.name: p for p in pred_paths.values()})
    summary = {str(r.frequency): {"macro_f1": r.macro_f1, "macro_auc": r.macro_auc} for r in reports}
    _write_manifest("evaluate", out, cfg, {"model": model_path, "gbdt": gbdt_path, "beats": beats_path}, outputs, summary)
    print(json.dumps(summary, sort_keys=True))


def cmd_report(args, cfg: PipelineConfig) -> None:
    out = _out_dir(args.out)
    paths = {}
    for item in args.predictions:
        if "=" not in item:
            raise UsageError(f"--predictions expects FREQ=PATH, got {item!r}")
        f, p = item.split("=", 1)
        paths[int(f)] = _require(p, "prediction file")
    reports, files = _report_from_predictions(paths, out)
    _write_manifest("report", out, cfg, {f"{f}hz": p for f, p in paths.items()}, {p.name: p for p in files})
    print(json.dumps({str(r.frequency): {"macro_f1": r.macro_f1, "macro_auc": r.macro_auc} for r in reports}, sort_keys=True))


def cmd_run(args, cfg: PipelineConfig) -> None:
    """All stages in sequence under one output directory."""
    out = _out_dir(args.out)
    ns = argparse.Namespace
    base = {"config": None, "set": [], "preset": None}
    steps = [
        (cmd_ingest, ns(**base, out=str(out / "ingest"), corpus=args.corpus, records=None, beats_csv=None, jobs=1)),
        (cmd_split, ns(**base, out=str(out / "split"), beats=str(out / "ingest" / "beats.jsonl"))),
        (cmd_train_ode, ns(**base, out=str(out / "ode"), train=str(out / "split" / "train.jsonl"), val=str(out / "split" / "val.jsonl"))),
        (
            cmd_encode,
            ns(
                **base,
                model=str(out / "ode" / "latent_ode.json"),
                beats=str(out / "split" / "train.jsonl"),
                out=str(out / "latents" / "train.csv"),
                frequency=360,
                jobs=1,
            ),
        ),
        (
            cmd_encode,
            ns(
                **base,
                model=str(out / "ode" / "latent_ode.json"),
                beats=str(out / "split" / "val.jsonl"),
                out=str(out / "latents" / "val.csv"),
                frequency=360,
                jobs=1,
            ),
        ),
        (cmd_balance, ns(**base, latents=str(out / "latents" / "train.csv"), out=str(out / "latents" / "train_balanced.csv"))),
        (
            cmd_train_gbdt,
            ns(**base, train=str(out / "latents" / "train_balanced.csv"), val=str(out / "latents" / "val.csv"), out=str(out / "gbdt" / "gbdt.json")),
        ),
        (
            cmd_evaluate,
            ns(
                **base,
                model=str(out / "ode" / "latent_ode.json"),
                gbdt=str(out / "gbdt" / "gbdt.json"),
                beats=str(out / "split" / "test.jsonl"),
                out=str(out / "eval"),
            ),
        ),
    ]
    for fn, stage_args in steps:
        logger.info("running %s", fn.__name__[4:].replace("_", "-"))
        fn(stage_args, cfg)


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--preset", choices=sorted(PRESETS), help="named settings applied before the config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (JSON value)")
    common.add_argument("--seed", type=int, help="run seed (splits, sampling, training)")
    common.add_argument("--log-level", default="WARNING")

    parser = argparse.ArgumentParser(prog="latent-ecg", description="Latent-ODE ECG beat classification pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic surrogate WFDB corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--records", type=int, default=12)
    p.add_argument("--duration", type=float, default=300.0, help="seconds per record")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", parents=[common], help="parse WFDB records into labelled beats")
    p.add_argument("--corpus", help=f"record directory (default ${CORPUS_ENV})")
    p.add_argument("--records", help="comma-separated record names (default: every .hea)")
    p.add_argument("--beats-csv", help="import pre-segmented beats instead")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("split", parents=[common], help="train/validation/test split")
    p.add_argument("--beats", required=True)
    p.add_argument("--split-by-patient", action="store_true", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train-ode", parents=[common], help="train the latent ODE")
    p.add_argument("--train", required=True)
    p.add_argument("--val")
    p.add_argument("--steps", type=int)
    p.add_argument("--latent-dim", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_ode)

    p = sub.add_parser("encode", parents=[common], help="export latent vectors")
    p.add_argument("--model", required=True)
    p.add_argument("--beats", required=True)
    p.add_argument("--frequency", type=int, default=360)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True, help="latent CSV path")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("balance", parents=[common], help="SMOTE-balance a latent export")
    p.add_argument("--latents", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_balance)

    p = sub.add_parser("train-gbdt", parents=[common], help="fit the GBDT classifier")
    p.add_argument("--train", required=True)
    p.add_argument("--val")
    p.add_argument("--rounds", type=int)
    p.add_argument("--out", required=True, help="model JSON path")
    p.set_defaults(func=cmd_train_gbdt)

    p = sub.add_parser("predict", parents=[common], help="ensemble predictions for beats")
    p.add_argument("--model", required=True)
    p.add_argument("--gbdt", required=True)
    p.add_argument("--beats", required=True)
    p.add_argument("--frequency", type=int, default=360)
    p.add_argument("--ensemble", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", parents=[common], help="evaluate at several sampling frequencies")
    p.add_argument("--model", required=True)
    p.add_argument("--gbdt", required=True)
    p.add_argument("--beats", required=True)
    p.add_argument("--frequencies", type=_int_list)
    p.add_argument("--ensemble", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", parents=[common], help="build reports from prediction files")
    p.add_argument("--predictions", nargs="+", required=True, metavar="FREQ=PATH")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("run", parents=[common], help="run every stage end to end")
    p.add_argument("--corpus")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_run)
    return parser


_FLAG_KEYS = {
    "seed": "seed",
    "steps": "steps",
    "latent_dim": "latent_dim",
    "rounds": "gbdt_rounds",
    "ensemble": "ensemble",
    "frequencies": "frequencies",
    "split_by_patient": "split_by_patient",
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed the usage message
        return int(exc.code or 0)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = {cfg_key: getattr(args, flag) for flag, cfg_key in _FLAG_KEYS.items() if hasattr(args, flag)}
        if args.command == "synth":
            overrides.pop("seed", None)
        cfg = resolve_config(args, overrides)
        args.func(args, cfg)
    except UsageError as exc:
        print(json.dumps({"error": "usage", "command": args.command, "message": str(exc)}), file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - report any runtime failure as structured output
        logger.debug("failure", exc_info=True)
        print(json.dumps({"error": type(exc).__name__, "command": args.command, "message": str(exc)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
