"""Command-line entry point: ``survdef {simulate,ingest,train,evaluate,predict}``.

Exit status: 0 on success, 1 for user errors (bad flags, unreadable or
malformed inputs, incompatible files), 2 for internal errors.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import evaluation
from .alignment import AlignedObservation, Standardizer, read_events, vectorize
from .compute import RngStream
from .config import RunConfig, UserError
from .inference import (
    TrainingDiverged,
    factors_for,
    fit,
    infer_factor_for_new,
    init_state,
)
from .io import (
    Checkpoint,
    FormatError,
    canonical_dumps,
    dataset_header,
    manifest,
    read_header,
    read_observations,
    write_observations,
    write_text,
)
from .model import GROUPS, Batch, ChannelRegistry, posterior_predictive_time
from .pipeline import SPLITS, prepare
from .synth import generate_cohort

log = logging.getLogger("survdef")

MAX_MALFORMED_FRACTION = 0.01
METRICS_VERSION = 1
PREDICTIONS_VERSION = 1


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UserError(message)


def _parse_split(text: str | None):
    if text is None:
        return None
    try:
        parts = tuple(float(x) for x in text.split(","))
    except ValueError as e:
        raise UserError(f"--split expects three comma-separated fractions, got {text!r}") from e
    return parts


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(getattr(args, "config", None), getattr(args, "preset", None))
    overrides = {}
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
        overrides["seed"] = args.seed
    if getattr(args, "iterations", None) is not None:
        overrides["iterations"] = args.iterations
    if getattr(args, "workers", None) is not None:
        overrides["workers"] = args.workers
    if getattr(args, "k", None) is not None:
        if args.k < 1:
            raise UserError("--k must be positive")
        cfg.model.latent_dim = args.k
    split = _parse_split(getattr(args, "split", None))
    if split is not None:
        cfg = RunConfig(cfg.train, cfg.model, cfg.cohort, cfg.event_definition, split, cfg.critical_channels,
                        cfg.min_months, cfg.seed)
    if overrides:
        d = cfg.train.to_dict()
        d.update(overrides)
        try:
            cfg.train = type(cfg.train)(**d)
        except ValueError as e:
            raise UserError(str(e)) from e
    return cfg


# ---------------------------------------------------------------- simulate

def cmd_simulate(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    cohort = generate_cohort(cfg.cohort, RngStream(cfg.seed))
    events_text = "".join(line + "\n" for line in cohort.event_lines())
    truth_text = canonical_dumps(cohort.truth)
    write_text(out / "events.jsonl", events_text)
    write_text(out / "truth.json", truth_text)
    man = manifest("simulate", cfg.seed, cfg.cohort.to_dict(),
                   {"events.jsonl": events_text, "truth.json": truth_text})
    write_text(out / "manifest.json", canonical_dumps(man))
    print(f"simulated {cfg.cohort.num_patients} patients, {len(cohort.events)} events -> {out}")
    return 0


# ---------------------------------------------------------------- ingest

def cmd_ingest(args) -> int:
    cfg = _load_config(args)
    try:
        with open(args.events) as fh:
            lines = fh.readlines()
    except OSError as e:
        raise UserError(f"cannot read events {args.events}: {e}") from e
    events, errors = read_events(lines)
    n_lines = sum(1 for line in lines if line.strip())
    for err in errors[:20]:
        log.warning("line %d: %s", err.line_no, err.message)
    if n_lines and len(errors) / n_lines > MAX_MALFORMED_FRACTION:
        raise UserError(f"{len(errors)} of {n_lines} lines are malformed (limit {MAX_MALFORMED_FRACTION:.0%})")
    prep = prepare(events, cfg.event_definition, cfg.split, cfg.critical_channels, cfg.min_months)
    out = Path(args.out)
    report = {
        "completeness": prep.report.to_dict(),
        "excluded_short_records": len(prep.excluded_short),
        "malformed_lines": len(errors),
        "observations": {s: len(prep.observations[s]) for s in SPLITS},
        "patients": {s: len({o.patient_id for o in prep.observations[s]}) for s in SPLITS},
    }
    header = dataset_header(prep.registry, prep.stats, prep.groups, report)
    write_text(out / "registry.json", canonical_dumps(header))
    for s in SPLITS:
        write_observations(out / f"{s}.jsonl", prep.observations[s])
    write_text(out / "report.json", canonical_dumps(report))
    print(f"ingested {len(events)} events: " + ", ".join(f"{s}={report['observations'][s]}" for s in SPLITS)
          + f"; excluded {len(prep.excluded_short)} short records")
    return 0


def _load_dataset(data_dir, split: str):
    data_dir = Path(data_dir)
    try:
        header = read_header(data_dir / "registry.json")
        observations = read_observations(data_dir / f"{split}.jsonl")
    except OSError as e:
        raise UserError(f"cannot read dataset in {data_dir}: {e}") from e
    except (FormatError, json.JSONDecodeError) as e:
        raise UserError(str(e)) from e
    return header, observations


# ---------------------------------------------------------------- train

def cmd_train(args) -> int:
    cfg = _load_config(args)
    header, train_obs = _load_dataset(args.data, "train")
    _, val_obs = _load_dataset(args.data, "validation")
    registry = ChannelRegistry.from_dict(header["registry"])
    stats = Standardizer.from_dict(header["stats"])
    train = vectorize(train_obs, registry, stats, warn_unknown=False)
    validation = vectorize(val_obs, registry, stats, warn_unknown=False) if val_obs else None
    if len(train) == 0:
        raise UserError("training split is empty")
    out = Path(args.out)

    if args.resume:
        ckpt = _read_checkpoint(args.resume)
        _require_same_registry(ckpt.registry, registry)
        train_cfg = ckpt.train_config
        if args.iterations is not None or args.workers is not None:
            d = train_cfg.to_dict()
            if args.iterations is not None:
                d["iterations"] = args.iterations
            if args.workers is not None:
                d["workers"] = args.workers
            train_cfg = type(train_cfg)(**d)
        def_cfg = ckpt.def_config
        state = ckpt.state
        if len(state.factors) != len(train):
            raise UserError("checkpoint factors do not match the training split size")
    else:
        train_cfg = cfg.train
        def_cfg = cfg.model.def_config()
        state = init_state(train, train_cfg, def_cfg, registry)

    def snapshot(st) -> Checkpoint:
        return Checkpoint(def_cfg, train_cfg, registry, stats, st)

    trace_lines = []
    every = args.checkpoint_every

    def callback(st, entry):
        trace_lines.append(json.dumps(entry.to_dict(), sort_keys=True))
        if every and st.iteration % every == 0 and st.iteration < train_cfg.iterations:
            snapshot(st).save(out / f"checkpoint-{st.iteration:06d}.json")

    stop_at = args.stop_at if args.stop_at is not None else train_cfg.iterations
    try:
        result = fit(train, train_cfg, def_cfg, registry, validation=validation, state=state, stop_at=stop_at,
                     callback=callback)
    except TrainingDiverged as e:
        write_text(out / "divergence.json", json.dumps(e.snapshot, sort_keys=True))
        print(f"training diverged: {e}; diagnostics in {out / 'divergence.json'}", file=sys.stderr)
        return 2
    final = snapshot(result.state)
    final.save(out / "checkpoint.json")
    trace_path = out / "trace.jsonl"
    previous = trace_path.read_text() if args.resume and trace_path.exists() else ""
    write_text(trace_path, previous + "".join(line + "\n" for line in trace_lines))
    last = result.trace[-1].elbo if result.trace else float("nan")
    print(f"trained to iteration {result.state.iteration}; last ELBO estimate {last:.4f} -> {out / 'checkpoint.json'}")
    return 0


def _read_checkpoint(path) -> Checkpoint:
    try:
        return Checkpoint.load(path)
    except OSError as e:
        raise UserError(f"cannot read checkpoint {path}: {e}") from e
    except (FormatError, json.JSONDecodeError, KeyError) as e:
        raise UserError(f"bad checkpoint {path}: {e}") from e


def _require_same_registry(model_registry: ChannelRegistry, data_registry: ChannelRegistry) -> None:
    if model_registry == data_registry:
        return
    missing = sorted(set(model_registry.names) - set(data_registry.names))
    extra = sorted(set(data_registry.names) - set(model_registry.names))
    detail = []
    if missing:
        detail.append(f"channels missing from the dataset: {', '.join(missing)}")
    if extra:
        detail.append(f"channels unknown to the model: {', '.join(extra)}")
    if not detail:
        detail.append("channel order or groups differ")
    raise UserError("registry mismatch: " + "; ".join(detail))


# ---------------------------------------------------------------- evaluate

def evaluate_dataset(ckpt: Checkpoint, data, seed: int, ablation: bool = False, workers: int | None = None,
                     truth_times=None) -> tuple[dict, list]:
    """Metrics dictionary and per-risk-group Kaplan-Meier curves for one split."""
    train_cfg = ckpt.train_config
    if workers is not None:
        d = train_cfg.to_dict()
        d["workers"] = workers
        train_cfg = type(train_cfg)(**d)
    rng = RngStream(seed).child("evaluate")
    cfg, params, registry = ckpt.def_config, ckpt.params, ckpt.registry
    f = factors_for(cfg, params, data, registry, train_cfg, rng.child("factors"))
    pp = posterior_predictive_time(cfg, params, f.mu[0], f.sd[0], train_cfg.predictive_mc, rng.child("predictive"))
    t, event = data.batch.t, data.batch.event
    conc = evaluation.concordance(pp.risk, t, event)
    metrics = {
        "format_version": METRICS_VERSION,
        "num_observations": len(data),
        "concordance": {"value": conc.value, "comparable": conc.comparable, "concordant": conc.concordant,
                        "tied": conc.tied},
        "predictive_log_likelihood": evaluation.predictive_log_likelihood(
            cfg, params, f.mu[0], f.sd[0], t, event, train_cfg.predictive_mc, rng.child("pll")),
        "expected_log_likelihood": evaluation.expected_log_likelihood(
            cfg, params, f.mu[0], f.sd[0], t, event, train_cfg.predictive_mc, rng.child("pll")),
    }
    if truth_times is not None:
        tc = evaluation.concordance(pp.risk, truth_times, np.ones(len(truth_times), dtype=bool))
        metrics["concordance_truth"] = {"value": tc.value, "comparable": tc.comparable}
    if ablation:
        per_group = {}
        for g in GROUPS:
            fg = factors_for(cfg, params, data, registry, train_cfg, rng.child(("ablation", g)), mask_groups=(g,))
            per_group[g] = evaluation.predictive_log_likelihood(
                cfg, params, fg.mu[0], fg.sd[0], t, event, train_cfg.predictive_mc, rng.child(("ablation_pll", g)))
        metrics["ablation"] = per_group
    curves = evaluation.km_by_risk_group(pp.risk, t, event, 3)
    return metrics, curves


def cmd_evaluate(args) -> int:
    ckpt = _read_checkpoint(args.checkpoint)
    header, obs = _load_dataset(args.data, args.split)
    _require_same_registry(ckpt.registry, ChannelRegistry.from_dict(header["registry"]))
    if not obs:
        raise UserError(f"split {args.split!r} is empty")
    data = vectorize(obs, ckpt.registry, ckpt.stats, warn_unknown=False)
    truth_times = None
    if args.truth:
        from .pipeline import stack_truth_times
        try:
            with open(args.truth) as fh:
                truth_times = stack_truth_times(json.load(fh), data)
        except (OSError, KeyError, json.JSONDecodeError) as e:
            raise UserError(f"cannot use ground truth {args.truth}: {e}") from e
    seed = args.seed if args.seed is not None else ckpt.train_config.seed
    metrics, curves = evaluate_dataset(ckpt, data, seed, args.ablation, args.workers, truth_times)
    metrics["split"] = args.split
    out = Path(args.out)
    metrics["km_curves"] = []
    for i, curve in enumerate(curves):
        name = f"km_risk_group_{i}.txt"
        write_text(out / name, curve.to_text())
        metrics["km_curves"].append(name)
    write_text(out / "metrics.json", canonical_dumps(metrics))
    for key in ("concordance", "predictive_log_likelihood"):
        v = metrics[key]["value"] if key == "concordance" else metrics[key]
        print(f"{key}={v}")
    for g, v in metrics.get("ablation", {}).items():
        print(f"ablation.{g}={v}")
    return 0


# ---------------------------------------------------------------- predict

def read_covariate_rows(path) -> list[dict]:
    rows = []
    try:
        with open(path) as fh:
            for no, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    d = json.loads(line)
                    rows.append({"id": d.get("id", no), "covariates": dict(d.get("covariates", {}))})
                except (json.JSONDecodeError, TypeError, ValueError) as e:
                    raise UserError(f"{path}:{no}: bad covariate row ({e})") from e
    except OSError as e:
        raise UserError(f"cannot read covariates {path}: {e}") from e
    return rows


def predict_rows(ckpt: Checkpoint, rows: list[dict], seed: int, num_samples: int | None = None,
                 workers: int | None = None, quantiles=(0.1, 0.5, 0.9)) -> list[dict]:
    registry, stats, cfg = ckpt.registry, ckpt.stats, ckpt.def_config
    known = set(registry.names)
    unknown = sorted({c for r in rows for c in r["covariates"]} - known)
    if unknown:
        log.warning("masking %d unknown channel(s): %s", len(unknown), ", ".join(unknown[:10]))
    obs = []
    for r in rows:
        covs = {c: v for c, v in r["covariates"].items() if c in known}
        obs.append(AlignedObservation("row", 0, 1.0, False, covs))
    data = vectorize(obs, registry, stats, warn_unknown=False)
    batch = Batch(data.batch.x_real, data.batch.m_real, data.batch.x_bin, data.batch.m_bin)
    tc = ckpt.train_config
    rng = RngStream(seed).child("predict")
    f = infer_factor_for_new(cfg, ckpt.params, batch, registry, rng.child("factors"), steps=tc.infer_steps,
                             lr=tc.infer_learning_rate, mc_samples=tc.infer_mc_samples, init_sd=tc.init_factor_sd,
                             workers=workers if workers is not None else tc.workers)
    n = num_samples if num_samples is not None else tc.predictive_mc
    pp = posterior_predictive_time(cfg, ckpt.params, f.mu[0], f.sd[0], n, rng.child("predictive"), quantiles)
    out = []
    for i, r in enumerate(rows):
        out.append({
            "id": r["id"],
            "risk": float(pp.risk[i]),
            "predicted_mean_time": float(pp.mean[i]),
            "quantiles": {repr(q): float(pp.quantiles[q][i]) for q in quantiles},
        })
    return out


def cmd_predict(args) -> int:
    ckpt = _read_checkpoint(args.checkpoint)
    rows = read_covariate_rows(args.covariates)
    seed = args.seed if args.seed is not None else ckpt.train_config.seed
    preds = predict_rows(ckpt, rows, seed, args.num_samples, args.workers)
    text = "".join(canonical_dumps(p) + "\n" for p in preds)
    write_text(args.out, text)
    print(f"predicted {len(preds)} rows -> {args.out}")
    return 0


# ---------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="survdef", description="Deep survival model over monthly EHR-style records.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, preset=True):
        sp.add_argument("--config", help="run configuration (JSON)")
        sp.add_argument("--seed", type=int, help="override the configured seed")
        if preset:
            sp.add_argument("--preset", choices=("desk", "paper"), help="scale preset applied under the config")

    s = sub.add_parser("simulate", help="generate a synthetic cohort")
    common(s)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("ingest", help="bin, align and split raw events")
    common(s)
    s.add_argument("--events", required=True, help="raw event file (JSON lines)")
    s.add_argument("--out", required=True, help="output dataset directory")
    s.add_argument("--split", help="train,validation,test fractions, e.g. 0.84,0.08,0.08")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("train", help="fit the model")
    common(s)
    s.add_argument("--data", required=True, help="dataset directory from ingest")
    s.add_argument("--out", required=True, help="output directory for checkpoints and trace")
    s.add_argument("--k", type=int, help="latent dimension per layer")
    s.add_argument("--iterations", type=int, help="total iterations")
    s.add_argument("--workers", type=int, help="threads for gradient chunks (results do not depend on it)")
    s.add_argument("--resume", help="checkpoint to continue from")
    s.add_argument("--checkpoint-every", type=int, default=500, help="snapshot interval in iterations (0: off)")
    s.add_argument("--stop-at", type=int, help="stop early at this iteration (for staged runs)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="score a checkpoint on a split")
    common(s, preset=False)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True, help="dataset directory from ingest")
    s.add_argument("--split", default="test", choices=SPLITS)
    s.add_argument("--out", required=True, help="output directory for metrics and curves")
    s.add_argument("--ablation", action="store_true", help="also score with each channel group alone")
    s.add_argument("--truth", help="ground-truth file from simulate, for concordance against true times")
    s.add_argument("--workers", type=int)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("predict", help="risk and failure-time summaries for new covariate rows")
    common(s, preset=False)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--covariates", required=True, help="JSON lines with {id, covariates: {channel: value}}")
    s.add_argument("--out", required=True, help="output JSON lines")
    s.add_argument("--num-samples", type=int, help="Monte Carlo draws per row")
    s.add_argument("--workers", type=int)
    s.set_defaults(func=cmd_predict)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UserError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
