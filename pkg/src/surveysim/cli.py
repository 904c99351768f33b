"""Command-line entry point: build-data, train, eval, baseline, ablate, report.

Every run is driven by one JSON config (sections data/splits/prompting/
backend/train/eval); flags only override config keys. All randomness is
seeded from the config, so reruns produce byte-identical artifacts.
"""

import argparse
import json
import sys
import traceback
from pathlib import Path

from . import __version__, baselines, harness, prompting, survey_data, training
from .backends import descriptor_dict, make_backend
from .config import ConfigError, config_hash, load_config

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


def _load_templates(config):
    return prompting.load_templates(config.get("prompting", {}).get("template_file"))


def _build_dataset(config):
    """data + splits sections -> (DatasetSplits, IngestReport)."""
    data_cfg = config["data"]
    report = survey_data.IngestReport()
    if data_cfg["kind"] == "respondent_csv":
        questions, distributions, report = survey_data.load_respondent_csv(
            data_cfg["csv"], data_cfg["codebook"], report=report)
    else:
        questions, distributions, report = survey_data.load_aggregated_json(
            data_cfg["json"], report=report)
    invalid = data_cfg.get("invalid_options", list(survey_data.DEFAULT_INVALID_OPTIONS))
    questions, distributions, report = survey_data.clean_survey(
        questions, distributions, invalid_labels=invalid, report=report)
    distributions, report = survey_data.filter_countries(
        distributions, data_cfg.get("min_respondents", 0), report=report)
    qids_with_data = {d.question_id for d in distributions}
    questions = [q for q in questions if q.question_id in qids_with_data]
    splits = survey_data.build_splits(questions, distributions, config["splits"],
                                      report=report)
    return splits, report


def cmd_build_data(args, config):
    splits, report = _build_dataset(config)
    out_path = Path(args.out or config["data"].get("dataset_path", "dataset.jsonl"))
    survey_data.write_dataset_jsonl(splits, out_path)
    print(f"wrote {out_path}")
    print("countries:", {k: len(v) for k, v in splits.country_sets.items()})
    print("questions:", {k: len(v) for k, v in splits.question_sets.items()})
    for subset, _, _ in splits.assignments:
        print(f"  {subset}: {len(splits.entries[subset])} entries")
    print("ingest report:", report.summary())
    return EXIT_OK


def _read_entries(config, args):
    dataset_path = args.dataset or config.get("data", {}).get("dataset_path")
    if not dataset_path or not Path(dataset_path).exists():
        raise ConfigError("dataset file not found; run build-data first "
                          f"(looked for {dataset_path!r})")
    return survey_data.read_dataset_jsonl(dataset_path)


def _train_config(config):
    return training.TrainConfig(**config.get("train", {}))


def cmd_train(args, config):
    entries = _read_entries(config, args)
    templates = _load_templates(config)
    backend = make_backend(config["backend"])
    train_cfg = _train_config(config)
    out_dir = Path(args.out or config.get("eval", {}).get("out_dir", "runs/train"))
    adapter_path, log = training.train(
        backend, entries.get("train", []), entries.get("valid", []),
        train_cfg, out_dir, templates=templates)
    scores = log.epoch_valid_scores
    print(f"adapter: {adapter_path}")
    print(f"epochs: {len(scores)}; best valid 1-JSD: "
          f"{max(scores) if scores else float('nan'):.4f}")
    return EXIT_OK


def _test_subsets(entries, config):
    wanted = config.get("eval", {}).get("subsets")
    if wanted:
        missing = [s for s in wanted if s not in entries]
        if missing:
            raise ConfigError(f"eval.subsets not in dataset: {missing}")
        return {s: entries[s] for s in wanted}
    return {name: rows for name, rows in entries.items()
            if name not in ("train", "valid")}


def _country_pool(entries):
    return sorted({e.group for rows in entries.values() for e in rows})


def _emit(config, args, results, predictions, extra_metadata=None, diversity=None,
          title="Evaluation results"):
    out_dir = Path(args.out or config.get("eval", {}).get("out_dir", "runs/eval"))
    metadata = {
        "package_version": __version__,
        "config": config,
        "config_hash": config_hash(config),
        "seed": config.get("eval", {}).get("seed", 0),
        "conventions": {
            "jsd_log_base": 2,
            "emd_ground_distance": "|i-j|/(n-1)",
            "ctrl_scoring": "against the original country's target",
            "subset_average": "unweighted mean over subsets",
        },
    }
    metadata.update(extra_metadata or {})
    rows = results + harness.average_rows(results)
    written = harness.emit_report(rows, out_dir, formats=("csv", "md", "plots"),
                                  run_metadata=metadata, predictions=predictions,
                                  diversity=diversity, title=title)
    for path in written:
        print(f"wrote {path}")
    return EXIT_OK


def cmd_eval(args, config):
    entries = _read_entries(config, args)
    templates = _load_templates(config)
    subsets = _test_subsets(entries, config)
    pool = _country_pool(entries)
    seed = config.get("eval", {}).get("seed", 0)

    backend = make_backend(config["backend"])
    zs = harness.ZeroShotPredictor(backend, predictor_id="ZS")
    ft = None
    adapter = args.adapter or config.get("eval", {}).get("adapter")
    if adapter:
        ft_backend = make_backend(config["backend"])
        ft_backend.load_adapter(adapter)
        ft = harness.ZeroShotPredictor(ft_backend, predictor_id="FT")

    predictions = []
    results = harness.run_matrix(zs, ft, subsets, seed=seed, country_pool=pool,
                                 templates=templates, sink=predictions)
    diversity = None
    if ft is not None:
        per_question = {}
        for name, rows in subsets.items():
            per_q, _ = harness.diversity_report(ft, rows, templates=templates)
            per_question.update(per_q)
        diversity = per_question or None
    return _emit(config, args, results, predictions,
                 extra_metadata={"backend": descriptor_dict(backend),
                                 "adapter": adapter},
                 diversity=diversity)


def cmd_baseline(args, config):
    entries = _read_entries(config, args)
    templates = _load_templates(config)
    subsets = _test_subsets(entries, config)
    pool = _country_pool(entries)
    seed = config.get("eval", {}).get("seed", 0)
    train_rows = entries.get("train", [])

    if args.method == "zs":
        predictor = harness.ZeroShotPredictor(make_backend(config["backend"]))
    elif args.method == "knn":
        embedder_name = config.get("eval", {}).get("embedder", "hashing")
        embedder = (baselines.HashingEmbedder() if embedder_name == "hashing"
                    else baselines.SentenceEmbedder(embedder_name))
        predictor = harness.KnnPredictor(train_rows, embedder)
    elif args.method == "avg_culture":
        predictor = harness.AvgCulturePredictor(train_rows)
    elif args.method == "json_zs":
        predictor = harness.JsonZsPredictor(
            make_backend(config["backend"]), templates=templates,
            max_new_tokens=config.get("eval", {}).get("max_new_tokens", 128))
    else:  # unreachable behind argparse choices
        raise ConfigError(f"unknown baseline method {args.method!r}")

    predictions = []
    results = []
    for variant in config.get("eval", {}).get("variants", ["normal"]):
        for name, rows in subsets.items():
            try:
                results.append(harness.evaluate(
                    predictor, rows, variant=variant, seed=seed, subset=name,
                    country_pool=pool, templates=templates, sink=predictions))
            except harness.EvalError as exc:
                # e.g. KNN skipping every entry of a subset: keep an explicit
                # failed cell instead of aborting the other subsets
                print(f"subset {name} ({variant}): {exc}")
                results.append(harness.EvalResult(
                    predictor_id=predictor.predictor_id, subset=name,
                    variant=variant, mean_one_minus_jsd=float("nan"),
                    mean_emd=float("nan"), accuracy=float("nan"),
                    entry_count=0, failures=len(rows),
                    run_metadata={"status": "all entries failed"}))
    return _emit(config, args, results, predictions,
                 extra_metadata={"baseline_method": args.method},
                 title=f"Baseline: {args.method}")


def cmd_ablate(args, config):
    entries = _read_entries(config, args)
    templates = _load_templates(config)
    subsets = _test_subsets(entries, config)
    pool = _country_pool(entries)
    seed = config.get("eval", {}).get("seed", 0)
    losses = [s.strip().upper() for s in args.losses.split(",") if s.strip()]
    bad = [l for l in losses if l not in training.LOSS_NAMES]
    if bad:
        raise ConfigError(f"unknown losses {bad}; choose from {training.LOSS_NAMES}")
    out_dir = Path(args.out or config.get("eval", {}).get("out_dir", "runs/ablate"))

    predictions = []
    results = []
    kl_backend = None
    for loss in losses:
        cfg_train = config.get("train", {}).copy()
        cfg_train["loss"] = loss
        train_cfg = training.TrainConfig(**cfg_train)
        backend = make_backend(config["backend"])
        training.train(backend, entries.get("train", []), entries.get("valid", []),
                       train_cfg, out_dir / f"loss_{loss}", templates=templates)
        if loss == "KL":
            kl_backend = backend
        predictor = harness.ZeroShotPredictor(backend, predictor_id=f"{loss} loss")
        for name, rows in subsets.items():
            results.append(harness.evaluate(predictor, rows, seed=seed, subset=name,
                                            country_pool=pool, templates=templates,
                                            sink=predictions))
    if kl_backend is not None:
        predictor = harness.ZeroShotPredictor(kl_backend, predictor_id="Shuffled (KL)")
        for name, rows in subsets.items():
            results.append(harness.evaluate(predictor, rows, variant="shuffled",
                                            seed=seed, subset=name, country_pool=pool,
                                            templates=templates, sink=predictions))
    return _emit(config, args, results, predictions,
                 extra_metadata={"ablation_losses": losses},
                 title="Loss-function and option-order ablations")


def cmd_report(args, config):
    predictions = []
    with open(args.predictions, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                predictions.append(json.loads(line))
    results = harness.recompute_from_predictions(predictions)
    if not results:
        raise ConfigError(f"no successful predictions in {args.predictions}")
    out_dir = Path(args.out or "runs/report")
    rows = results + harness.average_rows(results)
    written = harness.emit_report(rows, out_dir, formats=("csv", "md"),
                                  title="Recomputed from predictions")
    for path in written:
        print(f"wrote {path}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="surveysim",
        description="Build survey datasets, align first-token distributions, "
                    "and evaluate predictors.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", required=True, help="JSON run config")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override a config key (JSON-encoded value)")
        p.add_argument("--out", help="output directory/file override")
        p.add_argument("--dataset", help="dataset JSONL override")

    common(sub.add_parser("build-data", help="ingest raw survey data and write splits"))
    common(sub.add_parser("train", help="fine-tune a backend's adapter"))
    p_eval = sub.add_parser("eval", help="run the ZS/FT x normal/ctrl matrix")
    common(p_eval)
    p_eval.add_argument("--adapter", help="adapter artifact for the FT rows")
    p_base = sub.add_parser("baseline", help="run a reference predictor")
    common(p_base)
    p_base.add_argument("--method", required=True,
                        choices=["zs", "knn", "avg_culture", "json_zs"])
    p_abl = sub.add_parser("ablate", help="compare training losses + shuffled options")
    common(p_abl)
    p_abl.add_argument("--losses", default="KL,JS,WA,CE")
    p_rep = sub.add_parser("report", help="recompute tables from a predictions dump")
    p_rep.add_argument("--predictions", required=True)
    p_rep.add_argument("--out")
    return parser


def _parse_overrides(pairs):
    overrides = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep:
            raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {pair!r}")
        try:
            overrides[key] = json.loads(value)
        except json.JSONDecodeError:
            overrides[key] = value
    return overrides


COMMANDS = {
    "build-data": cmd_build_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "baseline": cmd_baseline,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = {}
        if getattr(args, "config", None):
            config = load_config(args.config, _parse_overrides(args.set))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args, config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception:
        log_path = Path(getattr(args, "out", None) or ".") / "error.log"
        log_path.parent.mkdir(parents=True, exist_ok=True)
        log_path.write_text(traceback.format_exc(), encoding="utf-8")
        print(f"run failed; traceback written to {log_path}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
