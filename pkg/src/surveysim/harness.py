"""Run predictors over test subsets with normal / ctrl / shuffled variants
and aggregate per-subset reports, accuracy summaries and diversity profiles.

Per-entry predictions are always dumped (JSON Lines) before aggregation so
every table can be recomputed from artifacts. Under the ctrl variant the
score is still taken against the original country's target: the variant
measures context sensitivity, not correctness under the replacement.
"""

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import prompting
from .baselines import (PredictionFailed, PredictionSkipped, avg_culture_predict,
                        json_zs_predict, knn_predict, zero_shot_predict)
from .metrics import argmax_accuracy, emd, one_minus_jsd

VARIANTS = ("normal", "ctrl", "shuffled")


class EvalError(RuntimeError):
    pass


@dataclass
class EvalResult:
    predictor_id: str
    subset: str
    variant: str
    mean_one_minus_jsd: float
    mean_emd: float
    accuracy: float
    entry_count: int
    failures: int
    run_metadata: dict = field(default_factory=dict)

    def to_row(self) -> dict:
        return {
            "predictor_id": self.predictor_id,
            "subset": self.subset,
            "variant": self.variant,
            "mean_one_minus_jsd": self.mean_one_minus_jsd,
            "mean_emd": self.mean_emd,
            "accuracy": self.accuracy,
            "entry_count": self.entry_count,
            "failures": self.failures,
        }


# -- predictors --------------------------------------------------------------

class ZeroShotPredictor:
    def __init__(self, backend, predictor_id=None):
        self.backend = backend
        self.predictor_id = predictor_id or f"zs:{backend.descriptor.identifier}"

    def predict(self, record):
        return zero_shot_predict(self.backend, record)


class KnnPredictor:
    def __init__(self, train_entries, embedder, k=1):
        self.train_entries = list(train_entries)
        self.embedder = embedder
        self.k = k
        self._cache = {}
        self.predictor_id = f"knn:k={k}:{embedder.identifier}"

    def predict(self, record):
        return knn_predict(record, self.train_entries, self.embedder, k=self.k,
                           _index_cache=self._cache)


class AvgCulturePredictor:
    def __init__(self, train_entries):
        self.train_entries = list(train_entries)
        self.predictor_id = "avg_culture"
        self._by_question = {}
        for e in self.train_entries:
            key = (e.question.survey_id, e.question.question_id)
            self._by_question.setdefault(key, []).append(e)

    def predict(self, record):
        key = (record.entry.question.survey_id, record.entry.question.question_id)
        return avg_culture_predict(record, self._by_question.get(key, []))


class JsonZsPredictor:
    def __init__(self, backend, templates=None, max_new_tokens=128):
        self.backend = backend
        self.templates = templates
        self.max_new_tokens = max_new_tokens
        self.predictor_id = f"json_zs:{backend.descriptor.identifier}"

    def predict(self, record):
        return json_zs_predict(self.backend, record, templates=self.templates,
                               max_new_tokens=self.max_new_tokens)


class OraclePredictor:
    """Returns each record's target; pins the metric optima in tests."""

    predictor_id = "oracle"

    def predict(self, record):
        return np.asarray(record.target_probs, dtype=float)


class UniformPredictor:
    predictor_id = "uniform"

    def predict(self, record):
        n = len(record.options)
        return np.full(n, 1.0 / n)


# -- evaluation --------------------------------------------------------------

def _apply_variant(records, variant, seed, country_pool, templates):
    if variant == "normal":
        return records
    if variant == "ctrl":
        return prompting.apply_control_permutation(
            records, seed, country_pool=country_pool, templates=templates)
    if variant == "shuffled":
        rng = np.random.default_rng(seed)
        return [prompting.shuffle_options(
                    r, permutation=tuple(int(i) for i in rng.permutation(len(r.options))),
                    templates=templates)
                for r in records]
    raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")


def evaluate(predictor, entries, variant="normal", seed=0, subset="subset",
             country_pool=None, templates=None, sink=None,
             predictor_label=None) -> EvalResult:
    """Score one predictor over one subset under one variant.

    Per-entry 1-JSD and EMD are computed against the record's target (the
    original country's distribution, in displayed option order) and averaged
    over successful entries only. `sink`, when given, receives one dict per
    entry before aggregation; `predictor_label` renames the predictor in both
    the dump and the result so the two always agree.
    """
    label = predictor_label or predictor.predictor_id
    templates = templates or prompting.load_templates()
    records = [prompting.build_prompt(e, templates) for e in entries]
    records = _apply_variant(records, variant, seed, country_pool, templates)

    scores, emds, preds, refs = [], [], [], []
    failures = 0
    for record in records:
        row = {
            "record_id": record.record_id,
            "subset": subset,
            "variant": variant,
            "predictor_id": label,
            "country": record.entry.group,
            "displayed_country": record.displayed_country,
            "question_id": record.entry.question.question_id,
            "permutation": list(record.permutation),
            "target_probs": [float(p) for p in record.target_probs],
        }
        try:
            probs = np.asarray(predictor.predict(record), dtype=float)
        except (PredictionFailed, PredictionSkipped) as exc:
            failures += 1
            row.update(status="failed", error=str(exc), probs=None)
            if sink is not None:
                sink.append(row)
            continue
        score = one_minus_jsd(probs, record.target_probs)
        distance = emd(probs, record.target_probs)
        scores.append(score)
        emds.append(distance)
        preds.append(probs)
        refs.append(np.asarray(record.target_probs))
        row.update(status="ok", probs=[float(p) for p in probs],
                   one_minus_jsd=score, emd=distance)
        if sink is not None:
            sink.append(row)

    if not scores:
        raise EvalError(
            f"no successful entries for {label} on {subset} ({variant})")
    return EvalResult(
        predictor_id=label,
        subset=subset,
        variant=variant,
        mean_one_minus_jsd=float(np.mean(scores)),
        mean_emd=float(np.mean(emds)),
        accuracy=argmax_accuracy(preds, refs),
        entry_count=len(scores),
        failures=failures,
        run_metadata={"seed": seed, "total_entries": len(records)},
    )


def run_matrix(zs_predictor, ft_predictor, subsets, seed=0, country_pool=None,
               templates=None, sink=None):
    """Evaluate {ZS, ZS[ctrl], FT, FT[ctrl]} across the given subsets.

    `subsets` maps subset name -> entry list. A missing FT predictor yields
    explicit unavailable cells instead of silent holes. The ctrl pool
    defaults to every country appearing in any subset.
    """
    if country_pool is None:
        country_pool = sorted({e.group for rows in subsets.values() for e in rows})
    results = []
    for method, predictor in (("ZS", zs_predictor), ("FT", ft_predictor)):
        for variant in ("ctrl", "normal"):
            label = f"{method} [ctrl]" if variant == "ctrl" else method
            for subset_name, entries in subsets.items():
                if predictor is None:
                    results.append(EvalResult(
                        predictor_id=label, subset=subset_name, variant=variant,
                        mean_one_minus_jsd=float("nan"), mean_emd=float("nan"),
                        accuracy=float("nan"), entry_count=0,
                        failures=len(entries),
                        run_metadata={"status": "unavailable", "reason": "no adapter"}))
                    continue
                results.append(evaluate(
                    predictor, entries, variant=variant, seed=seed,
                    subset=subset_name, country_pool=country_pool,
                    templates=templates, sink=sink, predictor_label=label))
    return results


def average_rows(results):
    """Unweighted mean over each (predictor, variant)'s subsets: the Avg. column."""
    groups = {}
    for r in results:
        groups.setdefault((r.predictor_id, r.variant), []).append(r)
    rows = []
    for (predictor_id, variant), cells in groups.items():
        ok = [c for c in cells if c.entry_count > 0]
        rows.append(EvalResult(
            predictor_id=predictor_id, subset="Avg.", variant=variant,
            mean_one_minus_jsd=float(np.mean([c.mean_one_minus_jsd for c in ok]))
            if ok else float("nan"),
            mean_emd=float(np.mean([c.mean_emd for c in ok])) if ok else float("nan"),
            accuracy=float(np.mean([c.accuracy for c in ok])) if ok else float("nan"),
            entry_count=sum(c.entry_count for c in cells),
            failures=sum(c.failures for c in cells),
            run_metadata={"aggregation": "unweighted mean over subsets"}))
    return rows


def diversity_report(predictor, entries, templates=None, min_countries=2):
    """Per-question mean pairwise 1-JSD across countries, human vs predictor.

    Returns (per_question, skipped): per_question maps question_id to
    {"human": .., "model": .., "countries": k}; questions with fewer than
    `min_countries` countries are skipped and reported.
    """
    templates = templates or prompting.load_templates()
    by_question = {}
    for entry in entries:
        by_question.setdefault(entry.question.question_id, []).append(entry)

    per_question, skipped = {}, []
    for qid in sorted(by_question):
        group = sorted(by_question[qid], key=lambda e: e.group)
        if len(group) < min_countries:
            skipped.append(qid)
            continue
        human = [np.asarray(e.target.probs) for e in group]
        model = [np.asarray(predictor.predict(prompting.build_prompt(e, templates)))
                 for e in group]
        per_question[qid] = {
            "human": _mean_pairwise_similarity(human),
            "model": _mean_pairwise_similarity(model),
            "countries": len(group),
        }
    return per_question, skipped


def _mean_pairwise_similarity(distributions):
    sims = []
    for i in range(len(distributions)):
        for j in range(i + 1, len(distributions)):
            sims.append(one_minus_jsd(distributions[i], distributions[j]))
    return float(np.mean(sims))


def pew_generalization(predictor, grouped_entries, seed=0, templates=None, sink=None):
    """Evaluate an unseen-survey set per country group (e.g. C1' and C3)."""
    results = {}
    for group_name, entries in grouped_entries.items():
        results[group_name] = evaluate(
            predictor, entries, variant="normal", seed=seed,
            subset=group_name, templates=templates, sink=sink)
    return results


# -- reporting ---------------------------------------------------------------

def _fmt(x):
    if x is None or (isinstance(x, float) and not np.isfinite(x)):
        return "-"
    return f"{x:.3f}"


def results_to_csv_text(results) -> str:
    buf = io.StringIO()
    fields = ["predictor_id", "subset", "variant", "mean_one_minus_jsd",
              "mean_emd", "accuracy", "entry_count", "failures"]
    writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    writer.writeheader()
    for r in results:
        row = r.to_row()
        writer.writerow({k: (repr(v) if isinstance(v, float) else v)
                         for k, v in row.items()})
    return buf.getvalue()


def read_results_csv(path):
    rows = []
    with open(path, encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            rows.append(EvalResult(
                predictor_id=rec["predictor_id"], subset=rec["subset"],
                variant=rec["variant"],
                mean_one_minus_jsd=float(rec["mean_one_minus_jsd"]),
                mean_emd=float(rec["mean_emd"]),
                accuracy=float(rec["accuracy"]),
                entry_count=int(rec["entry_count"]),
                failures=int(rec["failures"])))
    return rows


def results_markdown(results, title="Evaluation results") -> str:
    """Grid with one row per (predictor, variant) and one column per subset,
    one block per metric."""
    subsets = list(dict.fromkeys(r.subset for r in results))
    rows = list(dict.fromkeys(r.predictor_id for r in results))
    by_cell = {(r.predictor_id, r.subset): r for r in results}
    lines = [f"# {title}", ""]
    for metric, label, arrow in (("mean_one_minus_jsd", "1-JSD", "(higher is better)"),
                                 ("mean_emd", "EMD", "(lower is better)"),
                                 ("accuracy", "Accuracy", "(higher is better)")):
        lines.append(f"## {label} {arrow}")
        lines.append("")
        lines.append("| Method | " + " | ".join(subsets) + " |")
        lines.append("|" + "---|" * (len(subsets) + 1))
        for row_id in rows:
            cells = []
            for subset in subsets:
                r = by_cell.get((row_id, subset))
                cells.append(_fmt(getattr(r, metric)) if r else "-")
            lines.append(f"| {row_id} | " + " | ".join(cells) + " |")
        lines.append("")
    return "\n".join(lines)


def plot_accuracy_bars(results, path):
    """Grouped bar chart of argmax accuracy per subset and method."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    subsets = list(dict.fromkeys(r.subset for r in results))
    methods = list(dict.fromkeys(r.predictor_id for r in results))
    by_cell = {(r.predictor_id, r.subset): r for r in results}
    x = np.arange(len(subsets))
    width = 0.8 / max(len(methods), 1)
    fig, ax = plt.subplots(figsize=(1.8 * len(subsets) + 2, 4))
    for i, method in enumerate(methods):
        heights = [getattr(by_cell.get((method, s)), "accuracy", np.nan)
                   if by_cell.get((method, s)) else np.nan for s in subsets]
        ax.bar(x + i * width, heights, width, label=method)
    ax.set_xticks(x + width * (len(methods) - 1) / 2)
    ax.set_xticklabels(subsets)
    ax.set_ylabel("argmax accuracy")
    ax.set_ylim(0, 1)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_diversity_bands(per_question, path, title="Cross-country similarity per question"):
    """Human vs model per-question mean pairwise 1-JSD with a shaded band."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    qids = sorted(per_question)
    human = [per_question[q]["human"] for q in qids]
    model = [per_question[q]["model"] for q in qids]
    x = np.arange(len(qids))
    fig, ax = plt.subplots(figsize=(max(6, 0.4 * len(qids)), 4))
    ax.plot(x, human, label="human surveys", marker="o")
    ax.plot(x, model, label="model", marker="s")
    ax.fill_between(x, human, model, alpha=0.25)
    ax.set_xticks(x)
    ax.set_xticklabels([str(q) for q in qids], rotation=90)
    ax.set_ylabel("mean pairwise 1-JSD")
    ax.set_xlabel("question id")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def emit_report(results, out_dir, formats=("csv", "md", "plots"),
                diversity=None, run_metadata=None, predictions=None,
                title="Evaluation results"):
    """Write results.csv / report.md / plots (+ run metadata, predictions).

    Returns the list of written paths. Unknown format names are an error.
    """
    if not results:
        raise ValueError("emit_report needs at least one result")
    unknown = set(formats) - {"csv", "md", "plots"}
    if unknown:
        raise ValueError(f"unknown report formats: {sorted(unknown)}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    if predictions is not None:
        pred_path = out_dir / "predictions.jsonl"
        with open(pred_path, "w", encoding="utf-8") as fh:
            for row in predictions:
                fh.write(json.dumps(row, ensure_ascii=False) + "\n")
        written.append(pred_path)
    if run_metadata is not None:
        meta_path = out_dir / "run_metadata.json"
        meta_path.write_text(json.dumps(run_metadata, indent=2, sort_keys=True),
                             encoding="utf-8")
        written.append(meta_path)
    if "csv" in formats:
        csv_path = out_dir / "results.csv"
        csv_path.write_text(results_to_csv_text(results), encoding="utf-8")
        written.append(csv_path)
    if "md" in formats:
        md_path = out_dir / "report.md"
        md_path.write_text(results_markdown(results, title=title), encoding="utf-8")
        written.append(md_path)
    if "plots" in formats:
        plots_dir = out_dir / "plots"
        plots_dir.mkdir(exist_ok=True)
        written.append(plot_accuracy_bars(results, plots_dir / "accuracy.png"))
        if diversity:
            written.append(plot_diversity_bands(diversity, plots_dir / "diversity.png"))
    return written


def recompute_from_predictions(predictions):
    """Re-aggregate EvalResults from a per-entry dump (no aggregation drift)."""
    groups = {}
    for row in predictions:
        key = (row["predictor_id"], row["subset"], row["variant"])
        groups.setdefault(key, []).append(row)
    results = []
    for (predictor_id, subset, variant), rows in groups.items():
        ok = [r for r in rows if r["status"] == "ok"]
        if not ok:
            continue
        preds = [np.asarray(r["probs"]) for r in ok]
        refs = [np.asarray(r["target_probs"]) for r in ok]
        results.append(EvalResult(
            predictor_id=predictor_id, subset=subset, variant=variant,
            mean_one_minus_jsd=float(np.mean([r["one_minus_jsd"] for r in ok])),
            mean_emd=float(np.mean([r["emd"] for r in ok])),
            accuracy=argmax_accuracy(preds, refs),
            entry_count=len(ok),
            failures=len(rows) - len(ok)))
    return results
