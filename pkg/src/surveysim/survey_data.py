"""Survey ingestion: normalize raw responses into per-country option
distributions and partition them into country/question subsets.

Two input routes are supported: respondent-level CSV plus a JSON codebook
(microdata, tallied here), and a pre-aggregated distribution JSON (for
surveys that ship aggregates only).
"""

import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

log = logging.getLogger(__name__)

PROB_SUM_TOL = 1e-9

# Labels stripped from every question before use. Only the first two are
# enabled by default; the extended list is opt-in via config.
DEFAULT_INVALID_OPTIONS = ("not applicable", "refuse to answer")
EXTENDED_INVALID_OPTIONS = DEFAULT_INVALID_OPTIONS + ("don't know", "no answer")


@dataclass(frozen=True)
class SurveyQuestion:
    question_id: int
    text: str
    options: tuple
    dimension: str = ""
    survey_id: str = ""

    def __post_init__(self):
        if len(self.options) < 2:
            raise ValueError(f"question {self.question_id}: needs >= 2 options")
        if len(set(self.options)) != len(self.options):
            raise ValueError(f"question {self.question_id}: duplicate options")
        if any(not o for o in self.options):
            raise ValueError(f"question {self.question_id}: empty option string")


@dataclass(frozen=True)
class ResponseDistribution:
    group: str
    question_id: int
    probs: tuple
    respondent_count: int = 0

    def __post_init__(self):
        arr = np.asarray(self.probs, dtype=float)
        if np.any(arr < -1e-12):
            raise ValueError(f"({self.group}, {self.question_id}): negative probability")
        if abs(arr.sum() - 1.0) > PROB_SUM_TOL:
            raise ValueError(
                f"({self.group}, {self.question_id}): probs sum to {arr.sum()}, not 1"
            )


@dataclass(frozen=True)
class Entry:
    question: SurveyQuestion
    group: str
    target: ResponseDistribution

    def __post_init__(self):
        if self.target.question_id != self.question.question_id:
            raise ValueError("entry target question_id mismatch")
        if self.target.group != self.group:
            raise ValueError("entry target group mismatch")
        if len(self.target.probs) != len(self.question.options):
            raise ValueError(
                f"({self.group}, {self.question.question_id}): "
                f"{len(self.target.probs)} probs for {len(self.question.options)} options"
            )


@dataclass
class DatasetSplits:
    country_sets: dict          # set name -> sorted country list
    question_sets: dict         # set name -> sorted question-id list
    assignments: list           # (subset_name, country_set_name, question_set_name)
    entries: dict               # subset_name -> list of Entry

    def counts(self) -> dict:
        return {name: len(rows) for name, rows in self.entries.items()}


@dataclass
class IngestReport:
    """Collects non-fatal events so pipelines stay auditable."""
    warnings: list = field(default_factory=list)
    dropped_questions: list = field(default_factory=list)
    dropped_distributions: list = field(default_factory=list)
    dropped_countries: list = field(default_factory=list)

    def warn(self, message: str):
        self.warnings.append(message)
        log.warning(message)

    def summary(self) -> str:
        return (
            f"{len(self.warnings)} warnings, "
            f"{len(self.dropped_questions)} questions dropped, "
            f"{len(self.dropped_distributions)} distributions dropped, "
            f"{len(self.dropped_countries)} countries filtered"
        )


def _normalize_counts(counts, n):
    total = sum(counts)
    return tuple(c / total for c in counts) if total > 0 else (0.0,) * n


def parse_survey(raw_records, codebook, report=None):
    """Tally respondent-level rows into per-(country, question) distributions.

    `raw_records` is an iterable of dict rows (one per respondent); `codebook`
    maps question columns to option code->label tables. Returns
    (questions, distributions, report). Unknown answer codes are skipped with
    a warning; blank cells are treated as not-asked. Questions left with
    fewer than 2 options are dropped.
    """
    report = report or IngestReport()
    survey_id = codebook.get("survey_id", "")
    country_col = codebook.get("country_column", "country")

    questions = []
    code_maps = {}
    for spec in codebook["questions"]:
        qid = int(spec["question_id"])
        code_map = {str(c["code"]): c["label"] for c in spec["options"]}
        labels = [c["label"] for c in spec["options"]]
        if len(labels) < 2:
            report.dropped_questions.append((qid, "fewer than 2 options in codebook"))
            continue
        questions.append(
            SurveyQuestion(
                question_id=qid,
                text=spec["text"],
                options=tuple(labels),
                dimension=spec.get("dimension", ""),
                survey_id=survey_id,
            )
        )
        code_maps[qid] = (spec.get("column", f"Q{qid}"), code_map)

    # tallies[(country, qid)] = Counter(option label -> count)
    tallies = {}
    unknown_codes = Counter()
    for row in raw_records:
        country = str(row.get(country_col, "")).strip()
        if not country:
            report.warn("row without country identifier skipped")
            continue
        for q in questions:
            column, code_map = code_maps[q.question_id]
            raw = row.get(column)
            if raw is None:
                continue
            code = str(raw).strip()
            if code == "" or code.lower() in ("nan", "none"):
                continue
            label = code_map.get(code)
            if label is None:
                unknown_codes[(q.question_id, code)] += 1
                continue
            tallies.setdefault((country, q.question_id), Counter())[label] += 1

    for (qid, code), count in sorted(unknown_codes.items()):
        report.warn(f"question {qid}: unknown answer code {code!r} skipped ({count} rows)")

    distributions = []
    for (country, qid), counter in sorted(tallies.items()):
        q = next(qq for qq in questions if qq.question_id == qid)
        counts = [counter.get(opt, 0) for opt in q.options]
        total = sum(counts)
        if total == 0:
            continue
        distributions.append(
            ResponseDistribution(
                group=country,
                question_id=qid,
                probs=_normalize_counts(counts, len(q.options)),
                respondent_count=total,
            )
        )
    return questions, distributions, report


def load_respondent_csv(csv_path, codebook_path, report=None):
    """CSV + codebook route: read the files and delegate to parse_survey."""
    codebook = json.loads(Path(codebook_path).read_text(encoding="utf-8"))
    frame = pd.read_csv(csv_path, dtype=str, keep_default_na=False)
    rows = frame.to_dict(orient="records")
    return parse_survey(rows, codebook, report=report)


def load_aggregated_json(path, report=None):
    """Aggregated route: distributions are shipped, only validated here."""
    report = report or IngestReport()
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    survey_id = payload.get("survey_id", "")
    questions = []
    for spec in payload["questions"]:
        questions.append(
            SurveyQuestion(
                question_id=int(spec["question_id"]),
                text=spec["text"],
                options=tuple(spec["options"]),
                dimension=spec.get("dimension", ""),
                survey_id=survey_id,
            )
        )
    by_id = {q.question_id: q for q in questions}
    distributions = []
    for rec in payload["distributions"]:
        qid = int(rec["question_id"])
        q = by_id.get(qid)
        if q is None:
            report.warn(f"distribution for unknown question {qid} skipped")
            continue
        probs = np.asarray(rec["probs"], dtype=float)
        if probs.size != len(q.options):
            report.warn(f"({rec['country']}, {qid}): wrong probs length, skipped")
            continue
        total = probs.sum()
        if total <= 0:
            report.warn(f"({rec['country']}, {qid}): zero-mass distribution skipped")
            continue
        if abs(total - 1.0) > 1e-6:
            report.warn(f"({rec['country']}, {qid}): probs sum {total:.6f}, renormalized")
        distributions.append(
            ResponseDistribution(
                group=str(rec["country"]),
                question_id=qid,
                probs=tuple(probs / total),
                respondent_count=int(rec.get("respondent_count", 0)),
            )
        )
    return questions, distributions, report


def country_respondent_totals(distributions) -> dict:
    """Per-country respondent total: the max per-question count for the group."""
    totals = {}
    for d in distributions:
        totals[d.group] = max(totals.get(d.group, 0), d.respondent_count)
    return totals


def filter_countries(distributions, min_respondents, report=None):
    """Keep groups whose respondent total strictly exceeds min_respondents."""
    report = report or IngestReport()
    totals = country_respondent_totals(distributions)
    kept_groups = {g for g, t in totals.items() if t > min_respondents}
    for g in sorted(set(totals) - kept_groups):
        report.dropped_countries.append((g, totals[g]))
    kept = [d for d in distributions if d.group in kept_groups]
    if not kept:
        report.warn(f"no countries exceed {min_respondents} respondents")
    return kept, report


def strip_invalid_options(question, distributions, invalid_labels=DEFAULT_INVALID_OPTIONS,
                          report=None):
    """Remove validity-check options and renormalize the remaining mass.

    Matching is case-insensitive on the full option label. Returns
    (question, distributions, report); question is None when it does not
    survive cleaning (fewer than 2 valid options, or no distribution keeps
    positive mass).
    """
    report = report or IngestReport()
    invalid = {s.strip().lower() for s in invalid_labels}
    keep_idx = [i for i, opt in enumerate(question.options)
                if opt.strip().lower() not in invalid]
    if len(keep_idx) == len(question.options):
        return question, list(distributions), report
    if len(keep_idx) < 2:
        report.dropped_questions.append(
            (question.question_id, "fewer than 2 options after cleaning"))
        return None, [], report

    cleaned_q = SurveyQuestion(
        question_id=question.question_id,
        text=question.text,
        options=tuple(question.options[i] for i in keep_idx),
        dimension=question.dimension,
        survey_id=question.survey_id,
    )
    cleaned = []
    for d in distributions:
        probs = np.asarray(d.probs, dtype=float)[keep_idx]
        mass = probs.sum()
        if mass <= 0:
            report.dropped_distributions.append(
                (d.group, d.question_id, "all mass on invalid options"))
            continue
        cleaned.append(
            ResponseDistribution(
                group=d.group,
                question_id=d.question_id,
                probs=tuple(probs / mass),
                respondent_count=d.respondent_count,
            )
        )
    if not cleaned:
        report.dropped_questions.append(
            (question.question_id, "no distribution survived cleaning"))
        return None, [], report
    return cleaned_q, cleaned, report


def clean_survey(questions, distributions, invalid_labels=DEFAULT_INVALID_OPTIONS,
                 report=None):
    """strip_invalid_options applied question by question over a whole survey."""
    report = report or IngestReport()
    by_qid = {}
    for d in distributions:
        by_qid.setdefault(d.question_id, []).append(d)
    cleaned_questions, cleaned_distributions = [], []
    for q in questions:
        cq, cds, _ = strip_invalid_options(q, by_qid.get(q.question_id, []),
                                           invalid_labels, report)
        if cq is None:
            continue
        cleaned_questions.append(cq)
        cleaned_distributions.extend(cds)
    return cleaned_questions, cleaned_distributions, report


TEST_ASSIGNMENTS = [("C1", "Q3"), ("C2", "Q1"), ("C2", "Q3"), ("C3", "Q1"), ("C3", "Q3")]


def build_splits(questions, distributions, split_config, report=None) -> DatasetSplits:
    """Partition countries and questions and assemble per-subset entries.

    `split_config` lists the held-out sets explicitly:
      {"country_sets": {"C2": [...], "C3": [...]},
       "question_sets": {"Q2": [...], "Q3": [...]}}
    C1/Q1 are the complements. C2 and C3 may overlap; neither may intersect
    C1. Question sets must be pairwise disjoint. Subsets are train=(C1,Q1),
    valid=(C1,Q2) and five test cells named "<Cset>-<Qset>". Entries exist
    only where the survey has a distribution, and ordering is deterministic.
    """
    report = report or IngestReport()
    all_countries = sorted({d.group for d in distributions})
    all_qids = sorted({q.question_id for q in questions})

    c2 = [c for c in split_config["country_sets"]["C2"]]
    c3 = [c for c in split_config["country_sets"]["C3"]]
    for name, listed in (("C2", c2), ("C3", c3)):
        missing = sorted(set(listed) - set(all_countries))
        if missing:
            report.warn(f"{name} lists countries absent from data: {missing}")
    c2 = sorted(set(c2) & set(all_countries))
    c3 = sorted(set(c3) & set(all_countries))
    c1 = sorted(set(all_countries) - set(c2) - set(c3))

    q2 = sorted(int(x) for x in split_config["question_sets"]["Q2"])
    q3 = sorted(int(x) for x in split_config["question_sets"]["Q3"])
    if set(q2) & set(q3):
        raise ValueError(f"Q2 and Q3 overlap: {sorted(set(q2) & set(q3))}")
    for name, listed in (("Q2", q2), ("Q3", q3)):
        missing = sorted(set(listed) - set(all_qids))
        if missing:
            report.warn(f"{name} lists question ids absent from data: {missing}")
    q2 = sorted(set(q2) & set(all_qids))
    q3 = sorted(set(q3) & set(all_qids))
    q1 = sorted(set(all_qids) - set(q2) - set(q3))

    country_sets = {"C1": c1, "C2": c2, "C3": c3}
    question_sets = {"Q1": q1, "Q2": q2, "Q3": q3}

    questions_by_id = {q.question_id: q for q in questions}
    dist_by_key = {(d.group, d.question_id): d for d in distributions}

    assignments = [("train", "C1", "Q1"), ("valid", "C1", "Q2")]
    assignments += [(f"{cs}-{qs}", cs, qs) for cs, qs in TEST_ASSIGNMENTS]

    entries = {}
    for subset, cs, qs in assignments:
        rows = []
        for country in country_sets[cs]:
            for qid in question_sets[qs]:
                d = dist_by_key.get((country, qid))
                if d is None:
                    continue
                rows.append(Entry(question=questions_by_id[qid], group=country, target=d))
        entries[subset] = rows
    return DatasetSplits(country_sets, question_sets, assignments, entries)


def entry_to_record(entry: Entry, subset: str) -> dict:
    return {
        "survey_id": entry.question.survey_id,
        "question_id": entry.question.question_id,
        "country": entry.group,
        "question_text": entry.question.text,
        "options": list(entry.question.options),
        "target_probs": [float(p) for p in entry.target.probs],
        "dimension": entry.question.dimension,
        "subset": subset,
    }


def write_dataset_jsonl(splits: DatasetSplits, path):
    """Canonical dataset file: one entry per line, deterministic order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for subset, _, _ in splits.assignments:
            for entry in splits.entries[subset]:
                fh.write(json.dumps(entry_to_record(entry, subset), ensure_ascii=False))
                fh.write("\n")
    return path


def read_dataset_jsonl(path):
    """Inverse of write_dataset_jsonl: subset name -> list of Entry."""
    entries = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            q = SurveyQuestion(
                question_id=int(rec["question_id"]),
                text=rec["question_text"],
                options=tuple(rec["options"]),
                dimension=rec.get("dimension", ""),
                survey_id=rec.get("survey_id", ""),
            )
            d = ResponseDistribution(
                group=rec["country"],
                question_id=q.question_id,
                probs=tuple(rec["target_probs"]),
                respondent_count=0,
            )
            entries.setdefault(rec["subset"], []).append(
                Entry(question=q, group=rec["country"], target=d))
    return entries
