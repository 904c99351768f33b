"""Deterministic synthetic surveys for desk-scale training and pipeline tests.

Two generators: `make_desk_survey` builds in-memory questions/distributions
with controllable cross-country divergence (used for trainer and harness
checks), and `write_fixture_files` emits a small respondent-level CSV,
codebook and split config of the kind the ingestion pipeline consumes.
"""

import csv
import json
from pathlib import Path

import numpy as np

from .survey_data import ResponseDistribution, SurveyQuestion

DESK_COUNTRIES = [
    "Atlantis", "Borduria", "Carpathia", "Dorne",
    "Elbonia", "Freedonia", "Genovia", "Hyrule",
]

_TOPICS = [
    ("community trust", "social values"),
    ("public transport funding", "economic values"),
    ("science education", "science and technology"),
    ("civic participation", "political culture"),
    ("environmental rules", "societal well-being"),
    ("media reliability", "political interest"),
]


def _question_text(qid, topic):
    return f"Question {qid}: how strongly do people support {topic} initiatives?"


def _option_set(n):
    base = ["Strongly support", "Somewhat support", "Neutral",
            "Somewhat oppose", "Strongly oppose"]
    return base[:n]


def make_desk_survey(n_countries=8, n_questions=30, option_counts=(3, 4, 5),
                     country_scale=2.6, prior_alpha=0.3, seed=7,
                     survey_id="DESK", countries=None):
    """Synthetic survey with genuinely divergent countries.

    Each question gets a non-uniform prior; each country perturbs it through
    a 2-D latent profile, so country identity carries real signal while the
    per-question prior stays learnable. Returns (questions, distributions).
    """
    rng = np.random.default_rng(seed)
    if countries is None:
        countries = list(DESK_COUNTRIES[:n_countries])
        while len(countries) < n_countries:
            countries.append(f"Country{len(countries) + 1}")
    profiles = {c: rng.normal(0.0, 1.0, 2) for c in countries}

    questions, distributions = [], []
    for qid in range(1, n_questions + 1):
        n = int(rng.choice(option_counts))
        topic, dimension = _TOPICS[(qid - 1) % len(_TOPICS)]
        questions.append(SurveyQuestion(
            question_id=qid,
            text=_question_text(qid, topic),
            options=tuple(_option_set(n)),
            dimension=dimension,
            survey_id=survey_id,
        ))
        prior_logits = np.log(rng.dirichlet(np.full(n, prior_alpha)) + 1e-3)
        loading = rng.normal(0.0, 1.0, (2, n))
        for country in countries:
            z = prior_logits + country_scale * profiles[country] @ loading
            probs = np.exp(z - z.max())
            probs /= probs.sum()
            distributions.append(ResponseDistribution(
                group=country, question_id=qid,
                probs=tuple(probs), respondent_count=1500))
    return questions, distributions


def desk_split_config(n_questions=30, holdout_countries=("Genovia", "Hyrule"),
                      valid_fraction=0.2, test_fraction=0.2):
    """Split config for a desk survey: last questions held out, two countries
    held out, one country shared between the two held-out groups."""
    n_valid = max(1, int(n_questions * valid_fraction))
    n_test = max(1, int(n_questions * test_fraction))
    q3 = list(range(n_questions - n_test + 1, n_questions + 1))
    q2 = list(range(n_questions - n_test - n_valid + 1, n_questions - n_test + 1))
    return {
        "country_sets": {"C2": [holdout_countries[0]], "C3": list(holdout_countries)},
        "question_sets": {"Q2": q2, "Q3": q3},
    }


# -- respondent-level fixture -------------------------------------------------

FIXTURE_COUNTRIES = {
    # country -> respondent rows (filter keeps counts strictly above 1000)
    "Atlantis": 1040, "Borduria": 1025, "Carpathia": 1031, "Dorne": 1018,
    "Elbonia": 1022, "Freedonia": 1037, "Genovia": 1012, "Hyrule": 1047,
    "Ishtar": 1009, "Jotunheim": 1000,
}

FIXTURE_SPLITS = {
    "country_sets": {
        "C2": ["Borduria", "Carpathia", "Dorne"],
        "C3": ["Dorne", "Elbonia"],
    },
    "question_sets": {"Q2": [7, 8], "Q3": [9, 10, 11, 12]},
}


def _fixture_questions(rng):
    specs = []
    for qid in range(1, 13):
        n = int(rng.integers(2, 5))  # 2-4 substantive options
        topic, dimension = _TOPICS[(qid - 1) % len(_TOPICS)]
        options = [{"code": str(i + 1), "label": lab}
                   for i, lab in enumerate(_option_set(max(n, 2)))]
        if qid % 3 == 0:
            options.append({"code": "-1", "label": "Refuse to answer"})
        if qid % 4 == 0:
            options.append({"code": "-2", "label": "Not applicable"})
        specs.append({
            "question_id": qid,
            "column": f"Q{qid}",
            "text": _question_text(qid, topic),
            "dimension": dimension,
            "options": options,
        })
    # degenerate question: nothing survives option cleaning
    specs.append({
        "question_id": 13,
        "column": "Q13",
        "text": _question_text(13, "anything at all"),
        "dimension": "misc",
        "options": [{"code": "1", "label": "Yes"},
                    {"code": "-1", "label": "Refuse to answer"}],
    })
    return specs


MISSING_CELLS = {("Borduria", 2), ("Elbonia", 11), ("Genovia", 5), ("Dorne", 12)}
ALL_INVALID_CELL = ("Atlantis", 9)  # every respondent refuses -> cell dropped


def write_fixture_files(out_dir, seed=1234):
    """Write respondents.csv, codebook.json and splits.json for pipeline tests.

    The data exercises the awkward cases on purpose: a country at exactly the
    1,000-respondent boundary, validity-check options, an unknown answer code,
    missing (country, question) cells, one all-refusals cell and a question
    that does not survive option cleaning.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    questions = _fixture_questions(rng)

    codebook = {
        "survey_id": "SYN",
        "country_column": "country",
        "questions": questions,
    }
    (out_dir / "codebook.json").write_text(
        json.dumps(codebook, indent=2), encoding="utf-8")

    # per-(country, question) answer propensities over the codebook codes
    propensities = {}
    for country in FIXTURE_COUNTRIES:
        for q in questions:
            codes = [opt["code"] for opt in q["options"]]
            invalid = [c for c in codes if c.startswith("-")]
            valid = [c for c in codes if not c.startswith("-")]
            weights = rng.dirichlet(np.full(len(valid), 0.7)) * (1.0 - 0.06 * len(invalid))
            probs = dict(zip(valid, weights))
            for c in invalid:
                probs[c] = 0.06
            if (country, q["question_id"]) == ALL_INVALID_CELL:
                probs = {c: 0.0 for c in codes}
                probs["-1"] = 1.0
            propensities[(country, q["question_id"])] = (codes, np.array(
                [probs[c] for c in codes]) / sum(probs.values()))

    csv_path = out_dir / "respondents.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["respondent_id", "country"] + [q["column"] for q in questions])
        rid = 0
        for country, rows in FIXTURE_COUNTRIES.items():
            for _ in range(rows):
                rid += 1
                answers = []
                for q in questions:
                    qid = q["question_id"]
                    if (country, qid) in MISSING_CELLS:
                        answers.append("")
                        continue
                    if qid != 1 and rng.random() < 0.03:
                        answers.append("")  # respondent skipped the question
                        continue
                    if qid == 2 and rng.random() < 0.002:
                        answers.append("99")  # code absent from the codebook
                        continue
                    codes, probs = propensities[(country, qid)]
                    answers.append(codes[int(rng.choice(len(codes), p=probs))])
                writer.writerow([rid, country] + answers)

    splits = dict(FIXTURE_SPLITS)
    (out_dir / "splits.json").write_text(json.dumps(splits, indent=2), encoding="utf-8")
    return out_dir
