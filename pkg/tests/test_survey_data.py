"""Ingestion, cleaning, filtering and split construction."""

import json

import numpy as np
import pandas as pd
import pytest

from surveysim import survey_data as sd


def _questions_and_rows():
    codebook = {
        "survey_id": "T",
        "country_column": "country",
        "questions": [
            {"question_id": 1, "column": "Q1", "text": "First?", "dimension": "a",
             "options": [{"code": "1", "label": "A"}, {"code": "2", "label": "B"}]},
            {"question_id": 2, "column": "Q2", "text": "Second?", "dimension": "b",
             "options": [{"code": "1", "label": "X"}, {"code": "2", "label": "Y"},
                         {"code": "3", "label": "Z"}]},
        ],
    }
    rows = (
        [{"country": "P", "Q1": "1", "Q2": "1"}] * 2
        + [{"country": "P", "Q1": "2", "Q2": "2"}] * 2
        + [{"country": "R", "Q1": "1", "Q2": "3"}] * 3
        + [{"country": "S", "Q1": "2", "Q2": ""}] * 1
    )
    return codebook, rows


class TestParseSurvey:
    def test_equal_answers_split_evenly(self):
        codebook, _ = _questions_and_rows()
        rows = [{"country": "P", "Q1": "1"}, {"country": "P", "Q1": "1"},
                {"country": "P", "Q1": "2"}, {"country": "P", "Q1": "2"}]
        _, dists, _ = sd.parse_survey(rows, codebook)
        d = next(d for d in dists if d.question_id == 1)
        assert d.probs == (0.5, 0.5)
        assert d.respondent_count == 4

    def test_hand_tallied_fixture(self):
        codebook, rows = _questions_and_rows()
        questions, dists, report = sd.parse_survey(rows, codebook)
        assert len(questions) == 2
        by_key = {(d.group, d.question_id): d for d in dists}
        # hand tally: P answered Q1 with 2xA, 2xB; R 3xA; S 1xB
        assert by_key[("P", 1)].probs == (0.5, 0.5)
        assert by_key[("R", 1)].probs == (1.0, 0.0)
        assert by_key[("S", 1)].probs == (0.0, 1.0)
        assert by_key[("P", 2)].probs == (0.5, 0.5, 0.0)
        assert by_key[("R", 2)].probs == (0.0, 0.0, 1.0)
        assert ("S", 2) not in by_key  # blank answers tally nothing

    def test_unknown_code_warns_and_skips(self):
        codebook, _ = _questions_and_rows()
        rows = [{"country": "P", "Q1": "1"}, {"country": "P", "Q1": "7"}]
        _, dists, report = sd.parse_survey(rows, codebook)
        assert any("unknown answer code" in w for w in report.warnings)
        d = next(d for d in dists if d.question_id == 1)
        assert d.respondent_count == 1

    def test_single_option_question_dropped(self):
        codebook = {"survey_id": "T", "questions": [
            {"question_id": 9, "column": "Q9", "text": "?", "options":
             [{"code": "1", "label": "Only"}]}]}
        questions, _, report = sd.parse_survey([], codebook)
        assert questions == []
        assert report.dropped_questions == [(9, "fewer than 2 options in codebook")]


class TestFilterCountries:
    def _dists(self, counts):
        return [sd.ResponseDistribution(group=g, question_id=1, probs=(0.5, 0.5),
                                        respondent_count=c)
                for g, c in counts.items()]

    def test_strictly_greater_boundary(self):
        kept, report = sd.filter_countries(self._dists({"A": 999, "B": 1001}), 1000)
        assert {d.group for d in kept} == {"B"}
        assert report.dropped_countries == [("A", 999)]

    def test_exactly_at_threshold_is_dropped(self):
        kept, _ = sd.filter_countries(self._dists({"A": 1000}), 1000)
        assert kept == []

    def test_min_zero_is_identity(self):
        dists = self._dists({"A": 5, "B": 7})
        kept, _ = sd.filter_countries(dists, 0)
        assert kept == dists

    def test_country_total_is_max_over_questions(self):
        dists = [
            sd.ResponseDistribution("A", 1, (1.0, 0.0), respondent_count=800),
            sd.ResponseDistribution("A", 2, (1.0, 0.0), respondent_count=1200),
        ]
        kept, _ = sd.filter_countries(dists, 1000)
        assert len(kept) == 2  # the group qualifies, all its cells stay


class TestStripInvalidOptions:
    def _q(self, options):
        return sd.SurveyQuestion(question_id=1, text="?", options=tuple(options))

    def test_renormalizes_remaining_mass(self):
        q = self._q(("Yes", "No", "Refuse to answer"))
        d = sd.ResponseDistribution("P", 1, (0.6, 0.3, 0.1), 10)
        cq, cds, _ = sd.strip_invalid_options(q, [d])
        assert cq.options == ("Yes", "No")
        assert cds[0].probs[0] == pytest.approx(2 / 3)
        assert cds[0].probs[1] == pytest.approx(1 / 3)

    def test_no_invalid_options_is_identity(self):
        q = self._q(("Yes", "No"))
        d = sd.ResponseDistribution("P", 1, (0.4, 0.6), 10)
        cq, cds, _ = sd.strip_invalid_options(q, [d])
        assert cq is q
        assert cds == [d]

    def test_all_mass_on_invalid_drops_the_cell_and_question(self):
        q = self._q(("Yes", "No", "Refuse to answer"))
        d = sd.ResponseDistribution("P", 1, (0.0, 0.0, 1.0), 10)
        cq, cds, report = sd.strip_invalid_options(q, [d])
        assert cq is None and cds == []
        assert (1, "no distribution survived cleaning") in report.dropped_questions

    def test_matching_is_case_insensitive(self):
        q = self._q(("Yes", "REFUSE TO ANSWER"))
        cq, _, report = sd.strip_invalid_options(q, [])
        assert cq is None  # one surviving option -> dropped
        assert report.dropped_questions

    def test_extended_labels_off_by_default(self):
        q = self._q(("Yes", "No", "Don't know"))
        d = sd.ResponseDistribution("P", 1, (0.5, 0.3, 0.2), 10)
        cq, _, _ = sd.strip_invalid_options(q, [d])
        assert cq.options == ("Yes", "No", "Don't know")
        cq2, cds2, _ = sd.strip_invalid_options(q, [d], sd.EXTENDED_INVALID_OPTIONS)
        assert cq2.options == ("Yes", "No")
        assert cds2[0].probs == (pytest.approx(0.625), pytest.approx(0.375))


class TestInvariantsOnFixture:
    def _pipeline(self, fixture_dir):
        return sd.load_respondent_csv(fixture_dir / "respondents.csv",
                                      fixture_dir / "codebook.json")

    def test_distributions_are_normalized(self, fixture_dir):
        _, dists, _ = self._pipeline(fixture_dir)
        for d in dists:
            arr = np.asarray(d.probs)
            assert abs(arr.sum() - 1.0) <= 1e-9
            assert np.all(arr >= 0)

    def test_filter_and_strip_commute(self, fixture_dir):
        questions, dists, _ = self._pipeline(fixture_dir)
        q_a, d_a, _ = sd.clean_survey(questions, dists)
        d_a, _ = sd.filter_countries(d_a, 1000)
        d_b, _ = sd.filter_countries(dists, 1000)
        q_b, d_b, _ = sd.clean_survey(questions, d_b)
        assert [q.question_id for q in q_a] == [q.question_id for q in q_b]
        assert d_a == d_b

    def test_rerun_is_deterministic(self, fixture_dir):
        first = self._pipeline(fixture_dir)
        second = self._pipeline(fixture_dir)
        assert first[0] == second[0]
        assert first[1] == second[1]


class TestBuildSplits:
    def _full_grid(self):
        questions, distributions = [], []
        for qid in range(1, 5):
            questions.append(sd.SurveyQuestion(qid, f"Q{qid}?", ("A", "B"), "", "T"))
            for country in ("P", "R"):
                distributions.append(
                    sd.ResponseDistribution(country, qid, (0.5, 0.5), 100))
        return questions, distributions

    def test_complete_grid_train_count(self):
        questions, distributions = self._full_grid()
        cfg = {"country_sets": {"C2": ["R"], "C3": ["R"]},
               "question_sets": {"Q2": [3], "Q3": [4]}}
        splits = sd.build_splits(questions, distributions, cfg)
        assert splits.country_sets == {"C1": ["P"], "C2": ["R"], "C3": ["R"]}
        assert splits.question_sets == {"Q1": [1, 2], "Q2": [3], "Q3": [4]}
        assert len(splits.entries["train"]) == 1 * 2  # |C1| x |Q1|, grid complete

    def test_c2_c3_overlap_allowed_but_not_with_c1(self):
        questions, distributions = self._full_grid()
        cfg = {"country_sets": {"C2": ["R"], "C3": ["R", "P"]},
               "question_sets": {"Q2": [3], "Q3": [4]}}
        splits = sd.build_splits(questions, distributions, cfg)
        assert splits.country_sets["C1"] == []
        assert set(splits.country_sets["C2"]) & set(splits.country_sets["C3"]) == {"R"}

    def test_overlapping_question_sets_rejected(self):
        questions, distributions = self._full_grid()
        cfg = {"country_sets": {"C2": ["R"], "C3": []},
               "question_sets": {"Q2": [3], "Q3": [3, 4]}}
        with pytest.raises(ValueError):
            sd.build_splits(questions, distributions, cfg)

    def test_no_duplicate_pairs_within_subset(self, fixture_dir):
        questions, dists, _ = sd.load_respondent_csv(
            fixture_dir / "respondents.csv", fixture_dir / "codebook.json")
        questions, dists, _ = sd.clean_survey(questions, dists)
        dists, _ = sd.filter_countries(dists, 1000)
        cfg = json.loads((fixture_dir / "splits.json").read_text())
        splits = sd.build_splits(questions, dists, cfg)
        for subset, entries in splits.entries.items():
            keys = [(e.group, e.question.question_id) for e in entries]
            assert len(keys) == len(set(keys)), subset
        # train/valid/tests use distinct (country set, question set) cells
        assert len(set(splits.assignments)) == len(splits.assignments)


class TestFixtureCounts:
    """The shipped fixture must reproduce its frozen statistics exactly."""

    def _build(self, fixture_dir):
        questions, dists, report = sd.load_respondent_csv(
            fixture_dir / "respondents.csv", fixture_dir / "codebook.json")
        questions, dists, report = sd.clean_survey(questions, dists, report=report)
        dists, report = sd.filter_countries(dists, 1000, report=report)
        cfg = json.loads((fixture_dir / "splits.json").read_text())
        qids = {d.question_id for d in dists}
        questions = [q for q in questions if q.question_id in qids]
        return sd.build_splits(questions, dists, cfg), report

    def test_set_sizes_and_entry_counts(self, fixture_dir, expected_counts):
        splits, report = self._build(fixture_dir)
        assert {k: len(v) for k, v in splits.country_sets.items()} == \
            expected_counts["countries"]
        assert {k: len(v) for k, v in splits.question_sets.items()} == \
            expected_counts["questions"]
        assert splits.counts() == expected_counts["entries"]
        assert [list(x) for x in report.dropped_countries] == \
            expected_counts["filtered_countries"]

    def test_counts_match_independent_recount(self, fixture_dir, expected_counts):
        # recount with pandas, independently of the package's tally path
        frame = pd.read_csv(fixture_dir / "respondents.csv", dtype=str,
                            keep_default_na=False)
        codebook = json.loads((fixture_dir / "codebook.json").read_text())
        cfg = json.loads((fixture_dir / "splits.json").read_text())
        valid_codes = {q["question_id"]: {o["code"] for o in q["options"]
                                          if not o["code"].startswith("-")}
                       for q in codebook["questions"]}
        # a country qualifies if any question has > 1000 valid answers
        cells = {}
        for q in codebook["questions"]:
            qid = q["question_id"]
            if len(valid_codes[qid]) < 2:
                continue  # question cannot survive cleaning
            col = frame[q["column"]]
            for country, sub in frame.groupby("country"):
                count = sub[q["column"]].isin(valid_codes[qid]).sum()
                if count > 0:
                    cells[(country, qid)] = count
        totals = {}
        for (country, qid), count in cells.items():
            totals[country] = max(totals.get(country, 0), count)
        qualified = {c for c, t in totals.items() if t > 1000}
        cells = {k: v for k, v in cells.items() if k[0] in qualified}

        q2, q3 = set(cfg["question_sets"]["Q2"]), set(cfg["question_sets"]["Q3"])
        all_qids = {qid for _, qid in cells}
        q1 = all_qids - q2 - q3
        c2 = set(cfg["country_sets"]["C2"]) & qualified
        c3 = set(cfg["country_sets"]["C3"]) & qualified
        c1 = qualified - c2 - c3
        csets = {"C1": c1, "C2": c2, "C3": c3}
        qsets = {"Q1": q1, "Q2": q2 & all_qids, "Q3": q3 & all_qids}
        recount = {}
        for subset, cs, qs in [("train", "C1", "Q1"), ("valid", "C1", "Q2"),
                               ("C1-Q3", "C1", "Q3"), ("C2-Q1", "C2", "Q1"),
                               ("C2-Q3", "C2", "Q3"), ("C3-Q1", "C3", "Q1"),
                               ("C3-Q3", "C3", "Q3")]:
            recount[subset] = sum(1 for (country, qid) in cells
                                  if country in csets[cs] and qid in qsets[qs])
        assert recount == expected_counts["entries"]


class TestJsonlRoundTrip:
    def test_write_read_round_trip(self, fixture_dir, tmp_path):
        questions, dists, _ = sd.load_respondent_csv(
            fixture_dir / "respondents.csv", fixture_dir / "codebook.json")
        questions, dists, _ = sd.clean_survey(questions, dists)
        dists, _ = sd.filter_countries(dists, 1000)
        cfg = json.loads((fixture_dir / "splits.json").read_text())
        splits = sd.build_splits(questions, dists, cfg)
        path = sd.write_dataset_jsonl(splits, tmp_path / "dataset.jsonl")
        loaded = sd.read_dataset_jsonl(path)
        assert {k: len(v) for k, v in loaded.items()} == splits.counts()
        entry = loaded["train"][0]
        original = splits.entries["train"][0]
        assert entry.group == original.group
        assert entry.question.options == original.question.options
        assert np.allclose(entry.target.probs, original.target.probs)

    def test_write_is_byte_deterministic(self, fixture_dir, tmp_path):
        questions, dists, _ = sd.load_respondent_csv(
            fixture_dir / "respondents.csv", fixture_dir / "codebook.json")
        questions, dists, _ = sd.clean_survey(questions, dists)
        cfg = json.loads((fixture_dir / "splits.json").read_text())
        splits = sd.build_splits(questions, dists, cfg)
        p1 = sd.write_dataset_jsonl(splits, tmp_path / "a.jsonl")
        p2 = sd.write_dataset_jsonl(splits, tmp_path / "b.jsonl")
        assert p1.read_bytes() == p2.read_bytes()


class TestAggregatedRoute:
    def test_load_aggregated_fixture(self, fixture_dir):
        questions, dists, report = sd.load_aggregated_json(
            fixture_dir / "aggregated_pew.json")
        assert len(questions) == 6
        assert len(dists) == 28
        assert all(q.survey_id == "PEW" for q in questions)
        for d in dists:
            assert abs(sum(d.probs) - 1.0) <= 1e-9

    def test_bad_length_and_zero_mass_are_skipped(self, tmp_path):
        payload = {
            "survey_id": "X",
            "questions": [{"question_id": 1, "text": "?", "options": ["A", "B"]}],
            "distributions": [
                {"question_id": 1, "country": "P", "probs": [0.5, 0.5, 0.0]},
                {"question_id": 1, "country": "R", "probs": [0.0, 0.0]},
                {"question_id": 2, "country": "P", "probs": [1.0, 0.0]},
                {"question_id": 1, "country": "S", "probs": [0.25, 0.75]},
            ],
        }
        path = tmp_path / "agg.json"
        path.write_text(json.dumps(payload))
        _, dists, report = sd.load_aggregated_json(path)
        assert [(d.group, d.question_id) for d in dists] == [("S", 1)]
        assert len(report.warnings) == 3
