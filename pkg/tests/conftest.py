import json
from pathlib import Path

import pytest

from surveysim.survey_data import Entry, ResponseDistribution, SurveyQuestion

FIXTURES = Path(__file__).parent / "fixtures" / "synthetic_survey"


def make_entry(country="Atlantis", question_id=1, options=("Yes", "No"),
               probs=(0.5, 0.5), text=None, survey_id="SYN", dimension="values"):
    question = SurveyQuestion(
        question_id=question_id,
        text=text or f"Question {question_id}: how do people feel about option sets?",
        options=tuple(options),
        dimension=dimension,
        survey_id=survey_id,
    )
    target = ResponseDistribution(group=country, question_id=question_id,
                                  probs=tuple(probs), respondent_count=1000)
    return Entry(question=question, group=country, target=target)


@pytest.fixture(scope="session")
def fixture_dir():
    return FIXTURES


@pytest.fixture(scope="session")
def expected_counts():
    return json.loads((FIXTURES / "expected_counts.json").read_text())
