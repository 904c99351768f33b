"""Render survey entries into model prompts and apply the two evaluation
transforms: country replacement (context-sensitivity control) and option
shuffling (label-order robustness).

Templates live in a plain-text file with named sections so different
surveys can restyle instructions without code changes. The default prompt
ends with an open parenthesis so the next generated token is an option
label.
"""

import json
import re
import string
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .survey_data import Entry

OPTION_LABELS = string.ascii_uppercase
MAX_OPTIONS = len(OPTION_LABELS)

_SECTION_RE = re.compile(r"^\[([a-z_]+)\]$")
OPTION_LINE_RE = re.compile(r"^\(([A-Z])\) (.*)$", re.MULTILINE)


class UnsupportedQuestionError(ValueError):
    """Question cannot be rendered (e.g. more options than labels)."""


def load_templates(path=None) -> dict:
    """Parse the template file into {section name: text}.

    Sections start at a `[name]` line and run to the next header; leading
    `#` comment lines are ignored and each section's trailing newline is
    stripped so prompts can end mid-line.
    """
    if path is None:
        text = resources.files("surveysim.templates").joinpath("default.txt").read_text("utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    sections = {}
    name = None
    buf = []
    for line in text.splitlines():
        header = _SECTION_RE.match(line.strip())
        if header:
            if name is not None:
                sections[name] = "\n".join(buf).rstrip("\n")
            name = header.group(1)
            buf = []
        elif name is None:
            continue  # preamble / comments
        else:
            buf.append(line)
    if name is not None:
        sections[name] = "\n".join(buf).rstrip("\n")
    for required in ("prompt", "option_line"):
        if required not in sections:
            raise ValueError(f"template file missing [{required}] section")
    return sections


def render_template(template: str, values: dict) -> str:
    # literal replacement, not str.format: templates may contain JSON braces
    out = template
    for key, val in values.items():
        out = out.replace("{" + key + "}", str(val))
    return out


@dataclass(frozen=True)
class PromptRecord:
    entry: Entry
    rendered_text: str
    option_labels: tuple        # "A".."Z" prefix, one per option
    options: tuple              # option texts in displayed order
    target_probs: tuple         # aligned with `options`
    permutation: tuple          # displayed index -> original option index
    control_country: str = None

    @property
    def displayed_country(self) -> str:
        return self.control_country if self.control_country is not None else self.entry.group

    @property
    def record_id(self) -> str:
        return f"{self.entry.question.survey_id}:{self.entry.question.question_id}:{self.entry.group}"


def _render(entry, country, options, templates, template_name="prompt"):
    option_lines = "\n".join(
        render_template(templates["option_line"], {"label": OPTION_LABELS[i], "text": opt})
        for i, opt in enumerate(options)
    )
    return render_template(
        templates[template_name],
        {"country": country, "question": entry.question.text, "option_lines": option_lines},
    )


def build_prompt(entry: Entry, templates=None) -> PromptRecord:
    """Render one entry with the default template and identity permutation."""
    templates = templates or load_templates()
    n = len(entry.question.options)
    if n > MAX_OPTIONS:
        raise UnsupportedQuestionError(
            f"question {entry.question.question_id} has {n} options; max {MAX_OPTIONS}")
    options = tuple(entry.question.options)
    return PromptRecord(
        entry=entry,
        rendered_text=_render(entry, entry.group, options, templates),
        option_labels=tuple(OPTION_LABELS[:n]),
        options=options,
        target_probs=tuple(float(p) for p in entry.target.probs),
        permutation=tuple(range(n)),
    )


def render_json_zs_prompt(record: PromptRecord, templates=None) -> str:
    """Prompt text asking for a JSON label->percentage object instead."""
    templates = templates or load_templates()
    return _render(record.entry, record.displayed_country, record.options,
                   templates, template_name="json_zs")


def apply_control_permutation(records, rng_seed, country_pool=None, templates=None):
    """Replace each record's displayed country with a uniform draw from the pool.

    Draws are with replacement and may return the record's own country. The
    target distribution stays the original country's: the transform measures
    context sensitivity, not correctness under the replacement.
    """
    templates = templates or load_templates()
    if country_pool is None:
        country_pool = sorted({r.entry.group for r in records})
    else:
        country_pool = sorted(country_pool)
    if len(country_pool) < 2:
        raise ValueError("country pool must contain at least 2 countries")
    rng = np.random.default_rng(rng_seed)
    out = []
    for record in records:
        drawn = country_pool[int(rng.integers(len(country_pool)))]
        out.append(replace(
            record,
            control_country=drawn,
            rendered_text=_render(record.entry, drawn, record.options, templates),
        ))
    return out


def shuffle_options(record: PromptRecord, rng_seed=None, permutation=None,
                    templates=None) -> PromptRecord:
    """Permute option texts and target probabilities by one shared permutation.

    Labels keep their positions (A is always first); what changes is which
    option text each label carries. Pass `permutation` to force a specific
    order, otherwise it is drawn from the seed.
    """
    templates = templates or load_templates()
    n = len(record.options)
    if permutation is None:
        rng = np.random.default_rng(rng_seed)
        permutation = tuple(int(i) for i in rng.permutation(n))
    else:
        permutation = tuple(int(i) for i in permutation)
        if sorted(permutation) != list(range(n)):
            raise ValueError(f"not a permutation of 0..{n - 1}: {permutation}")
    options = tuple(record.options[i] for i in permutation)
    target = tuple(record.target_probs[i] for i in permutation)
    composed = tuple(record.permutation[i] for i in permutation)
    return replace(
        record,
        rendered_text=_render(record.entry, record.displayed_country, options, templates),
        options=options,
        target_probs=target,
        permutation=composed,
    )


def parse_option_lines(rendered_text: str):
    """Recover the "(L) text" lines from a rendered prompt."""
    return OPTION_LINE_RE.findall(rendered_text)


def write_prompts_jsonl(records, path):
    """Dump rendered prompts (with their targets) for eyeball inspection."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps({
                "record_id": record.record_id,
                "displayed_country": record.displayed_country,
                "rendered_text": record.rendered_text,
                "option_labels": list(record.option_labels),
                "options": list(record.options),
                "target_probs": list(record.target_probs),
                "permutation": list(record.permutation),
            }, ensure_ascii=False) + "\n")
    return path
