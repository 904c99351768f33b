"""Non-fine-tuned reference predictors: zero-shot first-token scoring,
nearest-neighbor retrieval over training entries, the per-question
cross-country mean, and JSON-mode zero-shot generation.

Every predictor either returns a valid distribution or raises
PredictionFailed / PredictionSkipped; the harness counts those as failures
instead of letting bad outputs contaminate subset means.
"""

import hashlib
import json
import re

import numpy as np

from . import prompting
from .training import index_option_logits, softmax_normalize


class PredictionFailed(RuntimeError):
    """Predictor produced unusable output (e.g. unparseable JSON)."""


class PredictionSkipped(RuntimeError):
    """Entry cannot be predicted by this method (e.g. option-count mismatch)."""


def zero_shot_predict(backend, record) -> np.ndarray:
    """Softmax over the option-label first-token logits; no training."""
    return softmax_normalize(index_option_logits(backend, record),
                             context=record.record_id)


class HashingEmbedder:
    """Deterministic character n-gram hashing embedder (no model download).

    Stands in for a sentence-embedding provider in tests and desk-scale
    runs; cosine geometry still places near-identical texts together.
    """

    identifier = "hashing-trigram-v1"

    def __init__(self, dim: int = 256, ngram: int = 3):
        self.dim = dim
        self.ngram = ngram

    def embed(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dim)
        padded = f"  {text.lower()}  "
        for i in range(len(padded) - self.ngram + 1):
            gram = padded[i:i + self.ngram]
            digest = hashlib.sha256(gram.encode("utf-8")).digest()
            idx = int.from_bytes(digest[:4], "little") % self.dim
            sign = 1.0 if digest[4] % 2 == 0 else -1.0
            vec[idx] += sign
        norm = np.linalg.norm(vec)
        return vec / norm if norm > 0 else vec


class SentenceEmbedder:
    """Thin wrapper over sentence-transformers; loaded lazily on first use."""

    def __init__(self, model_name: str = "sentence-transformers/all-MiniLM-L6-v2"):
        self.identifier = model_name
        self._model = None

    def embed(self, text: str) -> np.ndarray:
        if self._model is None:
            from sentence_transformers import SentenceTransformer
            self._model = SentenceTransformer(self.identifier)
        return np.asarray(self._model.encode([text])[0], dtype=float)


def _knn_key(country: str, question_text: str) -> str:
    return f"{question_text}\n{country}"


def knn_predict(record, train_entries, embedder, k: int = 1,
                _index_cache: dict = None) -> np.ndarray:
    """Return the target of the most similar training entry (cosine, top-1).

    Ties break to the lowest training index. A nearest neighbor with a
    different option count cannot be mapped onto the test question, so the
    entry is skipped.
    """
    if not train_entries:
        raise ValueError("knn_predict needs a non-empty training set")
    if k != 1:
        raise ValueError("only k=1 retrieval is supported")
    cache_key = id(train_entries)
    if _index_cache is not None and cache_key in _index_cache:
        matrix = _index_cache[cache_key]
    else:
        matrix = np.stack([
            embedder.embed(_knn_key(e.group, e.question.text)) for e in train_entries])
        norms = np.linalg.norm(matrix, axis=1, keepdims=True)
        matrix = matrix / np.where(norms > 0, norms, 1.0)
        if _index_cache is not None:
            _index_cache[cache_key] = matrix
    query = embedder.embed(_knn_key(record.displayed_country, record.entry.question.text))
    qn = np.linalg.norm(query)
    if qn > 0:
        query = query / qn
    sims = matrix @ query
    best = int(np.argmax(sims))  # argmax ties -> lowest index
    neighbor = train_entries[best]
    if len(neighbor.target.probs) != len(record.options):
        raise PredictionSkipped(
            f"nearest neighbor ({neighbor.group}, {neighbor.question.question_id}) has "
            f"{len(neighbor.target.probs)} options, record has {len(record.options)}")
    return np.asarray(neighbor.target.probs, dtype=float)


def avg_culture_predict(record, train_entries) -> np.ndarray:
    """Mean option distribution across training countries for the question.

    Questions never seen in training get the deterministic uniform
    distribution over the record's options.
    """
    key = (record.entry.question.survey_id, record.entry.question.question_id)
    matching = [e for e in train_entries
                if (e.question.survey_id, e.question.question_id) == key]
    n = len(record.options)
    if not matching:
        return np.full(n, 1.0 / n)
    probs = np.mean([np.asarray(e.target.probs, dtype=float) for e in matching], axis=0)
    if probs.size != n:
        raise PredictionSkipped(
            f"training copies of question {key} have {probs.size} options, record has {n}")
    return probs / probs.sum()


_JSON_OBJECT_RE = re.compile(r"\{[^{}]*\}")


def parse_json_distribution(reply: str, option_labels) -> np.ndarray:
    """Extract a label->percentage JSON object and turn it into a distribution.

    Missing labels count as 0, negatives are clipped to 0, and the vector is
    renormalized. Raises PredictionFailed when no usable object is present.
    """
    match = _JSON_OBJECT_RE.search(reply)
    if not match:
        raise PredictionFailed(f"no JSON object in reply: {reply[:80]!r}")
    try:
        payload = json.loads(match.group(0))
    except json.JSONDecodeError as exc:
        raise PredictionFailed(f"unparseable JSON object: {exc}") from exc
    if not isinstance(payload, dict):
        raise PredictionFailed("JSON reply is not an object")
    values = np.zeros(len(option_labels))
    by_label = {str(k).strip().upper(): v for k, v in payload.items()}
    for i, label in enumerate(option_labels):
        raw = by_label.get(label, 0.0)
        try:
            values[i] = max(float(raw), 0.0)
        except (TypeError, ValueError) as exc:
            raise PredictionFailed(f"non-numeric value for label {label}: {raw!r}") from exc
    total = values.sum()
    if total <= 0:
        raise PredictionFailed("JSON reply assigns no positive mass to any option")
    return values / total


def json_zs_predict(backend, record, templates=None, max_new_tokens: int = 128,
                    retries: int = 1) -> np.ndarray:
    """Ask the backend to emit the distribution as JSON and parse it."""
    prompt = prompting.render_json_zs_prompt(record, templates)
    last_error = None
    for _ in range(retries + 1):
        reply = backend.generate_text(prompt, max_new_tokens)
        try:
            return parse_json_distribution(reply, record.option_labels)
        except PredictionFailed as exc:
            last_error = exc
    raise PredictionFailed(
        f"record {record.record_id}: {last_error} (after {retries + 1} attempts)")
