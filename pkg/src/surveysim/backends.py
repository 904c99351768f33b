"""Uniform interface over anything that can score first tokens.

Three desk-scale backends (a deterministic mock, a per-(country, question)
logit table, and a country-embedding variant that generalizes to unseen
countries) plus an optional real causal-LM backend with low-rank adapters.
The trainer only needs forward -> gradient -> step, so the toy backends run
on numpy while the real one runs on torch.
"""

import hashlib
import json
import re
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .prompting import OPTION_LABELS, parse_option_lines


class CapabilityError(RuntimeError):
    """Backend asked for something its kind does not support."""


@dataclass(frozen=True)
class BackendDescriptor:
    kind: str               # "real_lm" | "mock" | "toy_table" | "toy_embedding"
    identifier: str
    trainable: bool
    deterministic: bool


class Backend:
    """Base contract; training hooks raise unless the backend is trainable."""

    descriptor: BackendDescriptor

    def next_token_logits(self, prompt_text: str) -> np.ndarray:
        raise NotImplementedError

    def first_token_id(self, label: str) -> int:
        """Token id of option label `label` as it follows the rendered "("."""
        raise NotImplementedError

    def generate_text(self, prompt_text: str, max_new_tokens: int) -> str:
        raise CapabilityError(f"{self.descriptor.kind} backend cannot generate text")

    # -- training surface -------------------------------------------------
    def configure_training(self, config):
        raise CapabilityError(f"{self.descriptor.kind} backend is not trainable")

    def forward_option_logits(self, prompt_text, option_token_ids):
        raise CapabilityError(f"{self.descriptor.kind} backend is not trainable")

    def backward(self, handle, grad_wrt_option_logits):
        raise CapabilityError(f"{self.descriptor.kind} backend is not trainable")

    def optimizer_step(self):
        raise CapabilityError(f"{self.descriptor.kind} backend is not trainable")

    def zero_gradients(self):
        raise CapabilityError(f"{self.descriptor.kind} backend is not trainable")

    def export_parameters(self):
        raise CapabilityError(f"{self.descriptor.kind} backend has no parameters")

    def load_parameters(self, state):
        raise CapabilityError(f"{self.descriptor.kind} backend has no parameters")

    def save_adapter(self, path):
        raise CapabilityError(f"{self.descriptor.kind} backend has no adapter")

    def load_adapter(self, path):
        raise CapabilityError(f"{self.descriptor.kind} backend has no adapter")

    def parameters_hash(self) -> str:
        raise CapabilityError(f"{self.descriptor.kind} backend has no parameters")


class MockBackend(Backend):
    """Fixture-driven backend: exact logits and replies per prompt text."""

    def __init__(self, fixture, identifier="mock"):
        if isinstance(fixture, (str, Path)):
            fixture = json.loads(Path(fixture).read_text(encoding="utf-8"))
        self.vocab_size = int(fixture.get("vocab_size", len(OPTION_LABELS)))
        self.logits = {k: np.asarray(v, dtype=float) for k, v in fixture.get("logits", {}).items()}
        self.replies = dict(fixture.get("replies", {}))
        self.default_logits = (
            np.asarray(fixture["default_logits"], dtype=float)
            if "default_logits" in fixture else None
        )
        self.descriptor = BackendDescriptor("mock", identifier, trainable=False, deterministic=True)

    def next_token_logits(self, prompt_text):
        if prompt_text in self.logits:
            return self.logits[prompt_text].copy()
        if self.default_logits is not None:
            return self.default_logits.copy()
        raise KeyError(f"mock backend has no logits for prompt: {prompt_text[:60]!r}...")

    def first_token_id(self, label):
        return _label_id(label)

    def generate_text(self, prompt_text, max_new_tokens):
        if max_new_tokens <= 0:
            return ""
        return self.replies.get(prompt_text, "")


def _label_id(label: str) -> int:
    if len(label) != 1 or label not in OPTION_LABELS:
        raise ValueError(f"unknown option label {label!r}; expected one of A-Z")
    return OPTION_LABELS.index(label)


def _stable_seed(*parts) -> int:
    digest = hashlib.sha256("::".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


class AdamW:
    """Decoupled-weight-decay adaptive optimizer over a dict of numpy arrays."""

    def __init__(self, learning_rate, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.lr = float(learning_rate)
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params, grads):
        self.t += 1
        for key in sorted(grads):
            g = grads[key]
            m = self.m.setdefault(key, np.zeros_like(g))
            v = self.v.setdefault(key, np.zeros_like(g))
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            m_hat = m / (1 - self.b1 ** self.t)
            v_hat = v / (1 - self.b2 ** self.t)
            params[key] -= self.lr * (m_hat / (np.sqrt(v_hat) + self.eps)
                                      + self.weight_decay * params[key])


_PROMPT_RE = re.compile(
    r"How would someone from (?P<country>.+?) answer the following question:\s*"
    r"(?P<question>.+?)\s*Here are the options:",
    re.DOTALL,
)


def parse_prompt_context(prompt_text: str):
    """Extract (country, question key, option count) from a rendered prompt.

    Toy backends key their parameters on this; the regex is tied to the
    default template's instruction and options sections.
    """
    m = _PROMPT_RE.search(prompt_text)
    if not m:
        raise ValueError(f"prompt does not match the expected template: {prompt_text[:80]!r}")
    n = len(parse_option_lines(prompt_text))
    if n < 2:
        raise ValueError("prompt carries fewer than 2 option lines")
    return m.group("country").strip(), " ".join(m.group("question").split()), n


class _ToyBackend(Backend):
    """Shared plumbing for the numpy table/embedding backends."""

    FILL = -30.0  # logit for vocabulary slots outside the question's options

    def __init__(self):
        self.params = {}
        self.grads = {}
        self.optimizer = None
        self.vocab_size = len(OPTION_LABELS)

    def first_token_id(self, label):
        return _label_id(label)

    def configure_training(self, config):
        self.optimizer = AdamW(learning_rate=config.learning_rate,
                               weight_decay=getattr(config, "weight_decay", 0.0))

    def zero_gradients(self):
        self.grads = {}

    def _accumulate(self, key, grad):
        if key in self.grads:
            self.grads[key] += grad
        else:
            self.grads[key] = grad.copy()

    def optimizer_step(self):
        if self.optimizer is None:
            raise CapabilityError("configure_training was not called")
        self.optimizer.step(self.params, self.grads)
        self.grads = {}

    def export_parameters(self):
        return {k: v.copy() for k, v in self.params.items()}

    def load_parameters(self, state):
        self.params = {k: np.asarray(v, dtype=float).copy() for k, v in state.items()}

    def parameters_hash(self):
        h = hashlib.sha256()
        for key in sorted(self.params):
            h.update(key.encode("utf-8"))
            h.update(np.ascontiguousarray(self.params[key]).tobytes())
        return h.hexdigest()

    def save_adapter(self, path):
        path = Path(path)
        if path.suffix != ".npz":
            path = path.with_suffix(".npz")
        path.parent.mkdir(parents=True, exist_ok=True)
        keys = sorted(self.params)
        arrays = {f"p{i:06d}": self.params[k] for i, k in enumerate(keys)}
        np.savez(path, manifest=json.dumps(keys), **arrays)
        return path

    def load_adapter(self, path):
        with np.load(path, allow_pickle=False) as data:
            keys = json.loads(str(data["manifest"]))
            self.params = {k: data[f"p{i:06d}"].astype(float)
                           for i, k in enumerate(keys)}

    def _embed_logits(self, full, values):
        full[: values.size] = values
        return full


class ToyTableBackend(_ToyBackend):
    """One learnable logit row per (country, question): a convex toy model.

    Unseen pairs score as uniform. Gradients on option logits land directly
    on the table row, so KL training has a known optimum.
    """

    def __init__(self, identifier="toy-table"):
        super().__init__()
        self.descriptor = BackendDescriptor("toy_table", identifier,
                                            trainable=True, deterministic=True)

    @staticmethod
    def _key(country, question_key):
        return f"table::{country}::{question_key}"

    def next_token_logits(self, prompt_text):
        country, qkey, n = parse_prompt_context(prompt_text)
        row = self.params.get(self._key(country, qkey), np.zeros(n))
        full = np.full(self.vocab_size, self.FILL)
        return self._embed_logits(full, row[:n])

    def forward_option_logits(self, prompt_text, option_token_ids):
        country, qkey, n = parse_prompt_context(prompt_text)
        if len(option_token_ids) != n:
            raise ValueError("option id count does not match prompt option lines")
        key = self._key(country, qkey)
        if key not in self.params:
            self.params[key] = np.zeros(n)
        row = self.params[key]
        logits = np.array([row[t] if t < n else self.FILL for t in option_token_ids])
        return logits, (key, tuple(option_token_ids), n)

    def backward(self, handle, grad_wrt_option_logits):
        key, ids, n = handle
        grad_row = np.zeros(n)
        for g, t in zip(grad_wrt_option_logits, ids):
            if t < n:
                grad_row[t] += g
        self._accumulate(key, grad_row)


class ToyEmbeddingBackend(_ToyBackend):
    """Country-embedding toy model: logits = question bias + emb @ loading.

    Country embeddings are fixed-seed random at creation and trainable;
    question bias and loading start at zero, so the untrained model predicts
    uniform everywhere (country-blind). An unseen country falls back to the
    zero embedding, i.e. the learned per-question prior; an unseen question
    predicts uniform.
    """

    def __init__(self, identifier="toy-embedding", embed_dim=8, seed=0):
        super().__init__()
        self.embed_dim = int(embed_dim)
        self.seed = int(seed)
        self.descriptor = BackendDescriptor("toy_embedding", identifier,
                                            trainable=True, deterministic=True)

    def _country_key(self, country):
        return f"emb::{country}"

    def _ensure_country(self, country):
        key = self._country_key(country)
        if key not in self.params:
            rng = np.random.default_rng(_stable_seed("emb", self.seed, country))
            self.params[key] = rng.normal(0.0, 1.0, self.embed_dim)
        return key

    def _logits(self, country, qkey, n, create=False):
        bias_key, load_key = f"bias::{qkey}", f"load::{qkey}"
        if create:
            self._ensure_country(country)
            self.params.setdefault(bias_key, np.zeros(n))
            self.params.setdefault(load_key, np.zeros((self.embed_dim, n)))
        bias = self.params.get(bias_key)
        load = self.params.get(load_key)
        if bias is None or load is None:
            return np.zeros(n)  # unseen question
        emb = self.params.get(self._country_key(country))
        if emb is None:
            emb = np.zeros(self.embed_dim)  # unseen country -> question prior
        return bias + emb @ load

    def next_token_logits(self, prompt_text):
        country, qkey, n = parse_prompt_context(prompt_text)
        full = np.full(self.vocab_size, self.FILL)
        return self._embed_logits(full, self._logits(country, qkey, n))

    def forward_option_logits(self, prompt_text, option_token_ids):
        country, qkey, n = parse_prompt_context(prompt_text)
        if len(option_token_ids) != n:
            raise ValueError("option id count does not match prompt option lines")
        z = self._logits(country, qkey, n, create=True)
        logits = np.array([z[t] if t < n else self.FILL for t in option_token_ids])
        return logits, (country, qkey, tuple(option_token_ids), n)

    def backward(self, handle, grad_wrt_option_logits):
        country, qkey, ids, n = handle
        g = np.zeros(n)
        for gv, t in zip(grad_wrt_option_logits, ids):
            if t < n:
                g[t] += gv
        emb_key = self._country_key(country)
        emb = self.params[emb_key]
        load = self.params[f"load::{qkey}"]
        self._accumulate(f"bias::{qkey}", g)
        self._accumulate(f"load::{qkey}", np.outer(emb, g))
        self._accumulate(emb_key, load @ g)


def make_backend(spec: dict) -> Backend:
    """Instantiate a backend from a config section {kind, identifier, ...}."""
    kind = spec.get("kind")
    if kind == "mock":
        return MockBackend(spec.get("fixture", spec.get("identifier")),
                           identifier=spec.get("identifier", "mock"))
    if kind == "toy_table":
        return ToyTableBackend(identifier=spec.get("identifier", "toy-table"))
    if kind == "toy_embedding":
        return ToyEmbeddingBackend(
            identifier=spec.get("identifier", "toy-embedding"),
            embed_dim=spec.get("embed_dim", 8),
            seed=spec.get("seed", 0),
        )
    if kind == "real_lm":
        from .hf_backend import HFBackend
        return HFBackend(
            model_name=spec["identifier"],
            device=spec.get("device", "cpu"),
            dtype=spec.get("dtype", "float32"),
            target_modules=tuple(spec.get("target_modules", ("q_proj", "v_proj"))),
        )
    raise ValueError(f"unknown backend kind: {kind!r}")


def descriptor_dict(backend: Backend) -> dict:
    return asdict(backend.descriptor)
