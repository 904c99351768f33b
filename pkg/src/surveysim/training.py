"""First-token alignment training: extract option logits from a backend and
minimize a divergence between the softmax over those logits and the human
response distribution.

The KL objective is KL(human || model); JS, 1-D Wasserstein and
cross-entropy variants exist for ablations. Each loss comes with its
analytic gradient w.r.t. the option logits, so any backend only has to
backpropagate a supplied gradient and apply an optimizer step.
"""

import hashlib
import json
import math
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import prompting
from .backends import descriptor_dict
from .metrics import as_distribution, one_minus_jsd
from .survey_data import entry_to_record

EPS = 1e-12
LOSS_NAMES = ("KL", "JS", "WA", "CE")


class ConfigurationError(ValueError):
    """Label/tokenizer wiring is unusable for first-token scoring."""


@dataclass(frozen=True)
class OptionLogits:
    values: np.ndarray
    label_token_ids: tuple

    def __post_init__(self):
        if len(self.label_token_ids) != len(set(self.label_token_ids)):
            raise ConfigurationError(f"label token ids collide: {self.label_token_ids}")
        if self.values.shape != (len(self.label_token_ids),):
            raise ValueError("logit vector length does not match label ids")


EARLY_STOP_METRICS = ("valid_one_minus_jsd", "train_loss")


@dataclass
class TrainConfig:
    loss: str = "KL"
    learning_rate: float = 1e-4
    batch_size: int = 16
    adapter_rank: int = 8
    adapter_alpha: float = 32.0
    adapter_dropout: float = 0.05
    max_epochs: int = 50
    early_stop_metric: str = "valid_one_minus_jsd"
    patience: int = 5
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.loss not in LOSS_NAMES:
            raise ValueError(f"loss must be one of {LOSS_NAMES}, got {self.loss!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.adapter_rank < 1:
            raise ValueError("adapter_rank must be >= 1")
        if not 0.0 <= self.adapter_dropout <= 1.0:
            raise ValueError("adapter_dropout must lie in [0, 1]")
        if self.early_stop_metric not in EARLY_STOP_METRICS:
            raise ValueError(
                f"early_stop_metric must be one of {EARLY_STOP_METRICS}")


def softmax_normalize(logits, context: str = "") -> np.ndarray:
    """Max-stabilized softmax over option logits; sums to 1 within 1e-9."""
    values = logits.values if isinstance(logits, OptionLogits) else np.asarray(logits, dtype=float)
    if not np.all(np.isfinite(values)):
        where = f" for {context}" if context else ""
        raise ValueError(f"non-finite option logits{where}: {values}")
    shifted = values - values.max()
    e = np.exp(shifted)
    return e / e.sum()


def label_token_ids(backend, record) -> tuple:
    ids = tuple(backend.first_token_id(label) for label in record.option_labels)
    if len(set(ids)) != len(ids):
        raise ConfigurationError(
            f"option labels {record.option_labels} map to colliding first tokens {ids} "
            f"for record {record.record_id}; choose different labels")
    return ids


def index_option_logits(backend, record) -> OptionLogits:
    """Next-token logits at the prompt's final position, restricted to the
    option label tokens in label order."""
    ids = label_token_ids(backend, record)
    full = np.asarray(backend.next_token_logits(record.rendered_text), dtype=float)
    return OptionLogits(values=full[list(ids)], label_token_ids=ids)


# -- losses ----------------------------------------------------------------

def _clamped(q):
    return np.maximum(np.asarray(q, dtype=float), EPS)


def kl_loss(p_human, p_llm) -> float:
    """KL(human || model) in nats; model probabilities clamped at 1e-12."""
    p = as_distribution(p_human, "p_human")
    q = _clamped(as_distribution(p_llm, "p_llm"))
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {q.shape}")
    mask = p > 0
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


def ce_loss(p_human, p_llm) -> float:
    """Cross-entropy -sum p_human * log p_llm in nats."""
    p = as_distribution(p_human, "p_human")
    q = _clamped(as_distribution(p_llm, "p_llm"))
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {q.shape}")
    return float(-np.sum(p * np.log(q)))


def js_loss(p_human, p_llm) -> float:
    """Jensen-Shannon divergence in nats (natural log, for optimization)."""
    p = as_distribution(p_human, "p_human")
    q = as_distribution(p_llm, "p_llm")
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {q.shape}")
    m = 0.5 * (p + q)

    def kl_nats(a, b):
        mask = a > 0
        return float(np.sum(a[mask] * np.log(a[mask] / b[mask])))

    return 0.5 * kl_nats(p, m) + 0.5 * kl_nats(q, m)


def wa_loss(p_human, p_llm, normalized: bool = True) -> float:
    """1-D Wasserstein over ordinal option positions (CDF difference form)."""
    p = as_distribution(p_human, "p_human")
    q = as_distribution(p_llm, "p_llm")
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {q.shape}")
    if p.size < 2:
        raise ValueError("wa_loss needs at least 2 options")
    scale = 1.0 / (p.size - 1) if normalized else 1.0
    return float(np.abs(np.cumsum(q - p)).sum() * scale)


def compute_loss(name, p_human, p_llm) -> float:
    if name == "KL":
        return kl_loss(p_human, p_llm)
    if name == "JS":
        return js_loss(p_human, p_llm)
    if name == "WA":
        return wa_loss(p_human, p_llm)
    if name == "CE":
        return ce_loss(p_human, p_llm)
    raise ValueError(f"unknown loss {name!r}")


def loss_and_logit_grad(name, p_human, logits):
    """Loss value and its exact gradient w.r.t. the option logits.

    The gradient in probability space is chained through the softmax
    Jacobian: dL/dz_i = q_i * (g_i - sum_j g_j q_j) with g = dL/dq.
    """
    p = np.asarray(p_human, dtype=float)
    z = np.asarray(logits, dtype=float)
    q = softmax_normalize(z)
    if name in ("KL", "CE"):
        qc = np.maximum(q, EPS)
        loss = kl_loss(p, q) if name == "KL" else ce_loss(p, q)
        g = np.where(q > EPS, -p / qc, 0.0)
    elif name == "JS":
        loss = js_loss(p, q)
        m = 0.5 * (p + q)
        g = 0.5 * np.log(q / m)  # q > 0 from softmax, so m > 0
    elif name == "WA":
        loss = wa_loss(p, q)
        scale = 1.0 / (p.size - 1)
        signs = np.sign(np.cumsum(q - p))
        # dL/dq_j = scale * sum_{k >= j} sign(cumdiff_k)
        g = scale * np.cumsum(signs[::-1])[::-1]
    else:
        raise ValueError(f"unknown loss {name!r}")
    grad_z = q * (g - np.dot(g, q))
    return loss, grad_z


# -- training loop -----------------------------------------------------------

@dataclass
class TrainingLog:
    events: list = field(default_factory=list)

    def append(self, **event):
        self.events.append(event)

    @property
    def step_losses(self):
        return [e["loss"] for e in self.events if e.get("event") == "step"]

    @property
    def epoch_valid_scores(self):
        return [e["valid_one_minus_jsd"] for e in self.events if e.get("event") == "epoch"]

    def write_jsonl(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            for event in self.events:
                fh.write(json.dumps(event, ensure_ascii=False) + "\n")
        return path


def _dataset_hash(entries) -> str:
    h = hashlib.sha256()
    for entry in entries:
        h.update(json.dumps(entry_to_record(entry, ""), sort_keys=True).encode("utf-8"))
    return h.hexdigest()


def _config_hash(config: TrainConfig) -> str:
    return hashlib.sha256(
        json.dumps(asdict(config), sort_keys=True).encode("utf-8")).hexdigest()


def validation_mean_one_minus_jsd(backend, records) -> float:
    scores = []
    for record in records:
        probs = softmax_normalize(index_option_logits(backend, record),
                                  context=record.record_id)
        scores.append(one_minus_jsd(probs, record.target_probs))
    return float(np.mean(scores))


def train(backend, train_entries, valid_entries, config: TrainConfig,
          out_dir, templates=None, log_every: int = 1):
    """Optimize the backend's adapter so softmaxed option logits match targets.

    Iterates seeded shuffled batches, checkpoints the best validation mean
    1-JSD, early-stops after `config.patience` epochs without improvement,
    and aborts (keeping the last good checkpoint) if the loss goes
    non-finite. Returns (adapter_path, TrainingLog).
    """
    if not backend.descriptor.trainable:
        raise ConfigurationError(f"backend {backend.descriptor.identifier} is not trainable")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    templates = templates or prompting.load_templates()

    records = [prompting.build_prompt(e, templates) for e in train_entries]
    valid_records = [prompting.build_prompt(e, templates) for e in valid_entries]
    ids_cache = [label_token_ids(backend, r) for r in records]

    backend.configure_training(config)
    rng = np.random.default_rng(config.seed)
    log = TrainingLog()
    log.append(event="config", config=asdict(config),
               backend=descriptor_dict(backend),
               train_entries=len(records), valid_entries=len(valid_records),
               loss_log_base="e")

    best_score = -math.inf
    best_state = backend.export_parameters()
    epochs_since_best = 0
    step = 0
    start = time.monotonic()
    diverged = False

    for epoch in range(config.max_epochs):
        order = rng.permutation(len(records))
        epoch_losses = []
        for lo in range(0, len(order), config.batch_size):
            batch = order[lo:lo + config.batch_size]
            backend.zero_gradients()
            batch_loss = 0.0
            for idx in batch:
                record = records[idx]
                logits, handle = backend.forward_option_logits(
                    record.rendered_text, ids_cache[idx])
                loss, grad = loss_and_logit_grad(config.loss, record.target_probs, logits)
                backend.backward(handle, grad / len(batch))
                batch_loss += loss / len(batch)
            if not math.isfinite(batch_loss):
                log.append(event="divergence", step=step, loss=batch_loss)
                diverged = True
                break
            backend.optimizer_step()
            epoch_losses.append(batch_loss)
            step += 1
            if step % log_every == 0:
                log.append(event="step", step=step, epoch=epoch, loss=batch_loss)
        if diverged:
            break
        valid_score = (validation_mean_one_minus_jsd(backend, valid_records)
                       if valid_records else float("nan"))
        train_loss = float(np.mean(epoch_losses)) if epoch_losses else float("nan")
        log.append(event="epoch", epoch=epoch, valid_one_minus_jsd=valid_score,
                   train_loss=train_loss)
        # higher-is-better framing for both stopping metrics
        if config.early_stop_metric == "valid_one_minus_jsd" and valid_records:
            score = valid_score
        elif config.early_stop_metric == "train_loss":
            score = -train_loss
        else:
            score = None  # no validation set: keep the latest parameters
        if score is None:
            best_state = backend.export_parameters()
        elif score > best_score:
            best_score = score
            best_state = backend.export_parameters()
            epochs_since_best = 0
            log.append(event="checkpoint", epoch=epoch,
                       valid_one_minus_jsd=valid_score, train_loss=train_loss)
        else:
            epochs_since_best += 1
            if epochs_since_best >= config.patience:
                log.append(event="early_stop", epoch=epoch)
                break

    backend.load_parameters(best_state)
    adapter_path = backend.save_adapter(out_dir / "adapter")
    sidecar = {
        "config_hash": _config_hash(config),
        "dataset_hash": _dataset_hash(list(train_entries) + list(valid_entries)),
        "seed": config.seed,
        "backend": descriptor_dict(backend),
        "early_stop_metric": config.early_stop_metric,
        "best_score": None if best_score == -math.inf else best_score,
        "loss": config.loss,
        "loss_log_base": "e",
        "diverged": diverged,
    }
    (out_dir / "adapter_metadata.json").write_text(
        json.dumps(sidecar, indent=2, sort_keys=True), encoding="utf-8")
    log.append(event="done", steps=step, wall_clock_s=time.monotonic() - start,
               adapter_path=str(adapter_path), diverged=diverged)
    log.write_jsonl(out_dir / "training_log.jsonl")
    return adapter_path, log
