"""Causal-LM backend over transformers with low-rank adapter fine-tuning.

Base weights stay frozen; training touches only the injected rank-r deltas
on the attention projections. Loss gradients arrive from the trainer as
numpy vectors over the option logits and are backpropagated with
tensor.backward(gradient=...), so the trainer stays framework-free.

Imports of torch/transformers happen at construction time: the rest of the
package works without them.
"""

import hashlib
from pathlib import Path

import numpy as np

from .backends import Backend, BackendDescriptor, CapabilityError

LABEL_CONTEXT = "("  # option labels are scored as the token following "("


class HFBackend(Backend):
    def __init__(self, model_name, device="cpu", dtype="float32",
                 target_modules=("q_proj", "v_proj"), max_context=4096):
        import torch
        from transformers import AutoModelForCausalLM, AutoTokenizer

        self._torch = torch
        self.model_name = model_name
        self.device = device
        self.target_modules = tuple(target_modules)
        self.max_context = max_context
        self.tokenizer = AutoTokenizer.from_pretrained(model_name)
        self.model = AutoModelForCausalLM.from_pretrained(
            model_name, dtype=getattr(torch, dtype))
        self.model.to(device)
        self.model.eval()
        for param in self.model.parameters():
            param.requires_grad_(False)
        self._adapters = {}
        self.optimizer = None
        self._base_hash = None
        self.descriptor = BackendDescriptor(
            kind="real_lm", identifier=model_name, trainable=True,
            deterministic=(device == "cpu"))

    # -- inference ---------------------------------------------------------
    def _encode(self, text):
        ids = self.tokenizer(text, return_tensors="pt").input_ids
        if ids.shape[1] > self.max_context:
            raise ValueError(
                f"prompt of {ids.shape[1]} tokens exceeds context {self.max_context}")
        return ids.to(self.device)

    def next_token_logits(self, prompt_text):
        torch = self._torch
        with torch.no_grad():
            logits = self.model(self._encode(prompt_text)).logits[0, -1]
        return logits.float().cpu().numpy()

    def first_token_id(self, label):
        """Token id the model would emit for `label` right after "("."""
        ctx_ids = self.tokenizer(LABEL_CONTEXT, add_special_tokens=False).input_ids
        full_ids = self.tokenizer(LABEL_CONTEXT + label,
                                  add_special_tokens=False).input_ids
        if full_ids[: len(ctx_ids)] == ctx_ids and len(full_ids) > len(ctx_ids):
            return int(full_ids[len(ctx_ids)])
        # tokenizer merged "(X" into one token: prompts end with "(", so the
        # continuation token is that merged token
        return int(full_ids[-1])

    def generate_text(self, prompt_text, max_new_tokens):
        if max_new_tokens <= 0:
            return ""
        torch = self._torch
        ids = self._encode(prompt_text)
        with torch.no_grad():
            out = self.model.generate(
                ids, max_new_tokens=max_new_tokens, do_sample=False,
                pad_token_id=self.tokenizer.pad_token_id
                or self.tokenizer.eos_token_id)
        return self.tokenizer.decode(out[0, ids.shape[1]:], skip_special_tokens=True)

    # -- adapters ------------------------------------------------------------
    def _inject_adapters(self, rank, alpha, dropout):
        import torch.nn as nn
        torch = self._torch

        backend = self

        class LowRankLinear(nn.Module):
            def __init__(self, base, name):
                super().__init__()
                self.base = base
                self.scaling = alpha / rank
                self.dropout = nn.Dropout(dropout)
                dtype = base.weight.dtype
                dev = base.weight.device
                self.delta_a = nn.Parameter(
                    torch.randn(rank, base.in_features, dtype=dtype, device=dev) * 0.01)
                self.delta_b = nn.Parameter(
                    torch.zeros(base.out_features, rank, dtype=dtype, device=dev))
                backend._adapters[name] = self

            def forward(self, x):
                delta = self.dropout(x) @ self.delta_a.T @ self.delta_b.T
                return self.base(x) + self.scaling * delta

        replaced = 0
        for name, module in list(self.model.named_modules()):
            leaf = name.rsplit(".", 1)[-1]
            if leaf in self.target_modules and isinstance(module, nn.Linear):
                parent = self.model.get_submodule(name.rsplit(".", 1)[0]) \
                    if "." in name else self.model
                setattr(parent, leaf, LowRankLinear(module, name))
                replaced += 1
        if replaced == 0:
            raise CapabilityError(
                f"no {self.target_modules} linear modules found in {self.model_name}")

    def _adapter_parameters(self):
        for module in self._adapters.values():
            yield module.delta_a
            yield module.delta_b

    def configure_training(self, config):
        if not self._adapters:
            self._inject_adapters(config.adapter_rank, config.adapter_alpha,
                                  config.adapter_dropout)
        self._base_hash = self.base_weights_hash()
        self.optimizer = self._torch.optim.AdamW(
            list(self._adapter_parameters()), lr=config.learning_rate,
            weight_decay=config.weight_decay)

    def forward_option_logits(self, prompt_text, option_token_ids):
        if not self._adapters:
            raise CapabilityError("configure_training was not called")
        self.model.train()
        logits = self.model(self._encode(prompt_text)).logits[0, -1]
        option_logits = logits[list(option_token_ids)]
        self.model.eval()
        return option_logits.detach().float().cpu().numpy(), option_logits

    def backward(self, handle, grad_wrt_option_logits):
        torch = self._torch
        grad = torch.as_tensor(grad_wrt_option_logits, dtype=handle.dtype,
                               device=handle.device)
        handle.backward(gradient=grad)

    def optimizer_step(self):
        self.optimizer.step()
        self.optimizer.zero_grad()

    def zero_gradients(self):
        if self.optimizer is not None:
            self.optimizer.zero_grad()

    # -- checkpointing ---------------------------------------------------------
    def _adapter_state(self):
        return {f"{name}.{kind}": getattr(module, kind).detach().clone()
                for name, module in self._adapters.items()
                for kind in ("delta_a", "delta_b")}

    def export_parameters(self):
        return self._adapter_state()

    def load_parameters(self, state):
        torch = self._torch
        with torch.no_grad():
            for name, module in self._adapters.items():
                for kind in ("delta_a", "delta_b"):
                    getattr(module, kind).copy_(state[f"{name}.{kind}"])

    def save_adapter(self, path):
        path = Path(path)
        if path.suffix != ".pt":
            path = path.with_suffix(".pt")
        path.parent.mkdir(parents=True, exist_ok=True)
        any_adapter = next(iter(self._adapters.values()))
        payload = {
            "state": self._adapter_state(),
            "rank": any_adapter.delta_a.shape[0],
            "alpha": any_adapter.scaling * any_adapter.delta_a.shape[0],
            "target_modules": list(self.target_modules),
        }
        self._torch.save(payload, path)
        return path

    def load_adapter(self, path):
        payload = self._torch.load(path, map_location=self.device)
        if not self._adapters:
            self.target_modules = tuple(payload["target_modules"])
            self._inject_adapters(rank=payload["rank"], alpha=payload["alpha"],
                                  dropout=0.0)
        self.load_parameters(payload["state"])

    def base_weights_hash(self):
        h = hashlib.sha256()
        for name, param in sorted(self.model.named_parameters()):
            if "delta_a" in name or "delta_b" in name:
                continue
            h.update(name.encode())
            h.update(param.detach().float().cpu().numpy().tobytes())
        return h.hexdigest()

    def parameters_hash(self):
        h = hashlib.sha256()
        for key, value in sorted(self._adapter_state().items()):
            h.update(key.encode())
            h.update(value.float().cpu().numpy().tobytes())
        return h.hexdigest()
