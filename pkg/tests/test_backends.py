"""Backend contracts: mock lookup, toy parameter semantics, training hooks."""

import numpy as np
import pytest

from conftest import make_entry
from surveysim.backends import (AdamW, CapabilityError, MockBackend,
                                ToyEmbeddingBackend, ToyTableBackend,
                                make_backend, parse_prompt_context)
from surveysim.prompting import build_prompt
from surveysim.training import TrainConfig, index_option_logits, softmax_normalize


def record_for(country="P", qid=1, options=("Yes", "No", "Maybe"), probs=None):
    probs = probs or tuple(1 / len(options) for _ in options)
    return build_prompt(make_entry(country=country, question_id=qid,
                                   options=options, probs=probs))


class TestMockBackend:
    def test_exact_stored_vector(self):
        record = record_for()
        stored = np.arange(26, dtype=float)
        backend = MockBackend({"logits": {record.rendered_text: stored.tolist()}})
        assert np.array_equal(backend.next_token_logits(record.rendered_text), stored)

    def test_unknown_prompt_without_default_raises(self):
        backend = MockBackend({"logits": {}})
        with pytest.raises(KeyError):
            backend.next_token_logits("never seen")

    def test_default_logits_fallback(self):
        backend = MockBackend({"logits": {}, "default_logits": [0.0] * 26})
        assert backend.next_token_logits("anything").shape == (26,)

    def test_reply_table_and_empty_generation(self):
        backend = MockBackend({"replies": {"prompt": "echo!"}})
        assert backend.generate_text("prompt", 16) == "echo!"
        assert backend.generate_text("prompt", 0) == ""

    def test_not_trainable(self):
        backend = MockBackend({})
        with pytest.raises(CapabilityError):
            backend.configure_training(TrainConfig())
        with pytest.raises(CapabilityError):
            backend.forward_option_logits("x", (0, 1))


class TestPromptParsing:
    def test_extracts_country_question_and_count(self):
        record = record_for(country="Borduria", qid=3, options=("a", "b", "c", "d"))
        country, qkey, n = parse_prompt_context(record.rendered_text)
        assert country == "Borduria"
        assert qkey.startswith("Question 3:")
        assert n == 4

    def test_rejects_foreign_text(self):
        with pytest.raises(ValueError):
            parse_prompt_context("What is the answer?")


class TestToyTableBackend:
    def test_logits_are_the_learned_row(self):
        record = record_for()
        backend = ToyTableBackend()
        ids = tuple(range(3))
        logits, handle = backend.forward_option_logits(record.rendered_text, ids)
        assert np.array_equal(logits, np.zeros(3))
        key = handle[0]
        backend.params[key][:] = [1.0, 2.0, 3.0]
        full = backend.next_token_logits(record.rendered_text)
        assert np.array_equal(full[:3], [1.0, 2.0, 3.0])
        assert np.all(full[3:] == backend.FILL)

    def test_four_option_record_gives_length_four(self):
        record = record_for(options=("a", "b", "c", "d"))
        backend = ToyTableBackend()
        logits = index_option_logits(backend, record)
        assert logits.values.shape == (4,)

    def test_unseen_pair_scores_uniform(self):
        backend = ToyTableBackend()
        record = record_for()
        probs = softmax_normalize(index_option_logits(backend, record))
        assert np.allclose(probs, 1 / 3)

    def test_restricted_probs_sum_to_one_despite_larger_vocab(self):
        backend = ToyTableBackend()
        record = record_for()
        probs = softmax_normalize(index_option_logits(backend, record))
        assert probs.sum() == pytest.approx(1.0, abs=1e-9)
        assert backend.next_token_logits(record.rendered_text).size == 26

    def test_single_step_reduces_batch_loss(self):
        from surveysim.training import loss_and_logit_grad
        record = record_for(probs=(0.7, 0.2, 0.1))
        backend = ToyTableBackend()
        backend.configure_training(TrainConfig(learning_rate=0.05))
        ids = tuple(range(3))

        def batch_loss_and_step():
            backend.zero_gradients()
            logits, handle = backend.forward_option_logits(record.rendered_text, ids)
            loss, grad = loss_and_logit_grad("KL", record.target_probs, logits)
            backend.backward(handle, grad)
            backend.optimizer_step()
            return loss

        first = batch_loss_and_step()
        second = batch_loss_and_step()
        assert second < first

    def test_zero_learning_rate_keeps_parameters(self):
        from surveysim.training import loss_and_logit_grad
        record = record_for(probs=(0.7, 0.2, 0.1))
        backend = ToyTableBackend()
        backend.configure_training(TrainConfig())
        backend.optimizer.lr = 0.0  # TrainConfig itself enforces lr > 0
        ids = tuple(range(3))
        logits, handle = backend.forward_option_logits(record.rendered_text, ids)
        before = backend.parameters_hash()
        _, grad = loss_and_logit_grad("KL", record.target_probs, logits)
        backend.backward(handle, grad)
        backend.optimizer_step()
        assert backend.parameters_hash() == before

    def test_adapter_round_trip(self, tmp_path):
        backend = ToyTableBackend()
        record = record_for()
        backend.forward_option_logits(record.rendered_text, (0, 1, 2))
        key = next(iter(backend.params))
        backend.params[key][:] = [0.5, -1.5, 2.5]
        path = backend.save_adapter(tmp_path / "adapter")
        fresh = ToyTableBackend()
        fresh.load_adapter(path)
        assert fresh.parameters_hash() == backend.parameters_hash()


class TestToyEmbeddingBackend:
    def test_untrained_model_is_uniform_everywhere(self):
        backend = ToyEmbeddingBackend()
        for country in ("P", "R"):
            record = record_for(country=country)
            probs = softmax_normalize(index_option_logits(backend, record))
            assert np.allclose(probs, 1 / 3)

    def test_unseen_country_falls_back_to_question_prior(self):
        backend = ToyEmbeddingBackend(embed_dim=4)
        record = record_for(country="Seen")
        ids = tuple(range(3))
        backend.forward_option_logits(record.rendered_text, ids)
        backend.params["bias::" + parse_prompt_context(record.rendered_text)[1]][:] = \
            [2.0, 0.0, -2.0]
        unseen = record_for(country="NeverSeen")
        probs = softmax_normalize(index_option_logits(backend, unseen))
        expected = softmax_normalize(np.array([2.0, 0.0, -2.0]))
        assert np.allclose(probs, expected)

    def test_country_embeddings_are_creation_order_independent(self):
        a = ToyEmbeddingBackend(seed=1)
        b = ToyEmbeddingBackend(seed=1)
        r1, r2 = record_for(country="P"), record_for(country="R")
        ids = tuple(range(3))
        a.forward_option_logits(r1.rendered_text, ids)
        a.forward_option_logits(r2.rendered_text, ids)
        b.forward_option_logits(r2.rendered_text, ids)
        b.forward_option_logits(r1.rendered_text, ids)
        assert np.array_equal(a.params["emb::P"], b.params["emb::P"])
        assert np.array_equal(a.params["emb::R"], b.params["emb::R"])


class TestAdamW:
    def test_matches_reference_update_on_one_step(self):
        # one AdamW step by hand: m=(1-b1)g, v=(1-b2)g^2, bias-corrected
        g = np.array([0.3, -0.8])
        p = np.array([1.0, 2.0])
        opt = AdamW(learning_rate=0.1, weight_decay=0.01)
        params, grads = {"w": p.copy()}, {"w": g.copy()}
        opt.step(params, grads)
        m_hat = g  # (1-b1)g / (1-b1)
        v_hat = g * g
        expected = p - 0.1 * (m_hat / (np.sqrt(v_hat) + 1e-8) + 0.01 * p)
        assert np.allclose(params["w"], expected)


class TestFactory:
    def test_make_backend_kinds(self):
        assert make_backend({"kind": "toy_table"}).descriptor.kind == "toy_table"
        assert make_backend({"kind": "toy_embedding", "embed_dim": 4}).embed_dim == 4
        assert make_backend({"kind": "mock", "fixture": {}}).descriptor.kind == "mock"
        with pytest.raises(ValueError):
            make_backend({"kind": "quantum"})
