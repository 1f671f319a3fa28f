import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fedreview.errors import ConfigError, DataError, InputError
from fedreview.lora import LoraConfig, init_adapters
from fedreview.model import (
    Batch,
    ModelGeometry,
    answer_logits,
    classify_yes_no,
    forward,
    generate,
    generate_batch,
    init_weights,
    loss_and_grads,
    sequence_loss,
    yes_no_from_logits,
)
from fedreview.numerics import Rng
from fedreview.vocab import EOS_ID, NO_ID, YES_ID

from oracles import finite_difference_errors, random_adapters, random_batch

ALL = LoraConfig(("q", "k", "v", "o"), 8)


class TestGeometry:
    def test_toy_preset_shapes(self, toy):
        assert (toy.vocab_size, toy.d_model, toy.n_layers, toy.n_heads) == (64, 32, 2, 2)
        assert toy.target_shape("q") == (32, 32) and toy.target_shape("k") == (32, 16)
        assert toy.target_shape("o") == (32, 32) and toy.max_seq == 128

    def test_accounting_preset(self):
        g = ModelGeometry.preset("llama3-8b-accounting")
        assert g.target_shape("k") == (4096, 1024) and g.n_layers == 32
        assert g.total_base_params == 8_030_000_000

    def test_invalid_geometry(self):
        with pytest.raises(ConfigError):
            ModelGeometry(64, 32, 2, 3, 32, 16, 64, 128)
        with pytest.raises(ConfigError):
            ModelGeometry(64, 32, 2, 2, 32, 64, 64, 128)
        with pytest.raises(ConfigError):
            ModelGeometry.preset("huge")

    def test_base_param_count_matches_arrays(self, base, toy):
        assert toy.count_base_params() == sum(a.size for a in base.arrays())


class TestInit:
    def test_deterministic(self, toy):
        assert init_weights(toy, 3).equals(init_weights(toy, 3))
        assert not init_weights(toy, 3).equals(init_weights(toy, 4))

    def test_std(self):
        g = ModelGeometry(64, 64, 1, 2, 64, 64, 64, 16)
        w = init_weights(g, 42)
        assert w.layers[0].wq.size == 4096
        assert 0.015 <= w.layers[0].wq.std() <= 0.025
        assert np.all(w.layers[0].attn_norm == 1.0)


class TestForward:
    def test_shape(self, base):
        tokens = np.arange(16).reshape(2, 8)
        assert forward(base, None, tokens).shape == (2, 8, 64)

    def test_zero_output_uniform_loss(self, base):
        w = base.copy()
        w.out[:] = 0
        batch = random_batch(64, 3, 10, 4, 0)
        assert np.allclose(forward(w, None, batch), 0)
        assert sequence_loss(w, None, batch) == pytest.approx(math.log(64), abs=1e-12)
        assert math.log(64) == pytest.approx(4.1589, abs=1e-4)

    def test_fresh_adapters_bitwise_identity(self, base, toy):
        batch = random_batch(64, 2, 9, 3, 1)
        ad = init_adapters(toy, ALL, 5)
        assert np.array_equal(forward(base, ad, batch), forward(base, None, batch))

    def test_token_out_of_range(self, base):
        with pytest.raises(InputError):
            forward(base, None, np.array([[1, 64]]))
        with pytest.raises(InputError):
            forward(base, None, np.zeros((1, 129), dtype=int))

    @given(st.integers(1, 7), st.integers(0, 63), st.integers(0, 1000))
    def test_causality(self, base, pos, new_token, seed):
        tokens = np.random.default_rng(seed).integers(0, 64, (1, 8))
        before = forward(base, None, tokens)
        tokens2 = tokens.copy()
        tokens2[0, pos] = new_token
        after = forward(base, None, tokens2)
        assert np.array_equal(before[:, :pos], after[:, :pos])

    def test_adapter_equals_explicit_weight_update(self, base, toy):
        ad = random_adapters(toy, ALL, 7)
        w = base.copy()
        for (layer, t), p in ad.pairs.items():
            w.projection(layer, t)[...] += (ALL.alpha / ALL.rank) * (p.A @ p.B)
        batch = random_batch(64, 2, 8, 2, 3)
        assert np.allclose(forward(base, ad, batch), forward(w, None, batch), atol=1e-12)


class TestLoss:
    def test_gradients_match_finite_differences(self, toy):
        w = init_weights(toy, 1)
        ad = random_adapters(toy, LoraConfig(("k", "o"), 2), 11)
        batch = random_batch(64, 2, 6, 2, 1)
        _, grads = loss_and_grads(w, ad, batch)
        assert finite_difference_errors(w, ad, batch, grads).max() < 1e-4

    def test_gradients_only_for_adapter_keys(self, base, toy):
        ad = random_adapters(toy, LoraConfig(("v",), 4), 2)
        _, grads = loss_and_grads(base, ad, random_batch(64, 2, 6, 2, 0))
        assert set(grads) == set(ad.pairs)
        for key, (ga, gb) in grads.items():
            assert ga.shape == ad.pairs[key].A.shape and gb.shape == ad.pairs[key].B.shape

    def test_batch_loss_is_mean_of_rows(self, base):
        pairs = [([3, 4, 5], [6, 7]), ([8, 9], [10, 11, 12, 13]), ([20], [21])]
        whole = sequence_loss(base, None, Batch.from_pairs(pairs))
        each = [sequence_loss(base, None, Batch.from_pairs([p])) for p in pairs]
        assert whole == pytest.approx(sum(each) / 3, abs=1e-12)

    def test_duplicated_rows(self, base):
        pair = ([3, 4, 5], [6, 7])
        assert sequence_loss(base, None, Batch.from_pairs([pair, pair])) == pytest.approx(
            sequence_loss(base, None, Batch.from_pairs([pair])), abs=1e-14
        )

    def test_empty_mask_rejected(self, base, toy):
        batch = Batch(np.array([[1, 2, 3]]), np.zeros((1, 3)))
        with pytest.raises(DataError, match="degenerate"):
            sequence_loss(base, None, batch)
        with pytest.raises(InputError):
            loss_and_grads(base, None, batch)

    def test_dropout_changes_loss_only_with_rng(self, base, toy):
        ad = random_adapters(toy, LoraConfig(("q",), 4, dropout=0.5), 3)
        batch = random_batch(64, 2, 6, 2, 0)
        plain = loss_and_grads(base, ad, batch)[0]
        assert plain == pytest.approx(sequence_loss(base, ad, batch), abs=1e-14)
        dropped = loss_and_grads(base, ad, batch, Rng(1))[0]
        assert dropped != plain
        assert dropped == loss_and_grads(base, ad, batch, Rng(1))[0]

    def test_from_pairs_mask(self):
        b = Batch.from_pairs([([5, 6], [7]), ([5], [8, 9])])
        assert b.tokens.tolist() == [[5, 6, 7], [5, 8, 9]]
        assert b.mask.tolist() == [[0, 0, 1], [0, 1, 1]]


class TestGenerate:
    def test_zero_new_tokens(self, base):
        assert generate(base, None, [3, 4, 5], 0) == [3, 4, 5]

    def test_rigged_projection_forces_token(self, toy):
        w = init_weights(toy, 0)
        w.out[:] = 0
        w.final_norm[:] = 1
        # every hidden state is a positive multiple of e0, so only out[0, :] matters
        w.embed[:] = 0
        w.embed[:, 0] = 1.0
        for lw in w.layers:
            for m in (lw.wq, lw.wk, lw.wv, lw.wo, lw.w_up, lw.w_down):
                m[:] = 0
        w.out[0, 9] = 1.0
        assert generate(w, None, [3, 4], 6) == [3, 4] + [9] * 6

    def test_stops_at_eos(self, toy):
        w = init_weights(toy, 0)
        w.embed[:] = 0
        w.embed[:, 0] = 1.0
        for lw in w.layers:
            for m in (lw.wq, lw.wk, lw.wv, lw.wo, lw.w_up, lw.w_down):
                m[:] = 0
        w.out[:] = 0
        w.out[0, EOS_ID] = 1.0
        assert generate(w, None, [3, 4], 6) == [3, 4]

    def test_overflow(self, base):
        with pytest.raises(InputError):
            generate(base, None, list(range(10)), 119)

    def test_batch_equals_single(self, base):
        prompts = [[3, 4, 5], [6, 7], [8, 9, 10]]
        batched = generate_batch(base, None, prompts, 5)
        assert batched == [generate(base, None, p, 5) for p in prompts]
        assert batched == generate_batch(base, None, prompts, 5)


class TestYesNo:
    def test_rule(self):
        logits = np.zeros(64)
        logits[YES_ID], logits[NO_ID] = 2.0, 1.0
        assert yes_no_from_logits(logits) == "yes"
        logits[NO_ID] = 2.0
        assert yes_no_from_logits(logits) == "no"

    def test_answer_logits_match_forward(self, base):
        prompts = [[3, 4, 5], [6, 7]]
        out = answer_logits(base, None, prompts)
        assert np.array_equal(out[1], forward(base, None, np.array([[6, 7]]))[0, -1])
        assert classify_yes_no(base, None, prompts[0]) == yes_no_from_logits(out[0])

    def test_random_weights_predict_both_labels(self, corpora, vocab):
        from fedreview.data import format_prompt

        w = init_weights(ModelGeometry.preset("toy"), 42)
        prompts = [format_prompt("T1", r, vocab)[0] for r in corpora.test["T1"].records]
        labels = {yes_no_from_logits(row) for row in answer_logits(w, None, prompts)}
        assert labels == {"yes", "no"}
