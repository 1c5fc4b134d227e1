import numpy as np
import pytest

from src import autodiff as ad
from src.autodiff import Tensor
from src.encoder import (
    AdapterTarget,
    EmbedderParams,
    LoraAdapter,
    ModalityEncoder,
    PretrainedEncoder,
    Slot,
    SpecialTokens,
    assemble,
    embed,
    encode,
    extract,
    init_adapters,
    init_cmpt,
    init_embedder,
    init_encoder_base,
    lora_apply,
)
from src.errors import ShapeError


@pytest.fixture
def rng():
    return np.random.default_rng(0)


class TestEmbed:
    def test_token_count(self, rng):
        params = init_embedder(2, 4, 8, rng)
        assert embed(np.arange(8.0), params).shape == (4, 4)

    def test_zero_input_zero_positionals(self):
        params = EmbedderParams(2, Tensor(np.ones((2, 3))), Tensor.zeros(4, 3))
        np.testing.assert_array_equal(embed(np.zeros(8), params).data, np.zeros((4, 3)))

    def test_deterministic(self, rng):
        params = init_embedder(2, 4, 8, rng)
        raw = rng.normal(size=8)
        assert np.array_equal(embed(raw, params).data, embed(raw, params).data)

    def test_length_not_divisible(self, rng):
        with pytest.raises(ShapeError):
            embed(np.zeros(7), init_embedder(2, 4, 8, rng))

    def test_too_many_tokens(self, rng):
        with pytest.raises(ShapeError):
            embed(np.zeros(8), init_embedder(2, 4, 3, rng))


class TestAssemble:
    def test_slot_layout(self, rng):
        specials = SpecialTokens(cls=Tensor(rng.normal(size=(1, 3))), cmpt=Tensor(rng.normal(size=(1, 3))))
        seq = assemble(Tensor(rng.normal(size=(2, 3))), specials)
        assert seq.tokens.rows == 4
        assert seq.slot_map == {0: "CMPT", 1: "CLS", 2: "content[0]", 3: "content[1]"}
        assert np.array_equal(seq.tokens.data[0], specials.cmpt.data[0])
        assert np.array_equal(seq.tokens.data[1], specials.cls.data[0])

    def test_empty_content(self, rng):
        specials = SpecialTokens(cls=Tensor(rng.normal(size=(1, 3))), cmpt=Tensor(rng.normal(size=(1, 3))))
        seq = assemble(Tensor(np.zeros((0, 3))), specials)
        assert seq.tokens.shape == (2, 3)

    def test_column_mismatch(self, rng):
        specials = SpecialTokens(cls=Tensor(np.zeros((1, 3))))
        with pytest.raises(ShapeError):
            assemble(Tensor(np.zeros((2, 4))), specials)

    def test_packed_sequences_repeat_special_rows(self, rng):
        specials = SpecialTokens(cls=Tensor(np.full((1, 2), 7.0)), cmpt=Tensor(np.full((1, 2), 9.0)))
        seq = assemble(Tensor(np.arange(8.0).reshape(4, 2)), specials, n_sequences=2)
        assert seq.seq_len == 4 and seq.n_sequences == 2
        np.testing.assert_array_equal(seq.tokens.data[4], [9.0, 9.0])
        np.testing.assert_array_equal(seq.tokens.data[6], [4.0, 5.0])


class TestLora:
    def test_zero_up_is_exact_identity(self, rng):
        x = Tensor(rng.normal(size=(5, 4)))
        w = Tensor(rng.normal(size=(4, 4)))
        adapter = LoraAdapter.create(4, 1, 1.0, 0.0, "query", 0, rng)
        assert np.array_equal(lora_apply(x, w, adapter).data, ad.matmul(x, w).data)

    def test_hand_arithmetic(self):
        adapter = LoraAdapter(Tensor([[1.0], [0.0]]), Tensor([[0.0, 1.0]]), 1, 1.0, 0.0, AdapterTarget.QUERY, 0)
        out = lora_apply(Tensor([[2.0, 3.0]]), Tensor(np.eye(2)), adapter)
        np.testing.assert_array_equal(out.data, [[2.0, 5.0]])

    def test_alpha_scales_low_rank_path(self):
        x, w = Tensor([[2.0, 3.0]]), Tensor(np.eye(2))
        down, up = Tensor([[1.0], [0.0]]), Tensor([[0.0, 1.0]])
        one = lora_apply(x, w, LoraAdapter(down, up, 1, 1.0, 0.0, AdapterTarget.KEY, 0)).data - x.data
        two = lora_apply(x, w, LoraAdapter(down, up, 1, 2.0, 0.0, AdapterTarget.KEY, 0)).data - x.data
        np.testing.assert_array_equal(two, 2 * one)

    def test_rank_zero_rejected(self, rng):
        with pytest.raises(ValueError):
            LoraAdapter.create(4, 0, 1.0, 0.0, "value", 0, rng)


class TestEncode:
    def build(self, rng, with_cmpt=True):
        base = init_encoder_base(8, 2, 2, 16, rng, trainable=False)
        cls_token = Tensor(rng.normal(size=(1, 8)))
        specials = SpecialTokens(cls=cls_token, cmpt=init_cmpt(cls_token, rng) if with_cmpt else None)
        seq = assemble(Tensor(rng.normal(size=(3, 8))), specials)
        return base, seq

    def test_shape_preserved(self, rng):
        base, seq = self.build(rng)
        adapters = init_adapters(8, 2, 1, 1.0, 0.1, rng)
        assert encode(seq, base, adapters).tokens.shape == (5, 8)

    def test_zero_init_adapters_match_frozen_forward(self, rng):
        base, seq = self.build(rng)
        adapters = init_adapters(8, 2, 1, 1.0, 0.1, rng)
        assert np.array_equal(encode(seq, base, adapters).tokens.data, encode(seq, base, None).tokens.data)

    def test_eval_mode_deterministic(self, rng):
        base, seq = self.build(rng)
        adapters = init_adapters(8, 2, 1, 1.0, 0.5, rng)
        for adapter in adapters.values():
            adapter.up.data = rng.normal(size=adapter.up.shape)
        first = encode(seq, base, adapters, training=False).tokens.data
        assert np.array_equal(first, encode(seq, base, adapters, training=False).tokens.data)

    def test_missing_adapter(self, rng):
        base, seq = self.build(rng)
        adapters = init_adapters(8, 2, 1, 1.0, 0.1, rng)
        del adapters[(AdapterTarget.OUTPUT, 1)]
        with pytest.raises(ValueError, match="output@1"):
            encode(seq, base, adapters)

    def test_extract_slots(self, rng):
        base, seq = self.build(rng)
        out = encode(seq, base)
        np.testing.assert_array_equal(extract(out, Slot.CLS).data, out.tokens.data[1:2])
        np.testing.assert_array_equal(extract(out, "CMPT").data, out.tokens.data[0:1])

    def test_packed_batch_matches_single_sequences(self, rng):
        base = init_encoder_base(8, 1, 2, 16, rng, trainable=False)
        pretrained_cls = Tensor(rng.normal(size=(1, 8)))
        embedder = init_embedder(4, 8, 2, rng, trainable=False)
        encoder = ModalityEncoder(PretrainedEncoder("m1", embedder, pretrained_cls, base), cmpt=init_cmpt(pretrained_cls, rng))
        raw = rng.normal(size=(3, 8))
        packed = extract(encoder.forward(raw), Slot.CMPT).data
        for i in range(3):
            np.testing.assert_allclose(packed[i], extract(encoder.forward(raw[i]), Slot.CMPT).data[0], atol=1e-12)

    def test_large_batch_records_per_sequence_attention(self, rng):
        base = init_encoder_base(8, 1, 2, 16, rng, trainable=False)
        pretrained_cls = Tensor(rng.normal(size=(1, 8)))
        embedder = init_embedder(4, 8, 2, rng, trainable=False)
        encoder = ModalityEncoder(PretrainedEncoder("m1", embedder, pretrained_cls, base), cmpt=init_cmpt(pretrained_cls, rng))
        out = encoder.forward(rng.normal(size=(256, 8)), record_attention=True)
        assert [probs.shape for probs in out.attention] == [(256, 4, 4), (256, 4, 4)]
        np.testing.assert_allclose(out.attention[0].sum(axis=2), 1.0)

    def test_cls_attention_to_cmpt_can_be_masked(self, rng):
        base, seq = self.build(rng)
        out = encode(seq, base, record_attention=True, cls_attends_cmpt=False)
        assert all(probs[0, 1, 0] == 0.0 for probs in out.attention)
        out = encode(seq, base, record_attention=True, cls_attends_cmpt=True)
        assert all(probs[0, 1, 0] > 0.0 for probs in out.attention)


class TestModalityEncoder:
    def test_trainable_count(self, tiny_pretrained, tiny_model_config):
        rng = np.random.default_rng(0)
        pretrained = tiny_pretrained["m1"]
        adapters = init_adapters(8, 1, 2, 1.0, 0.0, rng)
        encoder = ModalityEncoder(pretrained, init_cmpt(pretrained.cls, rng), adapters)
        total = sum(t.data.size for t in encoder.trainable_tensors().values())
        assert total == 8 * 1 * 8 * 2 + 8

    def test_frozen_tensors_have_no_grad(self, tiny_pretrained):
        encoder = ModalityEncoder(tiny_pretrained["m2"].freeze())
        assert all(not t.requires_grad for t in encoder.frozen_tensors().values())
