import numpy as np
import pytest

from src import autodiff as ad
from src.autodiff import Tensor
from src.errors import InvalidSampleError, ShapeError
from src.fusion_head import (
    ClassifierHead,
    FusedToken,
    GateCase,
    GateOutput,
    PresenceMask,
    fuse,
    gate,
    gate_batch,
    predict,
)


@pytest.fixture
def tokens():
    rng = np.random.default_rng(0)
    return {name: Tensor(rng.normal(size=(1, 4))) for name in ("cls1", "cls2", "cmpt1", "cmpt2")}


class TestGate:
    def test_both_present(self, tokens):
        out = gate(PresenceMask(True, True), **tokens)
        assert out.case is GateCase.BOTH
        assert out.token_a is tokens["cls1"] and out.token_b is tokens["cls2"]

    def test_m1_missing(self, tokens):
        out = gate(PresenceMask(False, True), **tokens)
        assert out.case is GateCase.M1_MISSING
        assert out.token_a is tokens["cls2"] and out.token_b is tokens["cmpt2"]

    def test_m2_missing(self, tokens):
        out = gate(PresenceMask(True, False), **tokens)
        assert out.case is GateCase.M2_MISSING
        assert out.token_a is tokens["cls1"] and out.token_b is tokens["cmpt1"]

    def test_both_absent(self, tokens):
        with pytest.raises(InvalidSampleError):
            gate(PresenceMask(False, False), **tokens)

    def test_absent_modality_tokens_may_be_omitted(self, tokens):
        out = gate(PresenceMask(True, False), cls1=tokens["cls1"], cmpt1=tokens["cmpt1"])
        assert out.case is GateCase.M2_MISSING

    def test_missing_required_token(self, tokens):
        with pytest.raises(ValueError, match="cmpt2"):
            gate(PresenceMask(False, True), cls2=tokens["cls2"])


class TestFuse:
    def test_sum(self):
        fused = fuse(GateOutput(Tensor([1.0, 2.0]), Tensor([3.0, 4.0]), GateCase.BOTH))
        np.testing.assert_array_equal(fused.value.data, [[4.0, 6.0]])

    def test_zero_identity_and_commutes(self, tokens):
        x = tokens["cls1"]
        assert np.array_equal(fuse(GateOutput(x, Tensor.zeros(1, 4), GateCase.BOTH)).value.data, x.data)
        ab = fuse(GateOutput(tokens["cls1"], tokens["cls2"], GateCase.BOTH)).value.data
        ba = fuse(GateOutput(tokens["cls2"], tokens["cls1"], GateCase.BOTH)).value.data
        assert np.array_equal(ab, ba)

    def test_width_mismatch(self):
        with pytest.raises(ShapeError):
            fuse(GateOutput(Tensor([1.0, 2.0]), Tensor([1.0]), GateCase.BOTH))


class TestPredict:
    def test_zero_token_zero_logits(self):
        head = ClassifierHead(Tensor(np.ones((4, 3))), Tensor.zeros(1, 3))
        np.testing.assert_array_equal(predict(FusedToken(Tensor.zeros(1, 4)), head).data, np.zeros((1, 3)))

    def test_identity_slice_recovers_coordinates(self):
        head = ClassifierHead(Tensor(np.eye(4)[:, :2]), Tensor.zeros(1, 2))
        np.testing.assert_array_equal(predict(FusedToken(Tensor([5.0, 6.0, 7.0, 8.0])), head).data, [[5.0, 6.0]])

    def test_argmax_invariant_to_positive_scaling(self):
        rng = np.random.default_rng(1)
        head = ClassifierHead(Tensor(rng.normal(size=(4, 5))), Tensor.zeros(1, 5))
        token = Tensor(rng.normal(size=(1, 4)))
        base = np.argmax(predict(token, head).data)
        assert np.argmax(predict(ad.scale(token, 3.7), head).data) == base

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(2)
        head = ClassifierHead.create(4, 3, rng, init_std=0.5)
        token = Tensor(rng.normal(size=(1, 4)), requires_grad=True)
        params = [head.weight, head.bias, token]
        error = ad.finite_difference_check(
            lambda p: ad.cross_entropy(predict(p[2], ClassifierHead(p[0], p[1])), np.array([1])), params
        )
        assert error < 1e-4

    def test_shape_mismatch(self):
        head = ClassifierHead(Tensor(np.ones((4, 3))), Tensor.zeros(1, 3))
        with pytest.raises(ShapeError):
            predict(Tensor.zeros(1, 5), head)


class TestGateBatch:
    def test_matches_per_sample_gate(self):
        rng = np.random.default_rng(3)
        batch = {name: Tensor(rng.normal(size=(3, 4))) for name in ("cls1", "cls2", "cmpt1", "cmpt2")}
        masks = [PresenceMask(True, True), PresenceMask(False, True), PresenceMask(True, False)]
        fused = gate_batch(masks, batch["cls1"], batch["cls2"], batch["cmpt1"], batch["cmpt2"]).data
        for row, mask in enumerate(masks):
            single = {k: Tensor(v.data[row:row + 1]) for k, v in batch.items()}
            np.testing.assert_array_equal(fused[row], fuse(gate(mask, **single)).value.data[0])

    def test_cmpt_rows_unused_when_both_present(self):
        rng = np.random.default_rng(4)
        cls1, cls2 = Tensor(rng.normal(size=(2, 4))), Tensor(rng.normal(size=(2, 4)))
        masks = [PresenceMask(True, True)] * 2
        first = gate_batch(masks, cls1, cls2, Tensor(rng.normal(size=(2, 4))), Tensor(rng.normal(size=(2, 4))))
        second = gate_batch(masks, cls1, cls2, Tensor(rng.normal(size=(2, 4))), Tensor(rng.normal(size=(2, 4))))
        assert np.array_equal(first.data, second.data)

    def test_missing_proxy_tokens(self):
        cls = Tensor(np.zeros((1, 4)))
        with pytest.raises(ValueError):
            gate_batch([PresenceMask(True, False)], cls, cls)
