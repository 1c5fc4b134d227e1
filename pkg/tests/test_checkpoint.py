import numpy as np
import pytest

from src.checkpoint import (
    CHECKPOINT_VERSION,
    checkpoint_tags,
    load_checkpoint,
    load_pretrained,
    probe_equal,
    save_checkpoint,
    save_pretrained,
)
from src.errors import CheckpointError, DataError
from src.model import CMPTModel
from src.tensor_io import read_bundle, write_bundle
from src.training import TrainConfig, train_cmpt


@pytest.fixture
def trained_model(tiny_cmpt_model, tiny_splits):
    config = TrainConfig(lr=1e-2, epochs=1, warmup_epochs=0, batch_size=8, seed=2)
    return train_cmpt(tiny_cmpt_model, tiny_splits["train"], config).model


class TestBundle:
    def test_round_trip_is_bitwise(self, tmp_path):
        arrays = {"a": np.array([[0.1, -2.5e-300]]), "b": np.arange(6.0).reshape(2, 3)}
        write_bundle(tmp_path / "t.bin", arrays, {"kind": "test"}, tags={"a": "frozen"})
        tensors, tags, meta = read_bundle(tmp_path / "t.bin")
        assert all(np.array_equal(tensors[k], v) for k, v in arrays.items())
        assert tags == {"a": "frozen", "b": "data"}
        assert meta == {"kind": "test"}

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "t.bin"
        write_bundle(path, {"a": np.ones((4, 4))}, {})
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(CheckpointError, match="truncated"):
            read_bundle(path)

    def test_wrong_format(self, tmp_path):
        path = tmp_path / "t.bin"
        path.write_bytes(b'{"format": "other/9"}\n')
        with pytest.raises(CheckpointError):
            read_bundle(path)

    def test_missing_file_is_a_data_error(self, tmp_path):
        with pytest.raises(DataError):
            read_bundle(tmp_path / "nothing.bin")


class TestPretrained:
    def test_round_trip(self, tmp_path, tiny_pretrained):
        encoder = tiny_pretrained["m1"]
        save_pretrained(encoder, tmp_path / "pretrained_m1.cmpt", seed=4)
        loaded = load_pretrained(tmp_path / "pretrained_m1.cmpt")
        assert loaded.modality == "m1"
        for name, tensor in encoder.tensors().items():
            assert np.array_equal(loaded.tensors()[name].data, tensor.data)
            assert not loaded.tensors()[name].requires_grad

    def test_kind_checked(self, tmp_path, trained_model):
        save_checkpoint(trained_model, tmp_path / "model.cmpt")
        with pytest.raises(CheckpointError, match="pretrained_encoder"):
            load_pretrained(tmp_path / "model.cmpt")


class TestModelCheckpoint:
    def test_round_trip_preserves_every_tensor(self, tmp_path, trained_model):
        path = tmp_path / "model.cmpt"
        save_checkpoint(trained_model, path, seed=2, epoch=0)
        loaded = load_checkpoint(path)
        assert loaded.checksums() == trained_model.checksums()
        assert loaded.mode is trained_model.mode
        assert loaded.count_trainable() == trained_model.count_trainable()

    def test_round_trip_predictions_are_bitwise_equal(self, tmp_path, trained_model, tiny_splits):
        path = tmp_path / "model.cmpt"
        save_checkpoint(trained_model, path)
        assert probe_equal(trained_model, load_checkpoint(path), tiny_splits["test"])

    def test_tags(self, tmp_path, trained_model):
        path = tmp_path / "model.cmpt"
        save_checkpoint(trained_model, path)
        tags = checkpoint_tags(path)
        assert tags["m1.cls"] == "frozen"
        assert tags["m2.base.layers.0.w_q"] == "frozen"
        assert tags["m1.cmpt"] == "trainable"
        assert tags["head.weight"] == "trainable"
        assert tags["m2.lora.0.value.up"] == "trainable"

    def test_loaded_trainables_require_grad(self, tmp_path, trained_model):
        path = tmp_path / "model.cmpt"
        save_checkpoint(trained_model, path)
        loaded = load_checkpoint(path)
        assert all(t.requires_grad for t in loaded.trainable_tensors().values())
        assert all(not t.requires_grad for t in loaded.frozen_tensors().values())

    def test_baseline_round_trip(self, tmp_path, tiny_pretrained, tiny_model_config, tiny_splits):
        model = CMPTModel.from_pretrained(tiny_pretrained, tiny_model_config, "baseline", 4)
        save_checkpoint(model, tmp_path / "baseline.cmpt")
        assert probe_equal(model, load_checkpoint(tmp_path / "baseline.cmpt"), tiny_splits["test"])

    def test_truncated(self, tmp_path, trained_model):
        path = tmp_path / "model.cmpt"
        save_checkpoint(trained_model, path)
        path.write_bytes(path.read_bytes()[:-100])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_version_mismatch(self, tmp_path, trained_model):
        path = tmp_path / "model.cmpt"
        save_checkpoint(trained_model, path)
        tensors, tags, meta = read_bundle(path)
        meta["version"] = CHECKPOINT_VERSION + 1
        write_bundle(path, tensors, meta, tags)
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(path)

    def test_missing_tensor(self, tmp_path, trained_model):
        path = tmp_path / "model.cmpt"
        save_checkpoint(trained_model, path)
        tensors, tags, meta = read_bundle(path)
        del tensors["head.bias"]
        write_bundle(path, tensors, meta, tags)
        with pytest.raises(CheckpointError, match="head.bias"):
            load_checkpoint(path)

    def test_tampered_tag(self, tmp_path, trained_model):
        path = tmp_path / "model.cmpt"
        save_checkpoint(trained_model, path)
        tensors, tags, meta = read_bundle(path)
        tags["m1.cls"] = "trainable"
        write_bundle(path, tensors, meta, tags)
        with pytest.raises(CheckpointError, match="tags"):
            load_checkpoint(path)
