import json

import numpy as np
import pytest

from babn.attention import AttentionConfig, AttentionModel, base_param_shapes
from babn.belief import BabnModel
from babn.checkpoint import (Checkpoint, CheckpointError, checkpoint_from_model, convert_checkpoint,
                             model_from_checkpoint)
from babn.randvar import RngStream


def det_ckpt(cfg, seed=0):
    return checkpoint_from_model(AttentionModel(cfg, rng=RngStream(seed)))


class TestConvert:
    def test_shared_tensors_copied(self, toy_config):
        det = det_ckpt(toy_config)
        babn = convert_checkpoint(det, RngStream(1))
        for name, v in det.tensors.items():
            np.testing.assert_array_equal(babn.tensors[name], v)
        assert babn.format == "babn-ckpt"
        assert babn.constants.rho == 1.5 and babn.constants.sigma == 1e-6

    def test_near_recovery_after_conversion(self, toy_config):
        det = det_ckpt(toy_config)
        x = RngStream(3).integers(0, toy_config.vocab_size, (100, 4))
        base = model_from_checkpoint(det).forward(x).data
        for rho in (1.5, 0.0):
            babn = model_from_checkpoint(convert_checkpoint(det, RngStream(1), rho=rho, sigma=0.0))
            assert np.max(np.abs(babn.forward(x).logits.data - base)) < 0.15

    def test_zero_checkpoint_converts(self, toy_config):
        zeros = {k: np.zeros(s) for k, s in base_param_shapes(toy_config).items()}
        det = Checkpoint("det-attn", toy_config, zeros).validate()
        assert convert_checkpoint(det, RngStream(0)).validate().format == "babn-ckpt"

    def test_only_det_checkpoints(self, toy_config):
        babn = convert_checkpoint(det_ckpt(toy_config), RngStream(0))
        with pytest.raises(CheckpointError):
            convert_checkpoint(babn, RngStream(0))


class TestRoundTrip:
    def test_save_load_bit_exact(self, toy_config, tmp_path):
        ckpt = convert_checkpoint(det_ckpt(toy_config), RngStream(1), rho=1.5, sigma=1e-6, beta=0.7)
        ckpt.tensors["head.b"][0] = 0.1 + 0.2  # not exactly representable in short decimal
        ckpt.save(tmp_path / "c.json")
        back = Checkpoint.load(tmp_path / "c.json")
        assert back.constants == ckpt.constants
        assert back.config == ckpt.config
        for name, v in ckpt.tensors.items():
            assert back.tensors[name].tobytes() == v.tobytes()

    def test_json_is_deterministic(self, toy_config):
        assert det_ckpt(toy_config).to_json() == det_ckpt(toy_config).to_json()
        json.loads(det_ckpt(toy_config).to_json())

    def test_model_types(self, toy_config):
        det = det_ckpt(toy_config)
        assert type(model_from_checkpoint(det)) is AttentionModel
        assert isinstance(model_from_checkpoint(convert_checkpoint(det, RngStream(0))), BabnModel)


class TestValidation:
    def test_missing_tensor(self, toy_config):
        ckpt = det_ckpt(toy_config)
        del ckpt.tensors["head.w"]
        with pytest.raises(CheckpointError, match="head.w"):
            ckpt.validate()

    def test_wrong_shape(self, toy_config):
        ckpt = det_ckpt(toy_config)
        ckpt.tensors["head.w"] = np.zeros((1, 1))
        with pytest.raises(CheckpointError):
            ckpt.validate()

    def test_bad_format_and_version(self, toy_config):
        ckpt = det_ckpt(toy_config)
        doc = json.loads(ckpt.to_json())
        for key, value in (("format", "other"), ("version", 2)):
            bad = dict(doc, **{key: value})
            with pytest.raises(CheckpointError):
                Checkpoint.from_json(json.dumps(bad))

    def test_nonfinite_refused(self, toy_config):
        ckpt = det_ckpt(toy_config)
        ckpt.tensors["head.b"][0] = np.nan
        with pytest.raises(CheckpointError):
            ckpt.to_json()

    def test_babn_needs_constants(self, toy_config):
        ckpt = convert_checkpoint(det_ckpt(toy_config), RngStream(0))
        ckpt.constants = None
        with pytest.raises(CheckpointError):
            ckpt.validate()
