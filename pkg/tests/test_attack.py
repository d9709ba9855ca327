import numpy as np
import pytest

from babn.attack import AttackSpec, toy_attack
from babn.attention import AttentionConfig, AttentionModel
from babn.randvar import RngStream
from babn.tasks import TaskSpec, generate


@pytest.fixture(scope="module")
def setup():
    spec = TaskSpec(kind="clusters", vocab_size=8, seq_len=5, n_train=10, n_val=10, n_test=40, seed=2)
    data = generate(spec)["test_id"]
    cfg = AttentionConfig(d_model=8, n_heads=2, n_layers=1, ffn_hidden=8, vocab_size=8, max_seq_len=5,
                          n_classes=2, pooling="mean")
    return AttentionModel(cfg, rng=RngStream(0)), data


class TestToyAttack:
    def test_zero_budget_always_fails(self, setup):
        model, data = setup
        res = toy_attack(model, data, AttackSpec(budget=0))
        assert res["rate"] == 1.0
        assert res["attempts"] > 0

    def test_constant_model_cannot_be_flipped(self, setup):
        model, data = setup
        params = {k: v.data.copy() for k, v in model.params.items()}
        params["head.w"][:] = 0.0
        params["head.b"][:] = [1.0, 0.0]
        const = AttentionModel(model.config, params=params)
        res = toy_attack(const, data, AttackSpec(budget=3))
        assert res["rate"] == 1.0

    def test_deterministic_and_budget_respected(self, setup):
        model, data = setup
        a = toy_attack(model, data, AttackSpec(budget=2, seed=1))
        b = toy_attack(model, data, AttackSpec(budget=2, seed=1))
        assert a == b
        assert max(a["changes"]) <= 2
        assert 0.0 <= a["rate"] <= 1.0

    def test_larger_budget_never_helps_defender(self, setup):
        model, data = setup
        r1 = toy_attack(model, data, AttackSpec(budget=1, seed=3))["rate"]
        r3 = toy_attack(model, data, AttackSpec(budget=3, seed=3))["rate"]
        assert r3 <= r1

    def test_rejects_tagging_data(self, setup):
        model, _ = setup
        copy = generate(TaskSpec(kind="copy", n_train=5, n_val=5, n_test=5, seq_len=5, vocab_size=8))["test"]
        with pytest.raises(ValueError):
            toy_attack(model, copy, AttackSpec())

    def test_bad_spec(self):
        with pytest.raises(ValueError):
            AttackSpec(budget=-1)
