import math
import os

import pytest

import scmoe

DATA_DIR = os.path.join(os.path.dirname(__file__), "..", "..", "data")


def small_config():
    cfg = scmoe.ModelConfig()
    cfg.n_layers = 2
    cfg.d_model = 32
    cfg.n_heads = 4
    cfg.n_experts = 8
    cfg.d_ff = 48
    cfg.max_seq_len = 256
    return cfg


@pytest.fixture(scope="module")
def model():
    return scmoe.Model.random(small_config(), seed=7)


def test_softmax_and_divergences():
    p = scmoe.softmax([math.log(2.0), 0.0])
    assert p == pytest.approx([2 / 3, 1 / 3], abs=1e-15)
    assert scmoe.kl_divergence([1.0, 0.0], [0.5, 0.5]) == pytest.approx(0.693147180559945309, abs=1e-15)
    assert scmoe.js_divergence([1.0, 0.0], [0.5, 0.5]) == pytest.approx(0.215761554338835654, abs=1e-15)


def test_select_experts_top2():
    idx, w = scmoe.select_experts([0.5, 0.3, 0.2], "top:2")
    assert idx == [0, 1]
    assert w == pytest.approx([0.625, 0.375], abs=1e-15)


def test_contrast_masks_implausible_tokens():
    z = scmoe.contrast_logits([5.0, 3.0, -10.0], [2.5, 1.5, 0.0], beta=1.0, alpha=0.1)
    assert z[0] == pytest.approx(7.5)
    assert z[1] == pytest.approx(4.5)
    assert z[2] is None
    assert scmoe.plausibility_mask([5.0, 3.0, -10.0], 0.1) == [0, 1]


def test_tokenizer_round_trip():
    ids = scmoe.encode("2+2=4")
    assert ids[0] == scmoe.BOS
    assert scmoe.decode(ids[1:]) == b"2+2=4"


def test_checkpoint_round_trip(model, tmp_path):
    path = str(tmp_path / "m.scmx")
    model.save(path)
    loaded = scmoe.Model.load(path)
    assert loaded.config == model.config
    assert loaded.to_bytes() == model.to_bytes()


def test_truncated_checkpoint_raises(model):
    data = model.to_bytes()
    with pytest.raises(scmoe.ScmoeError) as info:
        scmoe.Model.from_bytes(data[: len(data) // 2])
    assert info.value.code == "truncated payload"


def test_generate_is_deterministic(model):
    a = scmoe.generate(model, "Question: 1+1?\nAnswer:", "scmoe:top:2/rank:2/0.5", max_new_tokens=8, seed=3)
    b = scmoe.generate(model, "Question: 1+1?\nAnswer:", "scmoe:top:2/rank:2/0.5", max_new_tokens=8, seed=3)
    assert a["tokens"] == b["tokens"]
    assert 1 <= len(a["tokens"]) <= 8
    assert all(n >= 1 for n in a["n_valid"])


def test_scmoe_beta_zero_matches_greedy(model):
    prompt = "Answer: 12"
    g = scmoe.generate(model, prompt, "greedy", max_new_tokens=6, ignore_stop=True)
    s = scmoe.generate(model, prompt, "scmoe:top:2/rank:2/0", max_new_tokens=6, ignore_stop=True)
    assert g["tokens"] == s["tokens"]


def test_logits_shape(model):
    rows = model.logits("abc")
    assert len(rows) == 4
    assert all(len(r) == model.config.vocab_size for r in rows)


def test_kld_heatmap_shape(model):
    hm = scmoe.kld_heatmap(model, "Q:", " 3+4=7", strong="top:2", weak=["rank:1", "rank:2"])
    assert len(hm["tokens"]) == len(" 3+4=7")
    assert len(hm["columns"]) == 2
    assert all(v >= 0.0 for row in hm["kld"] for v in row)


def test_utilization_ratio_bounds(model):
    r = scmoe.expert_utilization(model, "The answer is 7.", weak="rank:2")
    assert 0.0 <= r["ratio"] <= 1.0
    assert r["total_slots"] > 0


def test_vote_and_extraction():
    assert scmoe.extract_numeric_answer("so 1,234.") == "1234"
    assert scmoe.majority_vote(["3", None, "4", "3"]) == ("3", 2)
    with pytest.raises(scmoe.ScmoeError):
        scmoe.majority_vote([None, None])


def test_cli_usage_and_mkmodel(tmp_path):
    code, _, err = scmoe.run_cli([])
    assert code == 2
    cfg = os.path.join(DATA_DIR, "desk_config.json")
    out = str(tmp_path / "desk.scmx")
    code, _, err = scmoe.run_cli(["mkmodel", "--config", cfg, "--seed", "1", "--out", out])
    assert code == 0, err
    assert os.path.getsize(out) > 0
