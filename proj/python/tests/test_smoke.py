import json
import math

import pytest

import markov_mt as mm


def test_window_and_validation():
    c = mm.tiny_config("MAT", order=3)
    assert c.window_at(0) == 1
    assert c.window_at(10) == 3
    assert c.validate() == []
    c.heads = 3
    assert any("divisible" in e for e in c.validate())
    with pytest.raises(mm.ConfigError):
        mm.Model(c)
    with pytest.raises(mm.ConfigError):
        c.variant = "RNN"


def test_incremental_matches_parallel():
    m = mm.Model(mm.tiny_config("MAT", order=2, seed=3))
    src = [4, 5, 6, 7]
    tgt = [mm.BOS, 8, 9, 4, 10, 5]
    assert mm.incremental_logits(m, src, tgt) == mm.teacher_forced_logits(m, src, tgt)


def test_markov_audit_and_leaky_control():
    m = mm.Model(mm.tiny_config("MAT", order=2))
    r = mm.audit_leakage(m, n=10)
    assert r["markov_holds"] and r["window"] == 2 and r["rows_compared"] > 0
    leaky = mm.Model(mm.tiny_config("MAT", order=2, disable_transparency=True))
    assert not mm.audit_leakage(leaky, n=10)["markov_holds"]


def test_count_ops():
    mat = mm.count_decode_ops(mm.Model(mm.tiny_config("MAT", order=5)), 25)
    at = mm.count_decode_ops(mm.Model(mm.tiny_config("AT")), 25)
    assert (mat["self_attn_scores"], at["self_attn_scores"]) == (115, 325)
    assert mat["closed_form"] == 115


def test_decoding_and_bleu():
    m = mm.Model(mm.tiny_config("AT", seed=2))
    src = [4, 5, 6]
    greedy = mm.greedy_decode(m, src, max_len=8)
    assert mm.beam_decode(m, src, beam=1, max_len=8) == greedy
    assert len(greedy) <= 8
    ref = [["a", "b", "c", "d"]]
    assert math.isclose(mm.corpus_bleu(ref, ref), 1.0)
    assert mm.corpus_bleu([["x", "y", "z", "w"]], ref) == 0.0


def test_synthetic_periodic():
    pairs = mm.gen_synthetic("periodic_mode", 20, min_len=6, max_len=9, symbols=4, period=3, seed=5)
    assert len(pairs) == 20
    for src, tgt in pairs:
        assert tgt[0] in ("A", "B") and len(tgt) == len(src) + 1
    assert mm.mode_positions(4, 14) == [5, 9, 13]


def test_cli_train_and_load(tmp_path):
    cfg = {
        "model": {"variant": "MAT", "order": 2, "enc_layers": 1, "dec_layers": 1, "heads": 2, "d_model": 8,
                  "d_ff": 16, "max_len": 16, "dropout": 0.0},
        "training": {"steps": 2, "batch_tokens": 128, "log_every": 1, "warmup": 2},
        "data": {"synthetic": {"task": "copy", "n_pairs": 30, "min_len": 2, "max_len": 4, "symbols": 4}},
        "seed": 2,
    }
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    code, out, err = mm.run_cli(["train", "-c", str(path), "--runs-dir", str(tmp_path / "runs"), "-q"])
    assert code == 0, err
    run_dir = out.splitlines()[0]
    model = mm.load_checkpoint(run_dir + "/checkpoint.bin")
    assert model.config.order == 2
    assert model.parameter_count > 0
    with pytest.raises(mm.FormatError):
        mm.load_checkpoint(str(path))
