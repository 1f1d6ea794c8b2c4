from __future__ import annotations

import json
import math

import numpy as np
import pytest

from driftlm.backbone import CorruptionKind, ModelConfig, init_params
from driftlm.corpus import banded_source, load_source, save_source
from driftlm.evalcli import (
    AblationRow,
    ablate,
    apply_axis,
    cli,
    entropy_metric,
    evaluate,
    run_verification,
    train_config_from_dict,
    train_config_to_dict,
)
from driftlm.drift import DriftConfig
from driftlm.encoder import LiftKind
from driftlm.numcore import InvalidInputError
from driftlm.objectives import ObjectiveKind, ObjectiveVariant
from driftlm.trainer import TrainConfig, checkpoint_of, init_state, save_checkpoint

TINY_MODEL = ModelConfig(vocab_size=8, length=6, embed_dim=8, hidden_dim=12)


def tiny_train_config(**overrides) -> TrainConfig:
    defaults = dict(
        batch_size=4,
        micro_batch=2,
        steps=2,
        model=TINY_MODEL,
        queue_capacity=8,
        eval_every=2,
        eval_samples=6,
        eval_nfes=(2, 3),
        objective=ObjectiveKind(),
    )
    defaults.update(overrides)
    return TrainConfig(**defaults)


# ---------------------------------------------------------------------------
# entropy metric


def test_entropy_constant_sequences_zero():
    assert entropy_metric([np.zeros(10, dtype=int), np.full(10, 3)]) == 0.0


def test_entropy_permutation_sequences():
    length = 16
    seqs = [np.random.default_rng(s).permutation(length) for s in range(4)]
    assert abs(entropy_metric(seqs) - math.log(length)) < 1e-12


def test_entropy_invariant_under_reordering(rng):
    seq = rng.integers(0, 12, size=20)
    shuffled = rng.permutation(seq)
    assert entropy_metric([seq]) == pytest.approx(entropy_metric([shuffled]), abs=1e-14)


def test_entropy_empty_rejected():
    with pytest.raises(InvalidInputError):
        entropy_metric([])


# ---------------------------------------------------------------------------
# evaluate


def test_zero_logit_model_matches_uniform_cross_entropy():
    source = banded_source()
    params = init_params(ModelConfig(), np.random.default_rng(0), init_std=0.0)
    params.out_proj[:] = 0.0
    report = evaluate(params, source, CorruptionKind.MASKED, nfes=(4,), n_samples=256, seed=0)
    # analytic: uniform samples scored against the source, zero factors floored
    k = source.vocab_size
    floor = math.log(1e-12)
    log_t = np.where(source.transition > 0, np.log(np.maximum(source.transition, 1e-300)), floor)
    expected = -(
        float(np.log(source.initial).mean())
        + 15.0 * float(log_t.mean())
    ) / 16.0
    assert abs(math.log(report.per_nfe[0].gen_ppl) - expected) < 0.5


def test_uniform_source_scores_exactly_vocab_size(small_params):
    k = 6
    source = banded_source(vocab_size=k, band=(1.0,))
    uniform = source.__class__(k, np.full(k, 1 / k), np.full((k, k), 1 / k))
    params = init_params(ModelConfig(vocab_size=7, length=6, embed_dim=8, hidden_dim=12), np.random.default_rng(1))
    report = evaluate(params, uniform, CorruptionKind.UNIFORM, nfes=(2,), n_samples=16, seed=3)
    assert report.per_nfe[0].gen_ppl == pytest.approx(6.0, rel=1e-12)


def test_evaluate_deterministic(small_params):
    source = banded_source(vocab_size=6, band=(0.6, 0.4))
    a = evaluate(small_params, source, CorruptionKind.MASKED, nfes=(2, 4), n_samples=12, seed=9)
    b = evaluate(small_params, source, CorruptionKind.MASKED, nfes=(2, 4), n_samples=12, seed=9)
    assert a == b


def test_report_dict_shape(small_params):
    source = banded_source(vocab_size=6, band=(0.6, 0.4))
    report = evaluate(small_params, source, CorruptionKind.MASKED, nfes=(2,), n_samples=4, seed=1)
    doc = report.to_dict()
    assert set(doc) == {"per_nfe", "n_samples", "seed"}
    assert doc["per_nfe"][0]["nfe"] == 2
    assert doc["per_nfe"][0]["gen_ppl"] >= 1.0


# ---------------------------------------------------------------------------
# ablation harness


def test_apply_axis_variants():
    cfg = tiny_train_config()
    assert apply_axis(cfg, "lift", "hard-st").objective.lift == LiftKind.HARD_ST
    assert apply_axis(cfg, "objective", "mirror-kl").objective.variant == ObjectiveVariant.MIRROR_KL
    assert apply_axis(cfg, "objective", "feature-l2+base").objective.with_base_loss
    assert apply_axis(cfg, "queue_size", "4").queue_capacity == 4
    ratio = apply_axis(cfg, "att_rep_ratio", "0:1")
    assert ratio.drift.w_plus == 0.0 and ratio.drift.w_minus == 1.0
    temps = apply_axis(cfg, "temperature_set", "0.05/0.2")
    assert temps.drift.temperatures == (0.05, 0.2)
    with pytest.raises(InvalidInputError):
        apply_axis(cfg, "nope", 1)


def test_ablate_table_shape_and_zero_sd_single_seed():
    source = banded_source(vocab_size=TINY_MODEL.clean_vocab)
    cfg = tiny_train_config()
    base_state = init_state(tiny_train_config(objective=None))
    rows = ablate(
        "queue_size", ["4", "8"], cfg, source, checkpoint_of(base_state), seeds=(0,)
    )
    assert len(rows) == 2 * len(cfg.eval_nfes)
    assert all(isinstance(r, AblationRow) for r in rows)
    assert all(r.gen_ppl_sd == 0.0 and r.entropy_sd == 0.0 for r in rows)
    values = {(r.value, r.nfe) for r in rows}
    assert values == {("4", 2), ("4", 3), ("8", 2), ("8", 3)}


# ---------------------------------------------------------------------------
# config serialization


def test_train_config_dict_roundtrip():
    cfg = tiny_train_config(
        objective=ObjectiveKind(
            variant=ObjectiveVariant.MIRROR_KL, with_base_loss=True, lift=LiftKind.HARD_ST, eta=0.5
        ),
        drift=DriftConfig(temperatures=(0.1, 0.4), w_plus=2.0, renormalize_sides=False),
        corruption=CorruptionKind.UNIFORM,
    )
    rebuilt = train_config_from_dict(json.loads(json.dumps(train_config_to_dict(cfg))))
    assert rebuilt == cfg


def test_train_config_rejects_unknown_keys():
    doc = train_config_to_dict(tiny_train_config())
    doc["mystery"] = 1
    with pytest.raises(InvalidInputError):
        train_config_from_dict(doc)


# ---------------------------------------------------------------------------
# CLI


@pytest.fixture
def cli_env(tmp_path):
    source_path = tmp_path / "source.txt"
    save_source(banded_source(vocab_size=TINY_MODEL.clean_vocab), source_path)
    config_path = tmp_path / "config.json"
    config_path.write_text(
        json.dumps(train_config_to_dict(tiny_train_config())), encoding="utf-8"
    )
    ckpt_path = tmp_path / "init.json"
    save_checkpoint(init_state(tiny_train_config(objective=None)), ckpt_path)
    return tmp_path, source_path, config_path, ckpt_path


def test_cli_make_source_roundtrip(tmp_path, capsys):
    out = tmp_path / "src.txt"
    assert cli(["make-source", "--out", str(out), "--vocab-size", "9"]) == 0
    src = load_source(out)
    assert src.vocab_size == 9


def test_cli_unknown_flag_exits_2(capsys):
    assert cli(["eval", "--nonsense"]) == 2


def test_cli_unknown_command_exits_2(capsys):
    assert cli(["frobnicate"]) == 2


def test_cli_drift_train_requires_init(cli_env, capsys):
    tmp_path, source_path, config_path, _ = cli_env
    code = cli(
        [
            "drift-train",
            "--source",
            str(source_path),
            "--out",
            str(tmp_path / "run"),
            "--config",
            str(config_path),
        ]
    )
    assert code == 2


def test_cli_base_then_drift_then_eval(cli_env, capsys):
    tmp_path, source_path, config_path, ckpt_path = cli_env
    base_out = tmp_path / "base"
    code = cli(
        [
            "base-train",
            "--source",
            str(source_path),
            "--out",
            str(base_out),
            "--config",
            str(config_path),
            "--steps",
            "2",
        ]
    )
    assert code == 0
    assert (base_out / "manifest.json").exists()
    assert (base_out / "metrics.csv").exists()
    assert (base_out / "checkpoint.json").exists()
    manifest = json.loads((base_out / "manifest.json").read_text())
    assert manifest["command"] == "base-train"
    assert manifest["config"]["objective"] is None

    drift_out = tmp_path / "drift"
    code = cli(
        [
            "drift-train",
            "--source",
            str(source_path),
            "--out",
            str(drift_out),
            "--config",
            str(config_path),
            "--init",
            str(base_out / "checkpoint.json"),
            "--steps",
            "2",
            "--lift",
            "hard-st",
        ]
    )
    assert code == 0
    manifest = json.loads((drift_out / "manifest.json").read_text())
    assert manifest["config"]["objective"]["lift"] == "hard-st"

    eval_out = tmp_path / "eval"
    code = cli(
        [
            "eval",
            "--init",
            str(drift_out / "checkpoint.json"),
            "--source",
            str(source_path),
            "--out",
            str(eval_out),
            "--nfe",
            "2,3",
            "--samples",
            "8",
            "--seed",
            "5",
        ]
    )
    assert code == 0
    report = json.loads((eval_out / "report.json").read_text())
    assert [m["nfe"] for m in report["per_nfe"]] == [2, 3]
    assert report["seed"] == 5


def test_cli_sample_writes_jsonl(cli_env, capsys):
    tmp_path, source_path, config_path, ckpt_path = cli_env
    out = tmp_path / "samples"
    code = cli(
        [
            "sample",
            "--init",
            str(ckpt_path),
            "--out",
            str(out),
            "--nfe",
            "3",
            "--samples",
            "5",
        ]
    )
    assert code == 0
    lines = (out / "samples.jsonl").read_text().strip().split("\n")
    assert len(lines) == 5
    seq = json.loads(lines[0])
    assert len(seq) == TINY_MODEL.length
    assert all(0 <= t < TINY_MODEL.clean_vocab for t in seq)


def test_cli_eval_byte_identical_reruns(cli_env, capsys):
    tmp_path, source_path, config_path, ckpt_path = cli_env
    outputs = []
    for name in ("a", "b"):
        out = tmp_path / name
        code = cli(
            [
                "eval",
                "--init",
                str(ckpt_path),
                "--source",
                str(source_path),
                "--out",
                str(out),
                "--nfe",
                "2",
                "--samples",
                "6",
                "--seed",
                "3",
            ]
        )
        assert code == 0
        outputs.append((out / "report.json").read_bytes())
    assert outputs[0] == outputs[1]


def test_cli_ablate_writes_table(cli_env, capsys):
    tmp_path, source_path, config_path, ckpt_path = cli_env
    out = tmp_path / "ablation"
    code = cli(
        [
            "ablate",
            "--source",
            str(source_path),
            "--out",
            str(out),
            "--config",
            str(config_path),
            "--init",
            str(ckpt_path),
            "--axis",
            "att_rep_ratio",
            "--grid",
            "1:1,0:1",
            "--seeds",
            "0",
            "--steps",
            "2",
        ]
    )
    assert code == 0
    lines = (out / "ablation.csv").read_text().strip().split("\n")
    assert lines[0].startswith("axis,value,nfe")
    assert len(lines) == 1 + 2 * 2  # two grid values x two NFEs


def test_verification_suite_passes():
    results = run_verification()
    failures = [(name, detail) for name, ok, detail in results if not ok]
    assert not failures, failures


def test_cli_verify_exit_zero(capsys):
    assert cli(["verify"]) == 0
    out = capsys.readouterr().out
    assert "[PASS]" in out and "checks passed" in out
