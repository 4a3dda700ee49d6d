"""Training wiring: variants, burn-in, loss composition, and fit artifacts."""

import json
import shutil
from pathlib import Path

import numpy as np
import pytest
import torch

from mdbank import checkpoint as ckpt
from mdbank.synthdata import load_split
from mdbank.trainer import (
    TrainConfig,
    TrainingError,
    _grl_coeff,
    fit,
    init_train_state,
    train_step,
    validate_config,
    variant_wiring,
)


@pytest.fixture(scope="module")
def samples(tiny_dataset):
    return load_split(tiny_dataset, "source"), load_split(tiny_dataset, "target")


def step_n(state, cfg, src, tgt, n):
    metrics = None
    for i in range(n):
        tgt_batch = [tgt[i % len(tgt)]] if state.wiring["l_mt"] else []
        state, metrics = train_step(state, [src[i % len(src)]], tgt_batch, cfg)
    return state, metrics


class TestWiring:
    def test_variant_map(self):
        assert variant_wiring("faster_only")["l_mt"] is False
        assert variant_wiring("faster_only")["bank"] == "none"
        assert variant_wiring("mt_ins")["bank"] == "single"
        assert variant_wiring("mdbank_h")["gate"] == "G1"
        w = variant_wiring("mdbank")
        assert w["gate"] == "G2" and w["entropy_weighting"] and w["bank"] == "per_class"

    def test_unknown_variant(self):
        with pytest.raises(ValueError, match="unknown variant"):
            variant_wiring("dann")

    def test_gate_must_match_variant(self):
        validate_config(TrainConfig(variant="mdbank", gate="G2"))
        validate_config(TrainConfig(variant="mdbank_h", gate="G1"))
        with pytest.raises(ValueError, match="wired for gate"):
            validate_config(TrainConfig(variant="mdbank_h", gate="G2"))
        with pytest.raises(ValueError, match="wired for gate"):
            validate_config(TrainConfig(variant="mdbank", gate="G1"))
        with pytest.raises(ValueError, match="does not take"):
            validate_config(TrainConfig(variant="faster_only", gate="G1"))
        with pytest.raises(ValueError, match="does not take"):
            validate_config(TrainConfig(variant="mt_ins", gate="G2"))

    @pytest.mark.parametrize(
        "bad",
        [
            {"eta": -0.1},
            {"lambda_": -1.0},
            {"gamma": 0.0},
            {"alpha": 1.0},
            {"steps": 0},
            {"k_top_target": 0},
        ],
    )
    def test_bad_numbers_rejected(self, bad):
        with pytest.raises(ValueError):
            validate_config(TrainConfig(**bad))

    def test_bank_construction_per_variant(self):
        assert init_train_state(TrainConfig(variant="faster_only"), 3).bank is None
        single = init_train_state(TrainConfig(variant="mt_ins"), 3).bank
        assert single is not None and single.num_classes == 0
        per_class = init_train_state(TrainConfig(variant="mdbank"), 3).bank
        assert per_class.num_classes == 3

    def test_teacher_starts_as_student_copy(self):
        state = init_train_state(TrainConfig(variant="mdbank", seed=3), 3)
        s = dict(state.student.named_parameters())
        for n, t in state.teacher.detector.named_parameters():
            assert torch.equal(t, s[n])

    def test_grl_coeff_schedule(self):
        const = TrainConfig(grl_coeff=0.7, grl_ramp=False)
        assert _grl_coeff(const, 0) == _grl_coeff(const, 1999) == 0.7
        ramp = TrainConfig(grl_coeff=1.0, grl_ramp=True, steps=1000)
        values = [_grl_coeff(ramp, s) for s in (0, 250, 500, 1000)]
        assert values[0] == 0.0
        assert all(b > a for a, b in zip(values, values[1:]))
        assert values[-1] == pytest.approx(2.0 / (1.0 + np.exp(-10.0)) - 1.0)


class TestTrainStep:
    def test_burn_in_runs_supervised_only(self, samples):
        src, tgt = samples
        cfg = TrainConfig(variant="mdbank", burnin_steps=3, seed=0)
        state = init_train_state(cfg, 3)
        for i in range(3):
            state, m = train_step(state, [src[i]], [tgt[i]], cfg)
            assert m.l_mt == 0.0 and m.l_adv == 0.0
            assert m.domain_acc is None
            assert m.l_total == m.l_det
        state, m = train_step(state, [src[3]], [tgt[3]], cfg)
        assert m.l_mt > 0.0 and m.l_adv > 0.0
        assert m.domain_acc is not None

    def test_composition_identity_every_step(self, samples):
        src, tgt = samples
        cfg = TrainConfig(variant="mdbank", burnin_steps=2, seed=1)
        state = init_train_state(cfg, 3)
        for i in range(6):
            state, m = train_step(state, [src[i]], [tgt[i]], cfg)
            expected = m.l_det + cfg.eta * (m.l_mt + cfg.lambda_ * m.l_adv)
            assert abs(m.l_total - expected) <= 1e-6

    def test_lambda_zero_disables_bank(self, samples):
        src, tgt = samples
        cfg = TrainConfig(variant="mdbank", lambda_=0.0, burnin_steps=0, seed=2)
        state = init_train_state(cfg, 3)
        state, m = train_step(state, [src[0]], [tgt[0]], cfg)
        assert m.l_mt > 0.0
        assert m.l_adv == 0.0 and m.domain_acc is None

    def test_ema_applied_exactly_once(self, samples):
        src, tgt = samples
        cfg = TrainConfig(variant="faster_only", seed=3, alpha=0.99)
        state = init_train_state(cfg, 3)
        before = {n: p.clone() for n, p in state.teacher.detector.named_parameters()}
        state, _ = train_step(state, [src[0]], [], cfg)
        s = dict(state.student.named_parameters())
        for n, t in state.teacher.detector.named_parameters():
            assert torch.equal(t, 0.99 * before[n] + (1.0 - 0.99) * s[n]), n

    def test_unlabeled_source_rejected(self, samples):
        src, tgt = samples
        cfg = TrainConfig(variant="faster_only", seed=0)
        state = init_train_state(cfg, 3)
        with pytest.raises(TrainingError, match="unlabeled"):
            train_step(state, [tgt[0]], [], cfg)

    def test_adaptation_needs_target_samples(self, samples):
        src, _ = samples
        cfg = TrainConfig(variant="mdbank", burnin_steps=0, seed=0)
        state = init_train_state(cfg, 3)
        with pytest.raises(TrainingError, match="target"):
            train_step(state, [src[0]], [], cfg)

    def test_eta_zero_matches_supervised_bitwise(self, samples):
        src, tgt = samples

        def run(variant, eta):
            cfg = TrainConfig(variant=variant, eta=eta, burnin_steps=0, seed=11)
            state = init_train_state(cfg, 3)
            state, _ = step_n(state, cfg, src, tgt if state.wiring["l_mt"] else [], 20)
            return state.student

        a = run("faster_only", 5.0)
        b = run("mdbank", 0.0)
        for (n, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
            assert torch.equal(p, q), n

    def test_nan_parameter_surfaces_as_component_error(self, samples):
        src, _ = samples
        cfg = TrainConfig(variant="faster_only", seed=0)
        state = init_train_state(cfg, 3)
        with torch.no_grad():
            state.student.backbone.body[0].weight[0, 0, 0, 0] = float("nan")
        with pytest.raises(Exception, match="not finite"):
            train_step(state, [src[0]], [], cfg)


class TestFit:
    def test_artifacts_and_determinism(self, tiny_dataset, tmp_path):
        cfg = TrainConfig(
            variant="mdbank", steps=6, burnin_steps=3, seed=5, checkpoint_every=3
        )
        run_a = fit(cfg, tiny_dataset, tmp_path / "a")
        run_b = fit(cfg, tiny_dataset, tmp_path / "b")

        assert (run_a / "config_echo.json").exists()
        echo = json.loads((run_a / "config_echo.json").read_text())
        assert echo["train"]["variant"] == "mdbank"

        lines = (run_a / "metrics.jsonl").read_text().splitlines()
        assert len(lines) == 6
        records = [json.loads(l) for l in lines]
        assert [r["step"] for r in records] == list(range(1, 7))
        assert all(r["l_mt"] == 0.0 for r in records[:3])
        assert any(r["l_mt"] > 0.0 for r in records[3:])

        names = {p.name for p in (run_a / "checkpoints").iterdir()}
        assert {"step_000003.npz", "step_000006.npz", "student_final.npz", "teacher_final.npz"} <= names

        pa = np.load(run_a / "checkpoints" / "student_final.npz")
        pb = np.load(run_b / "checkpoints" / "student_final.npz")
        assert set(pa.files) == set(pb.files)
        for k in pa.files:
            assert np.array_equal(pa[k], pb[k]), k

    def test_metrics_match_config_composition(self, tiny_dataset, tmp_path):
        cfg = TrainConfig(variant="mt_ins", steps=5, burnin_steps=2, seed=6)
        run = fit(cfg, tiny_dataset, tmp_path / "r")
        for line in (run / "metrics.jsonl").read_text().splitlines():
            r = json.loads(line)
            assert abs(r["l_total"] - (r["l_det"] + cfg.eta * (r["l_mt"] + cfg.lambda_ * r["l_adv"]))) <= 1e-6

    def test_source_only_dataset_suffices_for_faster_only(self, tiny_dataset, tmp_path):
        root = tmp_path / "srconly"
        root.mkdir()
        shutil.copy(Path(tiny_dataset) / "manifest.json", root / "manifest.json")
        shutil.copytree(Path(tiny_dataset) / "source", root / "source")

        cfg = TrainConfig(variant="faster_only", steps=2, seed=0)
        run = fit(cfg, root, tmp_path / "run")
        assert (run / "checkpoints" / "teacher_final.npz").exists()

        # an empty target split is detected before any training happens
        (root / "target" / "images").mkdir(parents=True)
        (root / "target" / "annotations.json").write_text("[]")
        with pytest.raises(TrainingError, match="target"):
            fit(TrainConfig(variant="mdbank", steps=2, seed=0), root, tmp_path / "run2")

    def test_final_checkpoint_loads_back(self, tiny_dataset, tmp_path):
        cfg = TrainConfig(variant="mdbank_h", steps=4, burnin_steps=2, seed=7)
        run = fit(cfg, tiny_dataset, tmp_path / "r")
        student_path = run / "checkpoints" / "student_final.npz"
        detector, config = ckpt.build_detector(student_path)
        assert detector.config.num_classes == 3
        assert config["train"]["variant"] == "mdbank_h"
        arrays, _ = ckpt.load_checkpoint(student_path)
        assert ckpt.bank_size(arrays) == 4  # 3 classes + background
        t_arrays, _ = ckpt.load_checkpoint(run / "checkpoints" / "teacher_final.npz")
        assert ckpt.bank_size(t_arrays) == 0  # teacher checkpoint holds no bank
