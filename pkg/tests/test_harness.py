import numpy as np
import pytest

from backdoorlab.harness import (
    EvaluationError,
    ExperimentConfig,
    MetricsRecord,
    TrainingError,
    default_suite_cells,
    evaluate,
    model_digest,
    prepare_data,
    run_defense,
    run_suite,
    train_backdoor,
    write_manifest,
    write_metrics_csv,
)
from backdoorlab.data import gen_synth, make_poison_testset, patch_trigger
from backdoorlab.model import dense, init_network
from backdoorlab.numerics import RngState


def tiny_config(**overrides) -> ExperimentConfig:
    cfg = ExperimentConfig()
    cfg.data.classes = 4
    cfg.data.per_class = 40
    cfg.data.test_per_class = 25
    cfg.data.height = cfg.data.width = 12
    cfg.train.epochs = 6
    cfg.train.val_fraction = 0.1
    cfg.arch.conv1, cfg.arch.conv2 = 4, 8
    cfg.defense.epochs = 5
    for key, val in overrides.items():
        cfg.apply_override(key, val)
    return cfg


class TestConfig:
    def test_round_trip_lossless(self):
        cfg = tiny_config()
        cfg.attack.poison_rate = 0.137
        cfg.defense.eta = 0.05
        back = ExperimentConfig.from_text(cfg.to_text())
        assert back == cfg
        assert back.to_text() == cfg.to_text()

    def test_file_round_trip(self, tmp_path):
        cfg = tiny_config()
        cfg.save(tmp_path / "config.ini")
        assert ExperimentConfig.load(tmp_path / "config.ini") == cfg

    def test_override_types(self):
        cfg = tiny_config()
        cfg.apply_override("attack.poison_rate", "0.25")
        cfg.apply_override("attack.enabled", "false")
        cfg.apply_override("train.epochs", "3")
        assert cfg.attack.poison_rate == 0.25
        assert cfg.attack.enabled is False
        assert cfg.train.epochs == 3

    def test_unknown_key_rejected(self):
        with pytest.raises(KeyError):
            tiny_config().apply_override("attack.nope", "1")


class TestEvaluate:
    def test_constant_target_model(self):
        d = gen_synth(RngState(1), 3, 20, dims=(1, 8, 8))
        net = init_network([dense(3)], 64, 3, RngState(2))
        net.params[:] = 0.0
        net.params[-3] = 10.0  # bias on class 0 -> always predicts 0
        poison = make_poison_testset(d, patch_trigger(), target=0)
        rec = evaluate(net, d, poison, target=0)
        assert rec.asr == 1.0
        assert rec.acc == pytest.approx(np.mean(d.labels == 0))

    def test_hand_counted_fixture(self):
        images = np.zeros((4, 1, 8, 8))
        images[1, 0, 0, 0] = 1.0
        images[2, 0, 0, 1] = 1.0
        images[3, 0, 0, 0] = images[3, 0, 0, 1] = 1.0
        from backdoorlab.data import make_clean_dataset

        clean = make_clean_dataset(images, np.array([0, 1, 0, 1]), 2)
        net = init_network([dense(2)], 64, 2, RngState(0))
        net.params[:] = 0.0
        net.params[64] = 5.0  # class-1 weight on pixel (0,0)
        # predictions: [0, 1, 0, 1] -> acc = 4/4; build poison set towards 1
        poison = make_poison_testset(clean, patch_trigger(size=0), target=1)
        rec = evaluate(net, clean, poison, target=1)
        assert rec.acc == 1.0
        assert rec.n_poison == 2  # the two class-0 samples got "triggered"
        assert rec.asr == 0.0  # size-0 patch changes nothing, so they stay class 0

    def test_empty_sets_rejected(self):
        d = gen_synth(RngState(3), 2, 5, dims=(1, 8, 8))
        net = init_network([dense(2)], 64, 2, RngState(4))
        with pytest.raises(EvaluationError):
            evaluate(net, d.subset([]), d, 0)

    def test_metrics_pure_function(self):
        d = gen_synth(RngState(5), 3, 10, dims=(1, 8, 8))
        net = init_network([dense(3)], 64, 3, RngState(6))
        poison = make_poison_testset(d, patch_trigger(), 0)
        a = evaluate(net, d, poison, 0)
        b = evaluate(net, d, poison, 0)
        assert a == b  # timestamp excluded from comparison


class TestTrainBackdoor:
    def test_no_attack_control(self):
        cfg = tiny_config()
        cfg.attack.enabled = False
        result = train_backdoor(cfg)
        # attack "fails" by construction: ASR on triggered images near chance
        assert result.metrics.asr <= 2.0 / cfg.data.classes
        assert not result.bundle.train_set.poisoned.any()

    def test_deterministic_checkpoints(self):
        a = train_backdoor(tiny_config())
        b = train_backdoor(tiny_config())
        assert np.array_equal(a.net.params, b.net.params)
        assert a.metrics == b.metrics

    def test_poisoned_fraction(self):
        cfg = tiny_config()
        result = train_backdoor(cfg)
        n = result.bundle.train_set.n
        assert int(result.bundle.train_set.poisoned.sum()) == int(cfg.attack.poison_rate * n)

    def test_divergence_reported_with_epoch(self):
        cfg = tiny_config()
        cfg.train.lr = 1e200  # guaranteed overflow to non-finite loss
        with pytest.raises(TrainingError, match="epoch"):
            train_backdoor(cfg)

    def test_validation_is_clean_and_stratified(self):
        cfg = tiny_config()
        bundle = prepare_data(cfg)
        assert not bundle.val.poisoned.any()
        for cls in range(cfg.data.classes):
            assert (bundle.val.labels == cls).sum() >= 1


class TestRunDefense:
    def test_none_defense_identity(self):
        cfg = tiny_config()
        cfg.defense.method = "none"
        trained = train_backdoor(cfg)
        result = run_defense(cfg, trained.net, trained.bundle)
        assert model_digest(result.net) == model_digest(trained.net)
        assert result.before == result.after

    def test_ngf_moves_head_only(self):
        cfg = tiny_config()
        trained = train_backdoor(cfg)
        result = run_defense(cfg, trained.net, trained.bundle)
        backbone = slice(0, trained.net.layout[-1][0])
        assert np.array_equal(result.net.params[backbone], trained.net.params[backbone])
        assert len(result.trace) == cfg.defense.epochs
        assert result.runtime_seconds > 0

    def test_full_scope_baseline(self):
        cfg = tiny_config()
        cfg.defense.method = "sgd"
        cfg.defense.scope = "full"
        trained = train_backdoor(cfg)
        result = run_defense(cfg, trained.net, trained.bundle)
        backbone = slice(0, trained.net.layout[-1][0])
        assert not np.array_equal(result.net.params[backbone], trained.net.params[backbone])


class TestSuite:
    def test_single_cell_matches_direct_run(self, tmp_path):
        cfg = tiny_config()
        from backdoorlab.harness import SuiteCell

        results = run_suite(cfg, [SuiteCell("solo", {})], tmp_path)
        assert len(results) == 1 and results[0].ok
        trained = train_backdoor(cfg)
        direct = run_defense(cfg, trained.net, trained.bundle)
        assert results[0].asr_after == pytest.approx(direct.after.asr)
        assert (tmp_path / "suite.csv").exists()
        assert (tmp_path / "solo" / "manifest.txt").exists()

    def test_failing_cell_recorded_and_skipped(self, tmp_path):
        cfg = tiny_config()
        from backdoorlab.harness import SuiteCell

        cells = [SuiteCell("bad", {"train.lr": "1e200"}), SuiteCell("good", {})]
        results = run_suite(cfg, cells, tmp_path)
        assert not results[0].ok and "TrainingError" in results[0].error
        assert results[1].ok

    def test_default_cells_cover_spec_sweeps(self):
        names = [c.name for c in default_suite_cells()]
        assert any("rate25" in n for n in names)
        assert any("rate50" in n for n in names)
        assert any("noreg" in n for n in names)
        assert any("blend" in n for n in names)
        assert any("sig" in n for n in names)


class TestManifest:
    def test_manifest_requires_existing_artifacts(self, tmp_path):
        cfg = tiny_config()
        rec = MetricsRecord(0.9, 0.1, 10, 10, "abc")
        with pytest.raises(FileNotFoundError):
            write_manifest(tmp_path / "m.txt", cfg, {"ckpt": tmp_path / "missing"},
                           {"before": rec}, 1.0)

    def test_manifest_contents(self, tmp_path):
        cfg = tiny_config()
        artifact = tmp_path / "data.csv"
        artifact.write_text("x\n")
        rec = MetricsRecord(0.875, 0.125, 8, 8, "deadbeef" * 8)
        write_manifest(tmp_path / "m.txt", cfg, {"data": artifact}, {"after": rec}, 2.5)
        text = (tmp_path / "m.txt").read_text()
        assert "sha256:" in text
        assert "acc:0.875000" in text
        assert "[config]" in text

    def test_metrics_csv(self, tmp_path):
        rec = MetricsRecord(0.5, 0.25, 4, 4, "d" * 64)
        write_metrics_csv({"before": rec}, tmp_path / "metrics.csv")
        lines = (tmp_path / "metrics.csv").read_text().strip().split("\n")
        assert lines[0] == "stage,acc,asr,n_clean,n_poison,model_digest"
        assert lines[1].startswith("before,0.500000,0.250000,4,4,")
