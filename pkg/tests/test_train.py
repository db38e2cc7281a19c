import numpy as np
import pytest

from intrinseg import nn
from intrinseg import train as T
from intrinseg.scenegen import generate_dataset


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "toy"
    generate_dataset(num_scenes=3, rigs_per_scene=2, out_path=out, master_seed=9, canvas=(16, 16))
    return out


def toy_config(**overrides):
    base = dict(
        experiment="single_intrinsics",
        epochs=2,
        batch_size=2,
        seed=0,
        features=(4, 8),
    )
    base.update(overrides)
    return T.TrainConfig(**base)


class TestFnv1a64:
    def test_reference_values(self):
        assert T.fnv1a64("") == 0xCBF29CE484222325
        assert T.fnv1a64("a") == 0xAF63DC4C8601EC8C
        assert T.fnv1a64("foobar") == 0x85944171F73967E8

    def test_sensitivity(self):
        assert T.fnv1a64("config") != T.fnv1a64("confih")


class TestTrainConfig:
    def test_invalid_experiment(self):
        with pytest.raises(T.ConfigError, match="unknown experiment"):
            T.TrainConfig(experiment="mystery")

    def test_batch_size_floor(self):
        with pytest.raises(T.ConfigError, match="batch_size"):
            T.TrainConfig(batch_size=1)

    def test_precision_values(self):
        with pytest.raises(T.ConfigError, match="precision"):
            T.TrainConfig(precision="f16")

    def test_kv_roundtrip(self):
        config = toy_config(experiment="joint", w=0.5, lr=0.1)
        back = T.TrainConfig.from_kv(config.canonical_text())
        assert back == config
        assert back.config_hash() == config.config_hash()

    def test_kv_comments_and_overrides(self):
        text = "# comment\nexperiment=joint\nepochs=3\n"
        config = T.TrainConfig.from_kv(text, overrides={"w": "0.5"})
        assert config.experiment == "joint" and config.epochs == 3 and config.w == 0.5

    def test_unknown_key_rejected(self):
        with pytest.raises(T.ConfigError, match="unknown config key"):
            T.TrainConfig.from_kv("velocity=9\n")

    def test_hash_changes_with_any_field(self):
        base = toy_config()
        assert base.config_hash() != toy_config(seed=1).config_hash()
        assert base.config_hash() != toy_config(lr=0.02).config_hash()

    def test_cascade_spec_has_four_input_channels(self):
        config = toy_config(experiment="cascade_seg_to_intrinsics")
        assert config.network_spec(8).input_channels == 4
        assert toy_config().network_spec(8).input_channels == 3


class TestAdadeltaUpdate:
    def test_first_step_from_rest(self):
        # acc_g = 0.05 * 1, delta = sqrt(eps) / sqrt(0.05 + eps)
        theta, acc_g, acc_d = T.adadelta_update(
            np.array(0.0), np.array(1.0), np.array(0.0), np.array(0.0),
            lr=0.01, rho=0.95, eps=1e-6, weight_decay=0.0,
        )
        expected_delta = np.sqrt(1e-6) / np.sqrt(0.05 + 1e-6)
        assert acc_g == pytest.approx(0.05)
        assert theta == pytest.approx(-0.01 * expected_delta)
        assert acc_d == pytest.approx(0.05 * expected_delta ** 2)

    def test_multi_step_vs_scalar_oracle(self, rng):
        theta = float(rng.normal())
        acc_g = acc_d = 0.0
        t_arr = np.array(theta)
        g_arr, d_arr = np.array(0.0), np.array(0.0)
        lr, rho, eps, wd = 0.5, 0.9, 1e-6, 1e-3
        for _ in range(20):
            grad = float(rng.normal())
            # hand-stepped reference
            acc_g = rho * acc_g + (1 - rho) * grad * grad
            delta = np.sqrt(acc_d + eps) / np.sqrt(acc_g + eps) * grad
            acc_d = rho * acc_d + (1 - rho) * delta * delta
            theta = theta - lr * delta - lr * wd * theta
            t_arr, g_arr, d_arr = T.adadelta_update(
                t_arr, np.array(grad), g_arr, d_arr, lr, rho, eps, wd
            )
            assert t_arr == pytest.approx(theta, rel=1e-12)

    def test_zero_grad_with_decay_still_shrinks(self):
        theta, _, _ = T.adadelta_update(
            np.array(2.0), np.array(0.0), np.array(0.0), np.array(0.0),
            lr=1.0, rho=0.95, eps=1e-6, weight_decay=0.1,
        )
        assert theta == pytest.approx(2.0 - 0.2)


class TestSetTrainable:
    def make_state(self):
        spec = nn.NetworkSpec(
            encoder_features=(4, 8), heads=("reflectance", "shading", "segmentation")
        )
        return nn.NetworkState.initialize(spec, seed=0)

    def test_restricts_to_named_decoders(self):
        state = self.make_state()
        T.set_trainable(state, ["segmentation"], include_encoder=False)
        assert all(n.startswith("dec.segmentation.") for n in state.trainable)
        assert state.trainable

    def test_encoder_opt_in(self):
        state = self.make_state()
        T.set_trainable(state, ["shading"], include_encoder=True)
        assert any(n.startswith("enc") for n in state.trainable)

    def test_unknown_head(self):
        with pytest.raises(T.ConfigError, match="unknown head"):
            T.set_trainable(self.make_state(), ["depth"])

    def test_frozen_parameters_stay_bitwise_identical(self, rng):
        state = self.make_state()
        T.set_trainable(state, ["segmentation"], include_encoder=False)
        frozen_before = {
            n: p.data.tobytes() for n, p in state.params.items() if n not in state.trainable
        }
        optimizer = T.Adadelta(state, lr=1.0)
        for _ in range(3):
            state.zero_grad()
            out = nn.forward(state, rng.random((2, 3, 8, 8)), training=True)
            sum((out[h] * out[h]).mean() for h in state.spec.heads).backward()
            optimizer.step(state)
        for n, raw in frozen_before.items():
            assert state.params[n].data.tobytes() == raw, n
        assert any(n.startswith("dec.segmentation.") for n in state.trainable)


class TestSplitArrays:
    def make_samples(self, data_dir):
        from intrinseg.scenegen import load_dataset

        _, samples = load_dataset(data_dir)
        return samples

    def test_default_input_is_image(self, data_dir):
        samples = self.make_samples(data_dir)
        arrays = T.SplitArrays(samples, "single_intrinsics", 8)
        assert arrays.inputs.shape == (6, 3, 16, 16)
        assert arrays.inputs.dtype == np.float32
        assert np.array_equal(arrays.inputs, np.stack([s.image.data for s in samples]))

    def test_albedo_cascade_uses_reflectance(self, data_dir):
        samples = self.make_samples(data_dir)
        arrays = T.SplitArrays(samples, "cascade_albedo_to_seg", 8)
        assert np.array_equal(arrays.inputs, arrays.reflectance)

    def test_seg_cascade_appends_label_plane(self, data_dir):
        samples = self.make_samples(data_dir)
        arrays = T.SplitArrays(samples, "cascade_seg_to_intrinsics", 8)
        assert arrays.inputs.shape[1] == 4
        plane = arrays.inputs[:, 3]
        assert plane.min() >= 0.0 and plane.max() <= 1.0
        assert np.array_equal(plane * 7, arrays.labels.astype(np.float32))


class TestRunExperiment:
    def test_zero_epochs_still_writes_everything(self, data_dir, tmp_path):
        record = T.run_experiment(toy_config(epochs=0), data_dir, tmp_path / "run")
        assert record.traces == {}
        for name in ("config.kv", "record.kv", "record.txt", "model.isnn", "eval.kv", "eval.txt"):
            assert (tmp_path / "run" / name).exists(), name

    def test_loss_trace_finite_and_recorded(self, data_dir, tmp_path):
        record = T.run_experiment(toy_config(epochs=2), data_dir, tmp_path / "run")
        assert len(record.traces["total"]) == 2
        assert all(np.isfinite(v) for v in record.traces["total"])

    def test_byte_identical_reruns(self, data_dir, tmp_path):
        config = toy_config(epochs=2, experiment="joint")
        T.run_experiment(config, data_dir, tmp_path / "a")
        T.run_experiment(config, data_dir, tmp_path / "b")
        for name in ("config.kv", "record.kv", "model.isnn", "eval.kv", "confusion.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (
                tmp_path / "b" / name
            ).read_bytes(), name

    def test_seed_changes_outcome(self, data_dir, tmp_path):
        a = T.run_experiment(toy_config(seed=0), data_dir, tmp_path / "a")
        b = T.run_experiment(toy_config(seed=1), data_dir, tmp_path / "b")
        assert a.traces["total"] != b.traces["total"]

    def test_checkpoint_reproduces_report(self, data_dir, tmp_path):
        from intrinseg.scenegen import load_dataset

        config = toy_config(epochs=1, experiment="single_segmentation")
        record = T.run_experiment(config, data_dir, tmp_path / "run")
        state = nn.load_checkpoint(record.checkpoint_path)
        manifest, samples = load_dataset(data_dir)
        test = [s for s, e in zip(samples, manifest.entries) if e.split == "test"]
        data = T.SplitArrays(test, config.experiment, manifest.num_classes)
        report = T.evaluate_state(state, data, manifest)
        assert report.flat_metrics() == record.report.flat_metrics()

    def test_incompatible_resolution(self, data_dir, tmp_path):
        config = toy_config(features=(4, 8, 16, 32, 64))  # 2^5 does not divide 16
        with pytest.raises(T.DatasetCompatibilityError):
            T.run_experiment(config, data_dir, tmp_path / "run")

    def test_record_kv_readable(self, data_dir, tmp_path):
        T.run_experiment(toy_config(epochs=1), data_dir, tmp_path / "run")
        kv = T.RunRecord.read_kv(tmp_path / "run" / "record.kv")
        assert kv["experiment"] == "single_intrinsics"
        assert kv["checkpoint"] == "model.isnn"
        assert len(kv["config_hash"]) == 16


class TestSweepW:
    def test_tiny_sweep_table(self, data_dir, tmp_path):
        records = T.sweep_w(
            toy_config(epochs=1), data_dir, tmp_path / "sweep", values=(0.5, 2.0)
        )
        assert len(records) == 2
        lines = (tmp_path / "sweep" / "sweep_w.tsv").read_text().splitlines()
        assert lines[0].split("\t") == ["w"] + list(T.SWEEP_COLUMNS)
        assert len(lines) == 3
        for line in lines[1:]:
            assert len(line.split("\t")) == 1 + len(T.SWEEP_COLUMNS)
