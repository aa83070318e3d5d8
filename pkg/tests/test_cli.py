import importlib
import math
import os

import numpy as np
import pytest

from umnn import cli
from umnn.errors import ConfigurationError, DimensionError, NumericError
from umnn.flow import build_flow, identity_flow
from umnn.serialize import load_model, save_model
from umnn.toy import read_csv, write_csv
from umnn.train import RunConfig, TrainingAborted, parse_shape, parse_steps, train

train_mod = importlib.import_module("umnn.train")

TINY = dict(dataset="two_moons", n_points=300, embedding="1x8", integrand="1x8", q=2, steps=10,
            eval_steps=20, batch_size=64, epochs=2, deterministic=True)


def tiny_config(tmp_path, **overrides):
    return RunConfig(**{**TINY, "out": str(tmp_path / "run"), **overrides}).validate()


class TestParsing:
    @pytest.mark.parametrize("text,expected", [("4x50", (50,) * 4), ("50,20", (50, 20)), ("8", (8,)),
                                               ((3, 4), (3, 4))])
    def test_shape(self, text, expected):
        assert parse_shape(text) == expected

    @pytest.mark.parametrize("text", ["0x5", "4x", "a,b", "3,-1", ""])
    def test_bad_shape(self, text):
        with pytest.raises(ConfigurationError):
            parse_shape(text)

    def test_steps(self):
        assert parse_steps("30") == 30
        assert parse_steps("rand") == (20, 100)
        with pytest.raises(ConfigurationError):
            parse_steps("1")
        with pytest.raises(ConfigurationError):
            parse_steps("many")

    def test_defaults_are_toy_configuration(self):
        c = RunConfig()
        assert (c.embedding, c.integrand, c.q, c.steps, c.lr, c.weight_decay, c.batch_size) == \
            ((50,) * 4, (50,) * 4, 10, 50, 1e-3, 1e-5, 100)

    @pytest.mark.parametrize("field,value", [("lr", 0.0), ("batch_size", 0), ("flows", 0), ("q", 0),
                                             ("dataset", "no_such_thing"), ("epochs", -1)])
    def test_validation(self, field, value):
        with pytest.raises(ConfigurationError):
            RunConfig(**{field: value}).validate()


class TestConfigLayering:
    def test_precedence(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("# comment\nlr = 0.01\nbatch-size=32  # trailing\nseed=4\n\n")
        c = cli.build_config({"lr": 0.05, "batch_size": None}, path, environ={"UMNN_SEED": "9"})
        assert c.lr == 0.05 and c.batch_size == 32 and c.seed == 4

    def test_env_seed_fallback(self):
        assert cli.build_config({}, environ={"UMNN_SEED": "11"}).seed == 11
        assert cli.build_config({}, environ={}).seed == 0

    def test_bool_and_shape_from_file(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("deterministic=yes\nembedding=2x16\nsteps=rand\n")
        c = cli.build_config({}, path, environ={})
        assert c.deterministic is True and c.embedding == (16, 16) and c.steps == (20, 100)

    @pytest.mark.parametrize("body", ["nonsense\n", "colour=red\n", "lr=fast\n", "deterministic=maybe\n"])
    def test_bad_file(self, tmp_path, body):
        path = tmp_path / "c.cfg"
        path.write_text(body)
        with pytest.raises(ConfigurationError):
            cli.build_config({}, path, environ={})


class TestTrain:
    def test_outputs(self, tmp_path):
        result = train(tiny_config(tmp_path))
        lines = (tmp_path / "run" / "metrics.csv").read_text().splitlines()
        assert lines[0] == "epoch,train_nll,valid_nll,wall_ms"
        assert [int(l.split(",")[0]) for l in lines[1:]] == [0, 1, 2]
        assert all(l.endswith(",0") for l in lines[1:])
        model = load_model(tmp_path / "run" / "model.umnn")
        assert model.d == 2 and model.steps[0].block.eval_steps == 20
        valid = [float(l.split(",")[2]) for l in lines[1:]]
        assert result.best_valid_nll == min(valid)
        assert result.best_epoch == int(np.argmin(valid))

    def test_learns(self, tmp_path):
        result = train(tiny_config(tmp_path, epochs=4))
        assert result.metrics[-1][2] < result.metrics[0][2]

    def test_deterministic_runs_identical(self, tmp_path):
        train(tiny_config(tmp_path / "a"))
        train(tiny_config(tmp_path / "b"))
        for name in ("metrics.csv", "model.umnn"):
            assert (tmp_path / "a" / "run" / name).read_bytes() == (tmp_path / "b" / "run" / name).read_bytes()

    def test_zero_epochs_writes_initial_model(self, tmp_path):
        result = train(tiny_config(tmp_path, epochs=0))
        assert result.best_epoch == 0 and os.path.exists(tmp_path / "run" / "model.umnn")

    def test_csv_dataset_and_wall_clock(self, tmp_path):
        data = tmp_path / "pts.csv"
        write_csv(data, np.random.default_rng(0).normal(size=(200, 3)))
        result = train(tiny_config(tmp_path, dataset=str(data), epochs=1, deterministic=False))
        assert result.model.d == 3
        assert result.metrics[1][3] > 0

    def test_abort_keeps_best(self, tmp_path, monkeypatch):
        real = train_mod.nll_loss_and_grads
        calls = {"n": 0}

        def flaky(model, batch, N=None):
            calls["n"] += 1
            if calls["n"] > 6:
                raise NumericError("non-finite loss")
            return real(model, batch, N)

        monkeypatch.setattr(train_mod, "nll_loss_and_grads", flaky)
        with pytest.raises(TrainingAborted, match="epoch 2"):
            train(tiny_config(tmp_path, epochs=5))
        assert load_model(tmp_path / "run" / "model.umnn").d == 2
        assert len((tmp_path / "run" / "metrics.csv").read_text().splitlines()) == 3


@pytest.fixture
def model_file(tmp_path):
    path = tmp_path / "id.umnn"
    save_model(identity_flow(2), path)
    return path


class TestEval:
    def test_identity_entropy(self, model_file):
        nll = cli.cmd_eval(model_file, "two_moons", n_points=20)
        assert np.isfinite(nll)

    def test_csv_and_standardization(self, model_file, tmp_path):
        model = identity_flow(2)
        model.mean, model.std = np.array([3.0, 0.0]), np.array([2.0, 2.0])
        path = tmp_path / "shifted.umnn"
        save_model(model, path)
        data = tmp_path / "x.csv"
        x = np.array([[3.0, 0.0], [5.0, 2.0]])
        write_csv(data, x)
        u = (x - model.mean) / model.std
        ref = np.mean(0.5 * np.sum(u * u, axis=1) + math.log(2 * math.pi) + math.log(4.0))
        assert cli.cmd_eval(path, str(data)) == pytest.approx(ref, rel=1e-12)

    def test_dimension_mismatch(self, model_file, tmp_path):
        data = tmp_path / "x.csv"
        write_csv(data, np.zeros((3, 3)))
        with pytest.raises(DimensionError):
            cli.cmd_eval(model_file, str(data))

    def test_unknown_data(self, model_file):
        with pytest.raises(ConfigurationError):
            cli.cmd_eval(model_file, "nothing_here")


class TestSample:
    def test_writes_csv_in_raw_units(self, tmp_path):
        model = identity_flow(2)
        model.mean, model.std = np.array([10.0, -10.0]), np.array([0.5, 0.5])
        path = tmp_path / "m.umnn"
        save_model(model, path)
        out = tmp_path / "s.csv"
        x = cli.cmd_sample(path, 500, seed=1, out=out)
        np.testing.assert_array_equal(read_csv(out), x)
        np.testing.assert_allclose(x.mean(axis=0), [10, -10], atol=0.1)

    def test_zero_samples(self, model_file, tmp_path):
        out = tmp_path / "s.csv"
        cli.cmd_sample(model_file, 0, out=out)
        assert out.read_text() == "x0,x1\n"


class TestDensityGrid:
    def test_identity_mass_and_layout(self, model_file, tmp_path):
        out, pgm = tmp_path / "g.csv", tmp_path / "g.pgm"
        mass = cli.cmd_density_grid(model_file, -4, 4, -3, 5, 40, out, pgm)
        phi = lambda a: 0.5 * (1 + math.erf(a / math.sqrt(2)))
        exact = (phi(4) - phi(-4)) * (phi(5) - phi(-3))
        assert mass == pytest.approx(exact, rel=2e-3)
        table = np.loadtxt(out, delimiter=",", skiprows=1)
        assert table.shape == (1600, 3)
        assert table[0, 0] == pytest.approx(-3.9) and table[0, 1] == pytest.approx(-2.9)
        assert table[1, 1] == table[0, 1]  # x varies fastest
        raw = pgm.read_bytes()
        assert raw.startswith(b"P5\n40 40\n255\n")
        pixels = np.frombuffer(raw[len(b"P5\n40 40\n255\n"):], dtype=np.uint8).reshape(40, 40)
        assert pixels.max() == 255
        # top row is y = 4.9, so the peak at y = +-0.1 sits in rows 24 and 25
        assert np.unravel_index(np.argmax(pixels), pixels.shape)[0] in (24, 25)

    def test_needs_2d_model(self, tmp_path):
        path = tmp_path / "m3.umnn"
        save_model(build_flow(3, 1, (4,), (4,), 2), path)
        with pytest.raises(DimensionError):
            cli.cmd_density_grid(path, -1, 1, -1, 1, 4, tmp_path / "o.csv")

    @pytest.mark.parametrize("args", [(-1, 1, -1, 1, 1), (1, -1, -1, 1, 4)])
    def test_bad_grid(self, model_file, tmp_path, args):
        with pytest.raises(ConfigurationError):
            cli.cmd_density_grid(model_file, *args, tmp_path / "o.csv")


class TestMain:
    def test_end_to_end(self, tmp_path, capsys):
        out = tmp_path / "run"
        code = cli.main(["train", "--dataset", "two_moons", "--n-points", "200", "--embedding", "1x8",
                         "--integrand", "1x8", "--q", "2", "--steps", "rand", "--eval-steps", "20",
                         "--epochs", "1", "--out", str(out), "--deterministic"])
        assert code == 0
        assert "best valid NLL" in capsys.readouterr().out
        model = str(out / "model.umnn")
        assert cli.main(["eval", "--model", model, "--data", "two_moons", "--n-points", "50"]) == 0
        float(capsys.readouterr().out)
        assert cli.main(["sample", "--model", model, "--n", "5", "--out", str(tmp_path / "s.csv")]) == 0
        assert read_csv(tmp_path / "s.csv").shape == (5, 2)
        assert cli.main(["density-grid", "--model", model, "--resolution", "8",
                         "--out", str(tmp_path / "g.csv")]) == 0
        assert capsys.readouterr().out.startswith("mass ")

    def test_exit_codes(self, tmp_path, model_file, capsys):
        assert cli.main(["train", "--lr", "-1", "--out", str(tmp_path / "x")]) == 2
        assert cli.main(["eval", "--model", str(tmp_path / "missing.umnn"), "--data", "two_moons"]) == 1
        bad = tmp_path / "bad.umnn"
        bad.write_bytes(b"junk")
        assert cli.main(["sample", "--model", str(bad), "--n", "3", "--out", str(tmp_path / "s.csv")]) == 2
        assert "ModelFormatError" in capsys.readouterr().err

    def test_aborted_exit_code(self, tmp_path, monkeypatch):
        def boom(config):
            raise TrainingAborted("non-finite loss")

        monkeypatch.setattr(cli, "cmd_train", boom)
        assert cli.main(["train", "--out", str(tmp_path / "x")]) == 3

    def test_env_seed_for_sampling(self, model_file, tmp_path, monkeypatch):
        monkeypatch.setenv("UMNN_SEED", "5")
        cli.main(["sample", "--model", str(model_file), "--n", "4", "--out", str(tmp_path / "a.csv")])
        cli.main(["sample", "--model", str(model_file), "--n", "4", "--seed", "5", "--out", str(tmp_path / "b.csv")])
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
