import json
import math

import numpy as np
import pytest

from prelab import cli
from prelab.backbone import Vocabulary, embed_tokens
from prelab.checkpoint import load_checkpoint, save_checkpoint
from prelab.config import AblationGrid, load_experiment, load_grid
from prelab.errors import CheckpointError, ValidationError
from prelab.experiment import GRID_FIELDS, METRIC_FIELDS, execute, run_ablation_grid, thread_count
from prelab.gradcheck import GradCheckConfig, run_gradcheck
from prelab.interpret import nearest_words
from prelab.prompt_encoder import EncoderConfig, PromptEncoder, init_prompts, reparameterize
from prelab.synthetic import SyntheticTaskSpec, generate_synthetic_task, write_task
from prelab.train import build_class_weights, predict


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("lab")
    write_task(generate_synthetic_task(SyntheticTaskSpec(C=4, d=8, K=4, test_per_class=5)), root / "data")
    cfg = {"data_dir": "data", "out_dir": "runs/r", "run_id": "r",
           "train": {"epochs": 2, "batch_size": 4, "K": 4, "encoder": {"architecture": "bilstm"}}}
    (root / "cfg.json").write_text(json.dumps(cfg))
    return root


def _write(path, obj):
    path.write_text(json.dumps(obj))
    return path


class TestConfig:
    def test_paths_relative_to_config(self, workdir):
        exp = load_experiment(workdir / "cfg.json")
        assert exp.data_path == (workdir / "data").resolve()
        assert exp.train.encoder.architecture == "bilstm"

    @pytest.mark.parametrize("bad,field", [
        ({"data_dir": "d", "epochz": 1}, "epochz"),
        ({"data_dir": "d", "train": {"lr": 0.1}}, "lr"),
        ({"data_dir": "d", "train": {"encoder": {"arch": "mlp"}}}, "arch"),
    ])
    def test_unknown_keys_are_named(self, tmp_path, bad, field):
        with pytest.raises(ValidationError, match=field):
            load_experiment(_write(tmp_path / "c.json", bad))

    def test_invalid_value(self, tmp_path):
        with pytest.raises(ValidationError, match="epochs"):
            load_experiment(_write(tmp_path / "c.json", {"data_dir": "d", "train": {"epochs": 0}}))

    def test_malformed_json(self, tmp_path):
        (tmp_path / "c.json").write_text("{not json")
        with pytest.raises(ValidationError):
            load_experiment(tmp_path / "c.json")

    def test_missing_data_dir(self, tmp_path):
        with pytest.raises(ValidationError, match="data_dir"):
            load_experiment(_write(tmp_path / "c.json", {}))

    def test_grid_cells_in_declaration_order(self):
        g = AblationGrid(architectures=["bilstm", "mlp"], residual=[True, False], seeds=[1, 2])
        cells = g.cells()
        assert len(cells) == 8
        assert cells[0] == ("bilstm", True, "shared", 4, 16, 1)
        assert cells[1] == ("bilstm", True, "shared", 4, 16, 2)
        assert cells[-1] == ("mlp", False, "shared", 4, 16, 2)

    def test_empty_axis(self):
        with pytest.raises(ValidationError):
            AblationGrid(architectures=[])


class TestCheckpoint:
    def _trained(self, small_backbone, arch="transformer", sharing="shared"):
        enc = PromptEncoder(EncoderConfig(architecture=arch, sharing=sharing), 8, 4)
        rng = np.random.default_rng(0)
        for t in enc.parameters():
            t.data = t.data + rng.normal(size=t.shape) / 3
        prompt = init_prompts("gaussian", 4, small_backbone.vocab, seed=1)
        prompt.vectors.data = prompt.vectors.data + rng.normal(size=(4, 8)) * 1e-3
        return prompt, enc

    @pytest.mark.parametrize("arch,sharing", [("transformer", "shared"), ("bilstm", "separate"), ("none", "shared")])
    def test_round_trip_bit_exact(self, tmp_path, small_backbone, arch, sharing):
        prompt, enc = self._trained(small_backbone, arch, sharing)
        names = ["cat", "dog", "car", "tree"]
        f = np.ones(8) / math.sqrt(8)
        before = predict(build_class_weights(small_backbone, enc, prompt, names), f, 0.01)[0]
        save_checkpoint(tmp_path / "c.json", prompt, enc, 0.01, backbone=small_backbone, seed=5)
        p2, e2, meta = load_checkpoint(tmp_path / "c.json", expect_d=8)
        assert np.array_equal(p2.vectors.data, prompt.vectors.data)
        for (n1, t1), (n2, t2) in zip(enc.named_parameters(), e2.named_parameters()):
            assert n1 == n2 and np.array_equal(t1.data, t2.data)
        after = predict(build_class_weights(small_backbone, e2, p2, names), f, 0.01)[0]
        assert np.array_equal(before, after)
        assert meta["seed"] == 5 and e2.config == enc.config

    def test_width_mismatch(self, tmp_path, small_backbone):
        prompt, enc = self._trained(small_backbone)
        save_checkpoint(tmp_path / "c.json", prompt, enc, 0.01)
        with pytest.raises(CheckpointError, match="d=8"):
            load_checkpoint(tmp_path / "c.json", expect_d=16)

    def test_version_mismatch(self, tmp_path, small_backbone):
        prompt, enc = self._trained(small_backbone)
        path = save_checkpoint(tmp_path / "c.json", prompt, enc, 0.01)
        state = json.loads(path.read_text())
        state["version"] = 99
        path.write_text(json.dumps(state))
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(path)

    def test_truncated(self, tmp_path, small_backbone):
        prompt, enc = self._trained(small_backbone)
        path = save_checkpoint(tmp_path / "c.json", prompt, enc, 0.01)
        text = path.read_text()
        path.write_text(text[: len(text) // 2])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_wrong_parameter_set(self, tmp_path, small_backbone):
        prompt, enc = self._trained(small_backbone)
        path = save_checkpoint(tmp_path / "c.json", prompt, enc, 0.01)
        state = json.loads(path.read_text())
        del state["encoderParams"]["layer0.q.b"]
        path.write_text(json.dumps(state))
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_missing(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "nope.json")


class TestInterpret:
    TOY = Vocabulary(["alpha", "beta", "gamma"], [[0.0, 0.0], [1.0, 0.0], [0.0, 2.0]])

    def test_toy_ranking_matches_brute_force(self):
        V = np.array([[0.9, 0.2], [0.1, 1.5], [-1.0, -1.0]])
        report = nearest_words(V, self.TOY, n=3)
        for v, row in zip(V, report.neighbors):
            table = sorted((math.dist(v, e), w) for w, e in zip(self.TOY.words, self.TOY.table))
            assert [w for w, _ in row] == [w for _, w in table]
            assert [d for _, d in row] == pytest.approx([d for d, _ in table], abs=1e-15)

    def test_cosine_flag(self):
        report = nearest_words(np.array([[0.1, 3.0]]), self.TOY, n=2, metric="cosine")
        assert report.neighbors[0][0][0] == "gamma"

    def test_copied_row_is_distance_zero(self):
        report = nearest_words(self.TOY.table[[2]], self.TOY)
        assert report.neighbors[0] == [("gamma", 0.0)]

    def test_n_clamped_to_vocabulary(self):
        row = nearest_words(np.array([[0.5, 0.5]]), self.TOY, n=10).neighbors[0]
        assert len(row) == 3
        dists = [d for _, d in row]
        assert dists == sorted(dists) and min(dists) >= 0

    def test_template_prompt_reads_back_its_words(self, small_backbone):
        prompt = init_prompts("template", 4, small_backbone.vocab)
        rows = nearest_words(prompt.vectors, small_backbone.vocab).neighbors
        assert [r[0] for r in rows] == [("a", 0.0), ("photo", 0.0), ("of", 0.0), ("a", 0.0)]

    def test_errors(self):
        with pytest.raises(ValidationError):
            nearest_words(np.zeros((1, 2)), self.TOY, n=0)
        with pytest.raises(ValidationError):
            nearest_words(np.zeros((1, 2)), self.TOY, metric="manhattan")


class TestExperiment:
    def test_writes_one_row_and_checkpoint(self, workdir):
        exp = load_experiment(workdir / "cfg.json")
        result = execute(exp)
        lines = (exp.out_path / "metrics.csv").read_text().splitlines()
        assert lines[0] == ",".join(METRIC_FIELDS)
        assert len(lines) == 2
        assert result.checkpoint.exists()

    def test_rerun_identical(self, workdir):
        exp = load_experiment(workdir / "cfg.json")
        a = execute(exp)
        csv_a = (exp.out_path / "metrics.csv").read_bytes()
        ckpt_a = a.checkpoint.read_bytes()
        b = execute(exp)
        assert (exp.out_path / "metrics.csv").read_bytes() == csv_a
        assert b.checkpoint.read_bytes() == ckpt_a

    def test_missing_dataset(self, tmp_path):
        path = _write(tmp_path / "c.json", {"data_dir": "nowhere"})
        with pytest.raises(ValidationError, match="missing dataset"):
            execute(load_experiment(path))

    def test_template_needs_four_tokens(self, workdir, tmp_path):
        cfg = {"data_dir": str(workdir / "data"), "train": {"M": 8, "epochs": 1}}
        with pytest.raises(ValidationError):
            execute(load_experiment(_write(tmp_path / "c.json", cfg)), write=False)


class TestGrid:
    def _grid(self, workdir, **axes):
        axes.setdefault("architectures", ["bilstm", "mlp", "transformer"])
        axes.setdefault("K", [4])
        return AblationGrid(**axes), load_experiment(workdir / "cfg.json")

    def test_six_rows(self, workdir):
        grid, base = self._grid(workdir, residual=[True, False])
        rows = run_ablation_grid(grid, base, threads=1)
        assert len(rows) == 6
        assert [(r["arch"], r["residual"]) for r in rows] == [
            (a, r) for a in ("bilstm", "mlp", "transformer") for r in ("true", "false")]

    def test_parallel_matches_serial(self, workdir):
        grid, base = self._grid(workdir, sharing=["shared", "separate"])
        assert run_ablation_grid(grid, base, threads=3) == run_ablation_grid(grid, base, threads=1)

    def test_failed_cell_is_recorded(self, workdir):
        grid, base = self._grid(workdir, architectures=["bilstm", "lstm", "mlp"])
        rows = run_ablation_grid(grid, base, threads=1)
        assert [r["status"] for r in rows][0] == "ok" and rows[2]["status"] == "ok"
        assert rows[1]["status"].startswith("error") and rows[1]["base_acc"] == ""

    def test_context_length_sweep_uses_padded_init(self, tmp_path):
        spec = SyntheticTaskSpec(C=4, d=8, K=4, test_per_class=5, max_context=17)
        write_task(generate_synthetic_task(spec), tmp_path / "data")
        cfg = _write(tmp_path / "c.json", {"data_dir": "data", "train": {"epochs": 1, "K": 4}})
        grid = AblationGrid(architectures=["mlp"], M=[4, 8, 16], K=[4])
        rows = run_ablation_grid(grid, load_experiment(cfg), threads=1)
        assert [r["M"] for r in rows] == [4, 8, 16] and all(r["status"] == "ok" for r in rows)

    def test_context_overflow_fails_soft(self, workdir):
        grid, base = self._grid(workdir, architectures=["mlp"], M=[16], K=[4])
        (row,) = run_ablation_grid(grid, base, threads=1)
        assert "max_context" in row["status"]

    def test_grid_file(self, workdir, tmp_path):
        path = _write(workdir / "grid.json", {"base_config": "cfg.json", "out": "g.csv",
                                              "architectures": ["mlp"], "seeds": [1, 2], "K": [4]})
        grid, base, out = load_grid(path)
        run_ablation_grid(grid, base, out, threads=1)
        lines = out.read_text().splitlines()
        assert lines[0] == ",".join(GRID_FIELDS) and len(lines) == 3

    @pytest.mark.parametrize("raw", ["0", "x"])
    def test_thread_env(self, raw):
        with pytest.raises(ValidationError):
            thread_count({"PRE_LAB_THREADS": raw})
        assert thread_count({}) == 1 and thread_count({"PRE_LAB_THREADS": "4"}) == 4


class TestGradcheck:
    def test_small_mlp_passes(self):
        report = run_gradcheck(GradCheckConfig(architectures=("mlp",)))
        assert report.passed and report.coop_mismatch < 1e-12
        assert set(report.errors) == {"mlp/prompt", "mlp/down.w", "mlp/down.b", "mlp/up.w", "mlp/up.b"}

    def test_separate_sharing_groups(self):
        report = run_gradcheck(GradCheckConfig(architectures=("mlp",), sharing="separate", M=2))
        assert "mlp/1.up.w" in report.errors and report.passed

    def test_refuses_dropout(self):
        with pytest.raises(ValidationError):
            run_gradcheck(GradCheckConfig(dropout_in_check=True))


class TestCli:
    def test_full_cycle(self, workdir, tmp_path, capsys):
        spec = _write(tmp_path / "spec.json", {"C": 4, "d": 8, "K": 3, "test_per_class": 3})
        assert cli.main(["gen-data", str(spec), str(tmp_path / "data")]) == 0
        cfg = _write(tmp_path / "cfg.json", {"data_dir": "data", "out_dir": "out",
                                             "train": {"epochs": 1, "K": 3, "encoder": {"architecture": "mlp"}}})
        assert cli.main(["train", str(cfg)]) == 0
        ckpt = tmp_path / "out" / "checkpoint.json"
        assert cli.main(["eval", str(cfg), str(ckpt)]) == 0
        assert cli.main(["interpret", str(ckpt), "--top", "2"]) == 0
        out = capsys.readouterr().out
        assert "[V, euclidean]" in out and "[V~, euclidean]" in out

    def test_ablate(self, workdir, capsys):
        path = _write(workdir / "g2.json", {"base_config": "cfg.json", "out": "g2.csv", "architectures": ["mlp"],
                                             "K": [4]})
        assert cli.main(["ablate", str(path)]) == 0
        assert "1 cells (0 failed)" in capsys.readouterr().out

    def test_validation_exit_code(self, tmp_path, capsys):
        assert cli.main(["train", str(_write(tmp_path / "c.json", {"data_dir": "d", "oops": 1}))]) == 1
        assert "oops" in capsys.readouterr().err

    def test_gradcheck_exit_codes(self, tmp_path):
        ok = _write(tmp_path / "ok.json", {"architectures": ["mlp"]})
        assert cli.main(["gradcheck", str(ok)]) == 0
        # an unattainable tolerance makes the check fail
        strict = _write(tmp_path / "strict.json", {"architectures": ["mlp"], "tolerance": 1e-30})
        assert cli.main(["gradcheck", str(strict)]) == 3
        refuse = _write(tmp_path / "refuse.json", {"dropout_in_check": True})
        assert cli.main(["gradcheck", str(refuse)]) == 1

    def test_runtime_exit_code(self, monkeypatch, tmp_path):
        def boom(args):
            raise RuntimeError("disk on fire")

        monkeypatch.setattr(cli, "cmd_gen_data", boom)
        parser_args = ["gen-data", str(tmp_path / "s.json"), str(tmp_path / "o")]
        monkeypatch.setattr(cli, "build_parser", _patched_parser(boom))
        assert cli.main(parser_args) == 2

    def test_module_entry_point(self):
        import subprocess
        import sys

        proc = subprocess.run([sys.executable, "-m", "prelab", "--help"], capture_output=True, text=True)
        assert proc.returncode == 0 and "gradcheck" in proc.stdout


def _patched_parser(func):
    original = cli.build_parser

    def build():
        parser = original()
        parser._subparsers._group_actions[0].choices["gen-data"].set_defaults(func=func)
        return parser

    return build
