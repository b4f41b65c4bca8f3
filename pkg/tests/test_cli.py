import pytest

from bass.cli import build_parser, run_command

TINY_CFG = """\
# small end-to-end run
feature_dim = 4
vocab_words = 8
keywords_per_utterance = 2
utterance_frames = 80
num_train = 4
num_val = 1
num_test = 2
model_dim = 16
heads = 2
encoder_layers = 1
decoder_layers = 1
ff_dim = 24
dropout_rate = 0.0
epochs = 2
warmup_steps = 10
train_maxlen_frames = 40
block_size_frames = 40
beam_size = 2
max_decode_len = 4
adapt_epochs = 1
adapt_warmup_steps = 10
bench_updaters = gated
"""


@pytest.fixture
def workdir(tmp_path):
    (tmp_path / "c.cfg").write_text(TINY_CFG)
    assert run_command(["gen-data", "--config", str(tmp_path / "c.cfg"), "--out", str(tmp_path / "data")]) == 0
    return tmp_path


class TestUsage:
    @pytest.mark.parametrize("argv", [[], ["fly"], ["eval", "--hyp", "h.txt"], ["train", "--bogus"],
                                      ["gen-data", "--out", "d", "--seed", "-1"],
                                      ["infer", "--data", "d", "--out", "o", "--checkpoint", "c", "--strategy", "x"]])
    def test_usage_errors_exit_2(self, argv, capsys):
        assert run_command(argv) == 2
        assert "usage:" in capsys.readouterr().err

    def test_subcommands(self):
        text = build_parser().format_help()
        for name in ("gen-data", "train", "adapt", "infer", "eval", "gradcheck", "bench"):
            assert name in text


class TestEval:
    def test_prints_rouge_line(self, tmp_path, capsys):
        (tmp_path / "h.txt").write_text("the cat sat\n")
        (tmp_path / "r.txt").write_text("the cat ate\n")
        assert run_command(["eval", "--hyp", str(tmp_path / "h.txt"), "--ref", str(tmp_path / "r.txt")]) == 0
        assert capsys.readouterr().out == "ROUGE-1 66.67\tROUGE-2 50.00\tROUGE-L 66.67\n"

    def test_line_mismatch(self, tmp_path, capsys):
        (tmp_path / "h.txt").write_text("a\nb\n")
        (tmp_path / "r.txt").write_text("a\n")
        assert run_command(["eval", "--hyp", str(tmp_path / "h.txt"), "--ref", str(tmp_path / "r.txt")]) == 1
        err = capsys.readouterr().err
        assert err.startswith("bass eval: error:") and len(err.strip().splitlines()) == 1

    def test_missing_file(self, tmp_path, capsys):
        assert run_command(["eval", "--hyp", str(tmp_path / "x"), "--ref", str(tmp_path / "y")]) == 1
        assert "does not exist" in capsys.readouterr().err


class TestPipeline:
    def test_gen_data_layout(self, workdir):
        data = workdir / "data"
        assert (data / "vocab.txt").exists()
        for split in ("train", "val", "test"):
            assert (data / split / "manifest.tsv").exists()
        assert len(list((data / "train" / "feats").iterdir())) == 4

    def test_bad_config_line(self, tmp_path, capsys):
        (tmp_path / "bad.cfg").write_text("model_dim = 64\nheads = 3\n")
        assert run_command(["gen-data", "--config", str(tmp_path / "bad.cfg"), "--out", str(tmp_path / "d")]) == 1
        assert "bad.cfg:1,2:" in capsys.readouterr().err

    def test_train_adapt_infer(self, workdir, capsys):
        cfg, data = str(workdir / "c.cfg"), str(workdir / "data")
        assert run_command(["train", "--config", cfg, "--data", data, "--out", str(workdir / "t"), "--mode", "trunc"]) == 0
        assert (workdir / "t" / "model.ckpt").exists()
        assert (workdir / "t" / "train.txt").read_text().startswith("epoch 1 loss ")
        assert run_command(["adapt", "--config", cfg, "--data", data, "--out", str(workdir / "a"),
                            "--base-checkpoint", str(workdir / "t" / "model.ckpt")]) == 0
        # adaptation covers whole 80-frame utterances: 4 utterances x 2 blocks x 2 epochs
        assert "steps 16 " in (workdir / "a" / "train.txt").read_text()
        capsys.readouterr()
        assert run_command(["infer", "--config", cfg, "--data", data, "--out", str(workdir / "i"),
                            "--checkpoint", str(workdir / "a" / "model.ckpt")]) == 0
        line = capsys.readouterr().out.strip()
        assert line.startswith("ROUGE-1 ") and "\tROUGE-L " in line
        ids = (workdir / "i" / "ids.txt").read_text().split()
        assert ids == sorted(ids) and len(ids) == 2
        trace = (workdir / "i" / "trace.txt").read_text().splitlines()
        assert trace[0] == ids[0] and trace[1].startswith("block 1\t") and trace[2].startswith("block 2\t")
        hyp, ref = str(workdir / "i" / "hyp.txt"), str(workdir / "i" / "ref.txt")
        assert run_command(["eval", "--hyp", hyp, "--ref", ref]) == 0
        assert capsys.readouterr().out.strip() == line

    def test_infer_is_reproducible(self, workdir):
        cfg, data = str(workdir / "c.cfg"), str(workdir / "data")
        run_command(["train", "--config", cfg, "--data", data, "--out", str(workdir / "t")])
        for out in ("x", "y"):
            run_command(["infer", "--config", cfg, "--data", data, "--out", str(workdir / out),
                         "--checkpoint", str(workdir / "t" / "model.ckpt"), "--strategy", "standard"])
        assert (workdir / "x" / "hyp.txt").read_bytes() == (workdir / "y" / "hyp.txt").read_bytes()
        assert not (workdir / "x" / "trace.txt").exists()

    def test_missing_checkpoint(self, workdir, capsys):
        assert run_command(["infer", "--config", str(workdir / "c.cfg"), "--data", str(workdir / "data"),
                            "--out", str(workdir / "o"), "--checkpoint", str(workdir / "none.ckpt")]) == 1
        assert "does not exist" in capsys.readouterr().err

    def test_train_rejects_adapt_mode(self, workdir, capsys):
        (workdir / "m.cfg").write_text(TINY_CFG + "mode = bass_adapt\n")
        assert run_command(["train", "--config", str(workdir / "m.cfg"), "--data", str(workdir / "data"),
                            "--out", str(workdir / "t")]) == 1
        assert "adapt subcommand" in capsys.readouterr().err

    def test_bench_smoke(self, workdir, capsys):
        assert run_command(["bench", "--config", str(workdir / "c.cfg"), "--out", str(workdir / "b")]) == 0
        out = capsys.readouterr().out
        assert "gated" in out
        for name in ("trunc.ckpt", "adapt-gated.ckpt", "report.txt", "config.txt"):
            assert (workdir / "b" / name).exists()
