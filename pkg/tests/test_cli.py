import math
import os

import pytest

from dda.cli import main, resolve_config, ConfigError
from dda.evaluation import EvalReport
from dda.text import read_lines, write_lines
from dda.toy import ToyConfig, make_data

SMALL = ["emb_dim=8", "hidden_dim=8", "num_layers=1", "batch_size=16"]


def run(capsys, command, out, *sets, config=None):
    argv = [command, "--out-dir", str(out)]
    for s in sets:
        argv += ["--set", s]
    if config:
        argv += ["--config", str(config)]
    code = main(argv)
    return code, capsys.readouterr().err


def report(out, name):
    return EvalReport.parse(read_lines(os.path.join(out, "reports", name)))


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    data = make_data(ToyConfig(seed=3, n_parallel=40, n_mono=40, n_test=6, n_dev=6))
    tok = data.vocab.token

    def text(seqs):
        return [" ".join(tok(t) for t in s) for s in seqs]

    data.vocab.save(d / "vocab.txt")
    write_lines(d / "out.src", text(s for s, _ in data.pairs_out))
    write_lines(d / "out.tgt", text(y for _, y in data.pairs_out))
    write_lines(d / "in.src", text(s for s, _ in data.pairs_in[:20]))
    write_lines(d / "in.tgt", text(y for _, y in data.pairs_in[:20]))
    write_lines(d / "mono_in.txt", text(data.mono_in))
    write_lines(d / "mono_out.txt", text(data.mono_out))
    write_lines(d / "test.src", text(s for s, _ in data.test_in))
    write_lines(d / "test.tgt", text(y for _, y in data.test_in))
    return d


@pytest.fixture(scope="module")
def models(workdir):
    w = workdir
    common = SMALL + [f"vocab={w / 'vocab.txt'}", "epochs=2"]
    paths = {}
    for name, mono in (("lm_in", "mono_in.txt"), ("lm_out", "mono_out.txt")):
        argv = ["train-lm", "--out-dir", str(w / name), "--set", f"train={w / mono}"]
        for s in common:
            argv += ["--set", s]
        assert main(argv) == 0
        paths[name] = w / name / "checkpoints" / "lm.ckpt"
    argv = ["train-nmt", "--out-dir", str(w / "nmt"), "--set", f"train_src={w / 'out.src'}",
            "--set", f"train_tgt={w / 'out.tgt'}"]
    for s in common:
        argv += ["--set", s]
    assert main(argv) == 0
    paths["nmt"] = w / "nmt" / "checkpoints" / "nmt.ckpt"
    return paths


def test_show_defaults_lists_every_key(capsys):
    assert main(["translate", "--show-defaults"]) == 0
    out = capsys.readouterr().out
    assert "beam_size=5" in out and "checkpoint=<required>" in out and "coverage_beta=0.0" in out


@pytest.mark.parametrize("argv, code", [
    (["translate", "--set", "bogus=1"], 2),
    (["translate"], 2),
    (["translate", "--set", "checkpoint=x", "--set", "input=y", "--set", "beam_size=five"], 2),
    (["no-such-command"], 2),
    (["translate", "--set", "checkpoint=/nonexistent.ckpt", "--set", "input=/nonexistent.txt"], 3),
    (["grad-check", "--set", "group=everything"], 2),
    (["translate", "--set", "checkpoint=x", "--set", "input=y", "--set", "beta=nan"], 2),
])
def test_error_paths_exit_with_one_line(tmp_path, capsys, argv, code):
    assert main(argv + ["--out-dir", str(tmp_path / "r")]) == code
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith(f"error code={code} kind=")


def test_config_file_then_overrides_then_seed(tmp_path):
    cfg_file = tmp_path / "a.cfg"
    write_lines(cfg_file, ["# comment", "checkpoint=a.ckpt", "input = in.txt", "beam_size=3", "seed=5"])
    cfg = resolve_config("translate", [str(cfg_file)], ["beam_size=7"], None)
    assert cfg["beam_size"] == 7 and cfg["input"] == "in.txt" and cfg["seed"] == 5
    assert resolve_config("translate", [str(cfg_file)], [], 9)["seed"] == 9
    write_lines(cfg_file, ["no equals sign"])
    with pytest.raises(ConfigError):
        resolve_config("translate", [str(cfg_file)], [], None)


def test_resolved_config_and_run_layout(tmp_path, capsys):
    code, _ = run(capsys, "grad-check", tmp_path / "g", "group=primitives")
    assert code == 0
    for sub in ("checkpoints", "decodes", "reports", "data", "logs"):
        assert (tmp_path / "g" / sub).is_dir()
    resolved = read_lines(tmp_path / "g" / "config.resolved")
    assert resolved[0] == "# command=grad-check"
    assert "group=primitives" in resolved and "seed=0" in resolved and "max_coords=6" in resolved
    lines = read_lines(tmp_path / "g" / "reports" / "grad_check.txt")
    assert lines and all(line.endswith("ok=true") for line in lines)


def test_kind_mismatch_is_a_data_error(tmp_path, capsys, workdir, models):
    code, err = run(capsys, "translate", tmp_path / "t", f"checkpoint={models['lm_in']}",
                    f"input={workdir / 'test.src'}")
    assert code == 3 and "needs an nmt checkpoint" in err


def test_zero_beta_reproduces_plain_decoding_bytes(tmp_path, capsys, workdir, models):
    base = [f"checkpoint={models['nmt']}", f"input={workdir / 'test.src'}", "beam_size=3"]
    assert run(capsys, "translate", tmp_path / "none", *base, "scores=true")[0] == 0
    for mode in ("lm-shallow", "dda-shallow"):
        out = tmp_path / mode
        code, _ = run(capsys, "translate", out, *base, f"fusion={mode}", "beta=0", f"lm_in={models['lm_in']}",
                      f"lm_out={models['lm_out']}", "scores=true")
        assert code == 0
        for name in ("output.txt", "scores.txt"):
            assert (out / "decodes" / name).read_bytes() == (tmp_path / "none" / "decodes" / name).read_bytes()


def test_translate_is_deterministic_and_dumps_attention(tmp_path, capsys, workdir, models):
    sets = [f"checkpoint={models['nmt']}", f"input={workdir / 'test.src'}", "fusion=dda-shallow", "beta=0.5",
            f"lm_in={models['lm_in']}", f"lm_out={models['lm_out']}", "attention=true", "coverage_beta=0.2"]
    for name in ("a", "b"):
        assert run(capsys, "translate", tmp_path / name, *sets)[0] == 0
    for f in ("output.txt", "attention.txt"):
        assert (tmp_path / "a" / "decodes" / f).read_bytes() == (tmp_path / "b" / "decodes" / f).read_bytes()
    src_lens = [len(s.split()) for s in read_lines(workdir / "test.src")]
    for line in read_lines(tmp_path / "a" / "decodes" / "attention.txt"):
        sent, _, *weights = line.split()
        i = int(sent.split("=")[1])
        assert len(weights) == src_lens[i]
        assert abs(sum(map(float, weights)) - 1.0) < 1e-5


def test_training_twice_gives_identical_checkpoints(tmp_path, capsys, workdir):
    sets = SMALL + [f"train={workdir / 'mono_in.txt'}", f"vocab={workdir / 'vocab.txt'}", "epochs=1"]
    for name in ("a", "b"):
        assert run(capsys, "train-lm", tmp_path / name, *sets)[0] == 0
    a = (tmp_path / "a" / "checkpoints" / "lm.ckpt").read_bytes()
    assert a == (tmp_path / "b" / "checkpoints" / "lm.ckpt").read_bytes()
    assert run(capsys, "train-lm", tmp_path / "c", *sets, "seed=1")[0] == 0
    assert a != (tmp_path / "c" / "checkpoints" / "lm.ckpt").read_bytes()
    rep = report(tmp_path / "a", "train.txt")
    assert float(rep["final_loss"]) < float(rep["initial_loss"])


def test_deep_fusion_train_and_decode(tmp_path, capsys, workdir, models):
    code, _ = run(capsys, "train-fusion", tmp_path / "f", f"nmt={models['nmt']}", f"lm_in={models['lm_in']}",
                  f"lm_out={models['lm_out']}", f"train_src={workdir / 'in.src'}", f"train_tgt={workdir / 'in.tgt'}",
                  f"copy_mono={workdir / 'mono_in.txt'}", "epochs=1", "batch_size=16")
    assert code == 0
    ckpt = tmp_path / "f" / "checkpoints" / "fusion.ckpt"
    rep = report(tmp_path / "f", "train.txt")
    assert rep["lm_frozen"] == "true"
    base = [f"checkpoint={ckpt}", f"input={workdir / 'test.src'}", "fusion=deep", "beam_size=2"]
    code, _ = run(capsys, "translate", tmp_path / "d", *base, f"fusion_lms={models['lm_out']},{models['lm_in']}")
    assert code == 0
    assert len(read_lines(tmp_path / "d" / "decodes" / "output.txt")) == len(read_lines(workdir / "test.src"))
    # the gate order is checked against the recorded LM digests
    code, err = run(capsys, "translate", tmp_path / "e", *base, f"fusion_lms={models['lm_in']},{models['lm_out']}")
    assert code == 3
    code, _ = run(capsys, "translate", tmp_path / "g", *base, f"fusion_lms={models['lm_out']}")
    assert code == 3


def test_evaluate_identity_and_bootstrap(tmp_path, capsys, workdir):
    ref = workdir / "test.tgt"
    empty = tmp_path / "empty.txt"
    write_lines(empty, [""] * len(read_lines(ref)))
    code, _ = run(capsys, "evaluate", tmp_path / "e", f"hyp={ref}", f"ref={ref}", f"hyp_b={empty}",
                  "bootstrap_samples=200", f"freq_in={workdir / 'mono_in.txt'}", f"freq_out={workdir / 'mono_out.txt'}")
    assert code == 0
    rep = report(tmp_path / "e", "eval.txt")
    assert float(rep["bleu"]) == 100.0 and float(rep["bleu_b"]) == 0.0
    assert float(rep["bootstrap_p"]) < 0.01
    assert math.isfinite(float(rep["ae"])) and math.isfinite(float(rep["aa"]))
    f1 = read_lines(tmp_path / "e" / "reports" / "f1.txt")
    assert f1 and all(line.split()[1] == "1.000000" for line in f1)
    code, _ = run(capsys, "evaluate", tmp_path / "x", f"hyp={workdir / 'out.tgt'}", f"ref={ref}")
    assert code == 3


def test_sweep_table_has_one_row_per_grid_value(tmp_path, capsys, workdir, models):
    code, _ = run(capsys, "sweep-beta", tmp_path / "s", f"checkpoint={models['nmt']}",
                  f"input={workdir / 'test.src'}", f"ref={workdir / 'test.tgt'}", "beam_size=2")
    assert code == 0
    rows = read_lines(tmp_path / "s" / "reports" / "sweep.txt")
    assert rows[0] == "# coverage_beta bleu"
    assert [r.split()[0] for r in rows[1:]] == ["0.00", "0.05", "0.10", "0.15", "0.20", "0.25", "0.30"]
    assert all(0.0 <= float(r.split()[1]) <= 100.0 for r in rows[1:])
    assert len(list((tmp_path / "s" / "decodes").glob("output.cov*.txt"))) == 7
    assert run(capsys, "sweep-beta", tmp_path / "t", f"checkpoint={models['nmt']}", f"input={workdir / 'test.src'}",
               f"ref={workdir / 'test.tgt'}", "grid=0.1,-1")[0] == 2


def test_copy_augmentation_marks_provenance(tmp_path, capsys, workdir):
    code, _ = run(capsys, "augment-copy", tmp_path / "c", f"mono={workdir / 'mono_in.txt'}",
                  f"train_src={workdir / 'in.src'}", f"train_tgt={workdir / 'in.tgt'}")
    assert code == 0
    d = tmp_path / "c" / "data"
    src, tgt, prov = (read_lines(d / f"train.{x}") for x in ("src", "tgt", "provenance"))
    n_base, mono = len(read_lines(workdir / "in.src")), read_lines(workdir / "mono_in.txt")
    assert len(src) == len(tgt) == len(prov) == n_base + len(mono)
    assert src[n_base:] == tgt[n_base:] == mono
    assert set(prov[n_base:]) == {"copied"} and "copied" not in prov[:n_base]


def test_back_translation_with_memorised_reverse_model(tmp_path, capsys):
    fwd = ["a b", "c d e", "b a c", "e e d", "d"]
    rev = ["x y", "z w v", "y x z", "v v w", "w"]
    write_lines(tmp_path / "rev.src", fwd)
    write_lines(tmp_path / "rev.tgt", rev)
    code, _ = run(capsys, "train-nmt", tmp_path / "r", f"train_src={tmp_path / 'rev.src'}",
                  f"train_tgt={tmp_path / 'rev.tgt'}", "emb_dim=8", "hidden_dim=8", "num_layers=1",
                  "batch_size=5", "epochs=300", "lr=0.01", "seed=1")
    assert code == 0
    mono = ["a b", "e e d", "d", "q q"]  # the last line is all unknown words
    write_lines(tmp_path / "mono.txt", mono)
    code, _ = run(capsys, "augment-backtranslate", tmp_path / "bt",
                  f"reverse={tmp_path / 'r' / 'checkpoints' / 'nmt.ckpt'}", f"mono={tmp_path / 'mono.txt'}",
                  "max_decode_len=8")
    assert code == 0
    d = tmp_path / "bt" / "data"
    src, tgt, prov = (read_lines(d / f"train.{x}") for x in ("src", "tgt", "provenance"))
    rep = report(tmp_path / "bt", "augment.txt")
    assert len(src) == len(mono) - int(rep["skipped"])
    assert tgt == [m for m in mono if m in tgt] and set(prov) == {"back-translated"}
    assert src[:3] == ["x y", "v v w", "w"]
