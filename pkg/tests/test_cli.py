import io

import numpy as np
import pytest

from miamind.cli import build_parser, run
from miamind.data_io import load_checkpoint
from miamind.mia_attention import read_pgm


def call(*argv):
    out = io.StringIO()
    status = run(list(argv), out)
    return status, out.getvalue()


def test_params_audit_rows():
    status, text = call("params", "--variant", "mia")
    assert status == 0
    assert "mia_audit layer=mia1 C=16 r=16 hidden=1 params=99" in text
    assert "mia_audit layer=mia2 C=32 r=16 hidden=2 params=212" in text
    lines = dict(l.split("=", 1) for l in text.splitlines() if l.startswith(("total", "attention")))
    assert int(lines["attention_params"]) == 311
    assert "conv1,conv3x3,448" in text


def test_params_variant_none():
    status, text = call("params", "--variant", "none", "--task", "cifar")
    assert status == 0 and "attention_params=0" in text and "disabled" in text


def test_zero_epochs_is_domain_error(capsys):
    status, _ = call("train", "--task", "synth-cls", "--epochs", "0")
    assert status == 1
    assert "epochs" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [["frobnicate"], ["train", "--bogus"], ["train", "--variant", "xx"], []])
def test_usage_errors_exit_2(argv):
    assert call(*argv)[0] == 2


def test_help_lists_defaults(capsys):
    assert run(["train", "--help"]) == 0
    text = " ".join(capsys.readouterr().out.split())
    for frag in ("training epochs (default: 10)", "(default: 0.01)", "batch size (default: 16)"):
        assert frag in text


def test_train_eval_export(tmp_path):
    ckpt = tmp_path / "m.ckpt"
    status, text = call("train", "--epochs", "1", "--n", "32", "--out", str(ckpt))
    assert status == 0
    assert text.splitlines()[0].startswith("epoch=1 step=2 lr=")
    assert (tmp_path / "m.ckpt.log").read_text().startswith("epoch=1")
    assert (tmp_path / "m.ckpt.png").stat().st_size > 0
    assert load_checkpoint(ckpt).variant == "mia"

    status, text = call("eval", "--ckpt", str(ckpt), "--n", "32")
    assert status == 0 and text.startswith("accuracy=")

    out = tmp_path / "attn"
    status, text = call("export-attn", "--ckpt", str(ckpt), "--n", "32", "--input", "3", "--out", str(out))
    assert status == 0
    wc = np.loadtxt(out / "mia1_wc.txt")
    assert wc.shape == (16,) and np.all((wc > 0) & (wc < 1))
    assert read_pgm(out / "mia1_ws.pgm").shape == (16, 16)
    assert read_pgm(out / "mia2_A_c31.pgm").shape == (8, 8)
    assert (out / "mia2.png").exists()


def test_export_rejects_bad_index(tmp_path):
    ckpt = tmp_path / "m.ckpt"
    call("train", "--epochs", "1", "--n", "16", "--out", str(ckpt), "--no-figures")
    assert call("export-attn", "--ckpt", str(ckpt), "--n", "16", "--input", "99", "--out", str(tmp_path))[0] == 1


def test_eval_missing_checkpoint():
    assert call("eval", "--ckpt", "/nonexistent/x.ckpt")[0] == 1


def test_segmentation_train(tmp_path):
    status, text = call("train", "--task", "synth-seg", "--epochs", "1", "--n", "16",
                        "--out", str(tmp_path / "s.ckpt"), "--no-figures")
    assert status == 0 and "dice=" in text
    assert call("train", "--task", "synth-seg", "--loss", "cross-entropy", "--epochs", "1")[0] == 1


def test_dice_onehot_mode(tmp_path):
    status, _ = call("train", "--loss", "dice-onehot", "--epochs", "1", "--n", "16",
                     "--out", str(tmp_path / "d.ckpt"), "--no-figures")
    assert status == 0


def test_ablate_table_and_files(tmp_path):
    status, text = call("ablate", "--seeds", "1", "--epochs", "1", "--n", "16", "--out-dir", str(tmp_path))
    assert status == 0
    lines = text.splitlines()
    assert lines[0] == "variant,seed,params,accuracy,precision,recall,f1,dice"
    assert [l.split(",")[0] for l in lines[1:]] == ["mia", "se_only", "none"] * 2
    assert (tmp_path / "ablation.csv").read_text().splitlines()[1:] == lines[1:]
    assert (tmp_path / "ablation.png").stat().st_size > 0


def test_flows_task(tmp_path):
    rng = np.random.default_rng(0)
    rows = ["Flow Duration, Fwd Packets,Label"]
    for i in range(40):
        y = i % 2
        rows.append(f"{rng.normal(3 * y, 1):.6f},{rng.normal(0, 1):.6f},{'DoS' if y else 'BENIGN'}")
    rows.append("1,abc,BENIGN")
    csv = tmp_path / "flows.csv"
    csv.write_text("\n".join(rows) + "\n")
    status, text = call("train", "--task", "flows", "--csv", str(csv), "--epochs", "2",
                        "--out", str(tmp_path / "f.ckpt"), "--no-figures")
    assert status == 0 and "averaging=binary" in text
    assert call("train", "--task", "flows")[0] == 1


def test_cifar_task_from_fixture(tmp_path, monkeypatch):
    rng = np.random.default_rng(1)
    for name in ["test_batch.bin"] + [f"data_batch_{i}.bin" for i in range(1, 6)]:
        recs = b"".join(bytes([int(rng.integers(0, 10))]) + rng.integers(0, 256, 3072, dtype=np.uint8).tobytes()
                        for _ in range(4))
        (tmp_path / name).write_bytes(recs)
    monkeypatch.setenv("MIA_DATA_DIR", str(tmp_path))
    status, text = call("train", "--task", "cifar", "--epochs", "1", "--n", "8",
                        "--out", str(tmp_path / "c.ckpt"), "--no-figures")
    assert status == 0 and text.count("epoch=") == 1
    monkeypatch.setenv("MIA_DATA_DIR", str(tmp_path / "missing"))
    assert call("train", "--task", "cifar", "--epochs", "1")[0] == 1


def test_gradcheck_verb():
    status, text = call("gradcheck")
    assert status == 0
    assert "gradcheck passed" in text
    for op in ("conv2d", "max_pool", "softmax_ce", "dice_loss", "mia C=8 H=W=7"):
        assert op in text


def test_parser_verbs():
    sub = build_parser()._subparsers._group_actions[0].choices
    assert set(sub) == {"train", "eval", "gradcheck", "ablate", "params", "export-attn"}
