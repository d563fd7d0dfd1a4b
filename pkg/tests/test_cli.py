import json

import numpy as np
import pytest
import torch

from styldiff import denoiser as dn
from styldiff import imageio, toyworld
from styldiff.cli import main
from styldiff.config import ConfigError, RunConfig

TINY = ["denoiser.image_size=16", "denoiser.base_width=8", "denoiser.time_embed_dim=8",
        "data.n=4", "data.styles_per_kind=1", "pretrain.steps=4", "pretrain.batch=2",
        "pretrain.log_every=2", "removal.S_for=3", "removal.S_rev=3", "removal.K_r=1",
        "finetune.T_trans=101", "finetune.S_for=3", "finetune.S_rev=2", "finetune.K=1",
        "finetune.K_s=1", "finetune.N=2"]


def run(*args, extra=()):
    argv = list(args)
    for s in TINY + list(extra):
        argv += ["--set", s]
    return main(argv)


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("gen-data", "--out", str(root / "data")) == 0
    assert run("pretrain", "--out", str(root / "pre"), "--data", str(root / "data")) == 0
    return root


def test_gen_data_layout(work):
    data = work / "data"
    assert len(list((data / "content").glob("*.png"))) == 4
    assert len(list((data / "style").glob("*.png"))) == 4
    rows = toyworld.parse_manifest(data / "manifest.tsv")
    assert len(rows) == 8
    contents = {r["id"]: r for r in rows if r["kind"] == "content"}
    for r in rows:
        if r["kind"] == "content":
            expect = toyworld.rebuild(r, 16)
            got = imageio.load_png(data / "content" / f"{r['id']}.png")
        else:
            src = toyworld.rebuild(contents[r["params"]["content"]], 16)
            expect = toyworld.rebuild(r, 16, src)
            got = imageio.load_png(data / "style" / f"{r['id']}.png")
        assert np.array_equal(imageio.to_bytes(expect), imageio.to_bytes(got))
    assert (data / "resolved_config.txt").exists()


def test_gen_data_rejects_empty(tmp_path, capsys):
    assert run("gen-data", "--out", str(tmp_path), extra=["data.n=0"]) == 2
    assert "data.n" in capsys.readouterr().err


def test_unknown_config_key(tmp_path, capsys):
    assert run("gen-data", "--out", str(tmp_path), extra=["nope.key=1"]) == 2
    assert "nope.key" in capsys.readouterr().err
    with pytest.raises(ConfigError):
        RunConfig.resolve(overrides={"finetune.preset": "fancy"})


def test_config_file_and_presets(tmp_path):
    f = tmp_path / "run.cfg"
    f.write_text("# comment\nfinetune.preset = paper\n\nfinetune.K=2\n")
    cfg = RunConfig.resolve(f, {"finetune.N": "3"})
    assert (cfg["finetune.N"], cfg["finetune.base_lr"], cfg["finetune.K"]) == (3, 4e-6, 2)
    again = tmp_path / "again.cfg"
    again.write_text(cfg.dump())
    assert RunConfig.resolve(again) == cfg


def test_threads_from_env(tmp_path, monkeypatch):
    monkeypatch.setenv("STYLDIFF_THREADS", "2")
    assert run("gen-data", "--out", str(tmp_path)) == 0
    assert "threads=2" in (tmp_path / "resolved_config.txt").read_text()
    assert run("gen-data", "--out", str(tmp_path), "--threads", "1") == 0
    assert "threads=1" in (tmp_path / "resolved_config.txt").read_text()


def test_pretrain_outputs(work):
    pre = work / "pre"
    meta = json.loads((pre / "pretrain_meta.json").read_text())
    assert meta["steps"] == 4
    assert meta["checksum"] == dn.load(pre / "model.sdfz").checksum()
    lines = (pre / "pretrain_loss.tsv").read_text().splitlines()
    assert lines[0] == "step\tloss" and len(lines) == 5
    assert (pre / "pretrain_loss.png").exists()


def test_pretrain_zero_steps_is_init(tmp_path):
    assert run("pretrain", "--out", str(tmp_path), extra=["pretrain.steps=0"]) == 0
    got = dn.load(tmp_path / "model.sdfz")
    init = dn.init_params(dn.DenoiserConfig(16, 8, 2, 8, 0))
    assert got.checksum() == init.checksum()


def test_pretrain_resume_matches_straight_run(work, tmp_path):
    half, full = tmp_path / "half", tmp_path / "full"
    assert run("pretrain", "--out", str(half), "--data", str(work / "data"), extra=["pretrain.steps=2"]) == 0
    assert run("pretrain", "--out", str(half), "--data", str(work / "data"),
               "--resume", str(half / "model.sdfz")) == 0
    assert run("pretrain", "--out", str(full), "--data", str(work / "data")) == 0
    assert dn.load(half / "model.sdfz").checksum() == dn.load(full / "model.sdfz").checksum()
    assert len((half / "pretrain_loss.tsv").read_text().splitlines()) == 5


def test_load_rejects_mismatched_config(work, tmp_path, capsys):
    code = run("stylize", str(work / "data" / "content"), "--model", str(work / "pre" / "model.sdfz"),
               "--out", str(tmp_path), extra=["denoiser.base_width=16"])
    assert code == 2
    assert "error" in capsys.readouterr().err


def test_remove_style_skip_is_luma(work, tmp_path):
    src = work / "data" / "style"
    assert run("remove-style", str(src), "--skip-diffusion", "--out", str(tmp_path)) == 0
    for f in sorted(src.glob("*.png")):
        out = imageio.load_png(tmp_path / f"{f.stem}_content.png")
        assert torch.equal(out[0], out[1]) and torch.equal(out[1], out[2])
    lines = (tmp_path / "removal_distance.tsv").read_text().splitlines()
    assert len(lines) == 1 + 4


def test_remove_style_sweep(work, tmp_path):
    src = work / "data" / "style" / "s-stripes-0.png"
    assert run("remove-style", str(src), "--sweep", "--model", str(work / "pre" / "model.sdfz"),
               "--out", str(tmp_path), extra=["removal.K_r=0"]) == 0
    for t in (201, 401, 601, 801):
        assert (tmp_path / f"s-stripes-0_content_T{t}.png").exists()
    assert len((tmp_path / "removal_distance.tsv").read_text().splitlines()) == 5
    assert (tmp_path / "removal_sweep.png").exists()


def test_remove_style_divergence_is_reported(work, tmp_path, capsys):
    # a 4-step model is far from trained, so the sample leaves the pixel range
    src = work / "data" / "style" / "s-stripes-0.png"
    assert run("remove-style", str(src), "--model", str(work / "pre" / "model.sdfz"),
               "--out", str(tmp_path), extra=["removal.T_remov=801"]) == 2
    assert "left [-1, 1]" in capsys.readouterr().err


@pytest.fixture(scope="module")
def tuned(work):
    out = work / "ft"
    style = work / "data" / "style" / "s-stripes-0.png"
    assert run("finetune", "--model", str(work / "pre" / "model.sdfz"), "--style", str(style),
               "--out", str(out), extra=["removal.skip_diffusion=true"]) == 0
    return out


def test_finetune_outputs(work, tuned):
    meta = json.loads((tuned / "finetune_meta.json").read_text())
    assert meta["base_checksum"] == dn.load(work / "pre" / "model.sdfz").checksum()
    assert meta["tuned_checksum"] == dn.load(tuned / "tuned.sdfz").checksum()
    assert meta["lrs"] == pytest.approx([1e-4])
    lines = (tuned / "finetune_loss.tsv").read_text().splitlines()
    # S_rev=2 is a single reverse step: one SR row, then one SD row per content
    assert len(lines) == 1 + 1 + 2
    for name in ("latents.sdfl", "style_content.png", "finetune_loss.png"):
        assert (tuned / name).exists()


def test_finetune_reuses_store(work, tuned):
    before = (tuned / "latents.sdfl").read_bytes()
    style = work / "data" / "style" / "s-stripes-0.png"
    assert run("finetune", "--model", str(work / "pre" / "model.sdfz"), "--style", str(style),
               "--style-content", str(tuned / "style_content.png"), "--out", str(tuned)) == 0
    assert (tuned / "latents.sdfl").read_bytes() == before


def test_stylize_deterministic(work, tuned, tmp_path):
    content = work / "data" / "content" / "c0000.png"
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert run("stylize", str(content), "--model", str(tuned / "tuned.sdfz"), "--out", str(d)) == 0
    assert (a / "c0000_stylized.png").read_bytes() == (b / "c0000_stylized.png").read_bytes()


def test_stylize_diverse_and_sweep(work, tuned, tmp_path):
    content = work / "data" / "content" / "c0000.png"
    model = str(tuned / "tuned.sdfz")
    assert run("stylize", str(content), "--model", model, "--diverse", "2", "--out", str(tmp_path)) == 0
    d0 = imageio.load_png(tmp_path / "c0000_stylized_div0.png")
    d1 = imageio.load_png(tmp_path / "c0000_stylized_div1.png")
    assert not torch.equal(d0, d1)
    assert run("stylize", str(content), "--model", model, "--t-trans", "101,201,301,401,501",
               "--out", str(tmp_path)) == 0
    assert len(list(tmp_path.glob("c0000_stylized_T*.png"))) == 5


def test_evaluate_self_pair(work, tmp_path):
    c = work / "data" / "content" / "c0001.png"
    s = work / "data" / "style" / "s-blocks-0.png"
    pairs = tmp_path / "pairs.tsv"
    pairs.write_text(f"# content style stylized\n{c}\t{s}\t{c}\n")
    assert run("evaluate", str(pairs), "--out", str(tmp_path / "e1")) == 0
    assert run("evaluate", str(pairs), "--out", str(tmp_path / "e2")) == 0
    text = (tmp_path / "e1" / "metrics.tsv").read_text()
    assert text == (tmp_path / "e2" / "metrics.tsv").read_text()
    rows = [l.split("\t") for l in text.splitlines()[1:]]
    assert [r[0] for r in rows] == ["ssim_content", "style_score", "gram_distance"]
    assert float(rows[0][3]) == pytest.approx(1.0, abs=1e-9)


def test_evaluate_missing_file(tmp_path):
    pairs = tmp_path / "pairs.tsv"
    pairs.write_text("a.png\tb.png\tc.png\n")
    with pytest.raises(SystemExit, match="missing"):
        main(["evaluate", str(pairs), "--out", str(tmp_path)])


def test_grid(work, tmp_path):
    one = work / "data" / "content" / "c0000.png"
    assert main(["grid", str(one), "--layout", "1x1", "--out", str(tmp_path / "g.png")]) == 0
    sheet = imageio.load_png(tmp_path / "g.png")
    assert sheet.shape[1] > 16 and sheet.shape[2] >= 16
    big = tmp_path / "big.png"
    imageio.save_png(torch.zeros(3, 32, 32), big)
    assert main(["grid", str(one), str(big), "--layout", "1x2", "--out", str(tmp_path)]) == 2


def test_png_byte_round_trip(tmp_path):
    b = np.random.default_rng(0).integers(0, 256, (8, 8, 3), dtype=np.uint8)
    assert np.array_equal(imageio.to_bytes(imageio.from_bytes(b)), b)
    imageio.save_png(imageio.from_bytes(b), tmp_path / "x.png")
    assert np.array_equal(imageio.to_bytes(imageio.load_png(tmp_path / "x.png")), b)
