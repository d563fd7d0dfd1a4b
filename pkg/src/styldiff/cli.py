"""Command-line pipeline: gen-data, pretrain, remove-style, finetune, stylize,
evaluate, verify, grid."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import denoiser as dn
from . import imageio, plotting, toyworld
from .config import ConfigError, RunConfig, parse_assignments
from .disentangle import Projector
from .finetune import LatentStore, ProvenanceError, finetune, precompute_latents, stylize
from .metrics import report_lines, ssim, style_distance_gram, style_score
from .removal import DivergenceError, RemovalConfig, remove_style

log = logging.getLogger("styldiff")

SWEEP_T_REMOV = (201, 401, 601, 801)


def _threads(args) -> int:
    if args.threads is not None:
        return args.threads
    env = os.environ.get("STYLDIFF_THREADS")
    return int(env) if env else 1


def _config(args) -> RunConfig:
    over = parse_assignments(args.set)
    if args.seed is not None:
        over["seed"] = str(args.seed)
    over["threads"] = str(_threads(args))
    return RunConfig.resolve(args.config, over)


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_lines(path: Path, lines) -> Path:
    path.write_text("".join(line + "\n" for line in lines))
    return path


def _images_from(paths) -> list[tuple[str, torch.Tensor]]:
    out = []
    for p in paths:
        p = Path(p)
        files = sorted(p.glob("*.png")) if p.is_dir() else [p]
        for f in files:
            out.append((f.stem, imageio.load_png(f)))
    if not out:
        raise SystemExit("no input images found")
    return out


def _load_model(path, cfg: RunConfig) -> dn.DenoiserParams:
    return dn.load(path, expected=cfg.denoiser())


# commands

def cmd_gen_data(args, cfg: RunConfig) -> int:
    out = _out(args)
    n, seed, size = cfg["data.n"], cfg["data.seed"], cfg["denoiser.image_size"]
    if n < 1:
        raise ConfigError("data.n must be >= 1")
    rows = []
    contents = toyworld.gen_content(seed, n, size)
    for i, img in enumerate(contents):
        cid = f"c{i:04d}"
        imageio.save_png(img, out / "content" / f"{cid}.png")
        rows.append((cid, seed, "content", f"index={i}"))
    k = 0
    for kind in toyworld.STYLE_KINDS:
        for j in range(cfg["data.styles_per_kind"]):
            spec = toyworld.random_style(kind, seed * 1000 + j)
            src = k % n
            sid = f"s-{kind}-{j}"
            imageio.save_png(toyworld.apply_style(contents[src], spec), out / "style" / f"{sid}.png")
            rows.append((sid, spec.seed, kind, f"content=c{src:04d};" + spec.param_text()))
            k += 7
    _write_lines(out / "manifest.tsv", toyworld.manifest_lines(rows))
    print(f"wrote {n} contents and {k // 7} styles to {out}")
    return 0


def _load_corpus(data_dir: Path, size: int) -> torch.Tensor:
    files = sorted((data_dir / "content").glob("*.png"))
    if not files:
        raise SystemExit(f"no content images under {data_dir / 'content'}")
    imgs = [imageio.load_png(f) for f in files]
    if any(im.shape[-1] != size for im in imgs):
        raise SystemExit(f"corpus images are not {size}x{size}")
    return torch.stack(imgs).float()


def cmd_pretrain(args, cfg: RunConfig) -> int:
    out = _out(args)
    sched = cfg.schedule()
    if args.data:
        data = _load_corpus(Path(args.data), cfg["denoiser.image_size"])
    else:
        data = torch.stack(toyworld.gen_content(cfg["data.seed"], cfg["data.n"],
                                                cfg["denoiser.image_size"])).float()
    if args.resume:
        dp = _load_model(args.resume, cfg)
        state, extra = dn.load_adam(Path(args.resume).with_suffix(".adam"))
        rng = np.random.default_rng()
        rng.bit_generator.state = extra["rng"]
        done = extra["steps"]
    else:
        dp = dn.init_params(cfg.denoiser())
        state, rng, done = None, np.random.default_rng(cfg["seed"]), 0
    steps = max(cfg["pretrain.steps"] - done, 0) if args.resume else cfg["pretrain.steps"]
    t0 = time.time()
    dp, losses, state = dn.pretrain(dp, data, sched, steps, cfg["pretrain.lr"], cfg["pretrain.batch"],
                                    rng, state, cfg["pretrain.log_every"])
    elapsed = time.time() - t0
    model = out / "model.sdfz"
    dn.save(dp, model)
    dn.save_adam(state, model.with_suffix(".adam"),
                 {"rng": rng.bit_generator.state, "steps": done + steps})
    prev = []
    loss_path = out / "pretrain_loss.tsv"
    if args.resume and loss_path.exists():
        prev = loss_path.read_text().splitlines()[1:]
    lines = ["step\tloss"] + prev + [f"{done + i + 1}\t{v:.8f}" for i, v in enumerate(losses)]
    _write_lines(loss_path, lines)
    if losses:
        plotting.loss_curve([float(x.split("\t")[1]) for x in lines[1:]], out / "pretrain_loss.png")
    (out / "pretrain_meta.json").write_text(json.dumps(
        {"steps": done + steps, "seconds": elapsed, "checksum": dp.checksum()}, indent=1))
    print(f"pretrained {steps} steps in {elapsed:.1f}s -> {model} ({dp.checksum()})")
    return 0


def cmd_remove_style(args, cfg: RunConfig) -> int:
    out = _out(args)
    sched = cfg.schedule()
    rcfg = cfg.removal()
    if args.skip_diffusion:
        rcfg = RemovalConfig(rcfg.T_remov, rcfg.S_for, rcfg.S_rev, rcfg.K_r, True)
    den = None if rcfg.skip_diffusion else dn.Denoiser(_load_model(args.model, cfg), sched)
    if den is None and args.sweep:
        raise SystemExit("--sweep needs the diffusion stage")
    imgs = _images_from(args.inputs)
    values = SWEEP_T_REMOV if args.sweep else (rcfg.T_remov,)
    proj = Projector(cfg["projector.seed"])
    dist_rows = []
    for t_remov in values:
        c = RemovalConfig(t_remov, rcfg.S_for, rcfg.S_rev, rcfg.K_r, rcfg.skip_diffusion)
        batch = torch.stack([im for _, im in imgs]).float()
        res = remove_style(batch, c, den, sched)
        for (name, im), r in zip(imgs, res):
            suffix = f"_T{t_remov}" if args.sweep else ""
            imageio.save_png(r, out / f"{name}_content{suffix}.png")
            d = float((proj(r.double()) - proj(im)).norm())
            dist_rows.append((name, t_remov, d))
    _write_lines(out / "removal_distance.tsv",
                 ["image\tT_remov\tembedding_distance"] + [f"{n}\t{t}\t{d:.8f}" for n, t, d in dist_rows])
    if args.sweep:
        means = [np.mean([d for _, t, d in dist_rows if t == v]) for v in values]
        plotting.sweep_plot(values, means, out / "removal_sweep.png", "T_remov",
                            "mean embedding distance to input")
    print(f"removed style from {len(imgs)} image(s) at T_remov={list(values)} -> {out}")
    return 0


def cmd_finetune(args, cfg: RunConfig) -> int:
    out = _out(args)
    sched = cfg.schedule()
    fcfg = cfg.finetune()
    base = _load_model(args.model, cfg)
    proj = Projector(cfg["projector.seed"])
    style = imageio.load_png(args.style)
    if args.style_content:
        style_c = imageio.load_png(args.style_content)
    else:
        style_c = remove_style(style.float(), cfg.removal(), dn.Denoiser(base, sched), sched)
        imageio.save_png(style_c, out / "style_content.png")
    if args.contents:
        contents = _images_from([args.contents])[:fcfg.N]
    else:
        contents = [(f"c{i:04d}", im) for i, im in
                    enumerate(toyworld.gen_content(cfg["data.seed"] + 1, fcfg.N, cfg["denoiser.image_size"]))]
    photo = RemovalConfig(skip_diffusion=True)
    contents_c = {cid: remove_style(im, photo, None) for cid, im in contents}
    store_path = Path(args.store) if args.store else out / "latents.sdfl"
    store = None
    if store_path.exists():
        from .schedule import make_plan
        store = LatentStore.load(store_path)
        if store.checksum != base.checksum():
            raise ProvenanceError(f"latent store {store_path} was built with denoiser {store.checksum}; "
                                  f"current denoiser is {base.checksum()}")
        plan = make_plan(fcfg.S_for, fcfg.T_trans, sched.T)
        if store.plan.steps != plan.steps or set(contents_c) - set(store.contents):
            store = None
    if store is None:
        store = precompute_latents(contents_c, style_c.float(), fcfg, base, sched)
        store.save(store_path)
    t0 = time.time()
    tuned, flog = finetune(base, store, style, style_c, contents_c, fcfg, proj, sched)
    elapsed = time.time() - t0
    dn.save(tuned, out / "tuned.sdfz")
    _write_lines(out / "finetune_loss.tsv", flog.lines())
    (out / "finetune_meta.json").write_text(json.dumps(
        {**flog.config, "weights": vars(fcfg.weights), "lrs": flog.lrs, "seconds": elapsed,
         "base_checksum": base.checksum(), "tuned_checksum": tuned.checksum()}, indent=1, default=str))
    if flog.rows:
        plotting.finetune_curves(flog, out / "finetune_loss.png")
    print(f"fine-tuned {fcfg.K} epoch(s) in {elapsed:.1f}s -> {out / 'tuned.sdfz'}")
    return 0


def cmd_stylize(args, cfg: RunConfig) -> int:
    out = _out(args)
    sched = cfg.schedule()
    fcfg = cfg.finetune()
    tuned = _load_model(args.model, cfg)
    base = _load_model(args.base, cfg) if args.base else None
    photo = RemovalConfig(skip_diffusion=True)
    t_values = [int(v) for v in args.t_trans.split(",")] if args.t_trans else [fcfg.T_trans]
    n_written = 0
    for name, im in _images_from(args.inputs):
        content_c = remove_style(im.float(), photo, None) if not args.no_luma else im.float()
        for T in t_values:
            tag = f"_T{T}" if args.t_trans else ""
            if args.diverse:
                for k in range(args.diverse):
                    rng = np.random.default_rng([cfg["seed"], k])
                    img = stylize(content_c, tuned, fcfg, sched, rng=rng, T_trans=T)
                    imageio.save_png(img, out / f"{name}_stylized{tag}_div{k}.png")
                    n_written += 1
            else:
                img = stylize(content_c, tuned, fcfg, sched, base=base, T_trans=T)
                imageio.save_png(img, out / f"{name}_stylized{tag}.png")
                n_written += 1
    print(f"wrote {n_written} stylized image(s) to {out}")
    return 0


def cmd_evaluate(args, cfg: RunConfig) -> int:
    """Pairs file: tab-separated ``content style stylized`` image paths per line."""
    out = _out(args)
    proj = Projector(cfg["projector.seed"])
    base = Path(args.pairs).parent
    rows = []
    for line in Path(args.pairs).read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise SystemExit(f"pairs lines need 3 tab-separated paths: {line!r}")
        paths = [p if Path(p).is_absolute() else base / p for p in parts]
        for p in paths:
            if not Path(p).exists():
                raise SystemExit(f"missing file {p}")
        c, s, cs = (imageio.load_png(p) for p in paths)
        cid, sid = Path(parts[0]).stem, Path(parts[1]).stem
        rows += [("ssim_content", cid, sid, ssim(cs, c)),
                 ("style_score", cid, sid, style_score(proj, cs, s)),
                 ("gram_distance", cid, sid, style_distance_gram(proj, cs, s))]
    _write_lines(out / "metrics.tsv", report_lines(rows))
    if rows:
        plotting.metric_bars(rows, out / "metrics.png")
    print(f"evaluated {len(rows) // 3} triple(s) -> {out / 'metrics.tsv'}")
    return 0


def cmd_verify(args, cfg: RunConfig) -> int:
    from . import verify

    out = _out(args)
    results = verify.run_all(full=args.full, model_path=args.model, cache_dir=out / "cache")
    lines = [r.line() for r in results]
    _write_lines(out / "verify.tsv", ["criterion\tstatus\tmeasured\tthreshold\tseconds\tdetail"]
                 + [r.tsv() for r in results])
    for line in lines:
        print(line)
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} passed")
    return 1 if failed else 0


def cmd_grid(args, cfg: RunConfig) -> int:
    imgs = _images_from(args.inputs)
    rows, cols = (int(v) for v in args.layout.lower().split("x"))
    labels = [n for n, _ in imgs] if not args.labels else args.labels.split(",")
    sheet = imageio.contact_sheet([im for _, im in imgs], rows, cols, labels, scale=args.scale)
    path = Path(args.out)
    if path.suffix.lower() != ".png":
        path = path / "grid.png"
    imageio.save_sheet(sheet, path)
    print(f"wrote {rows}x{cols} grid -> {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--threads", type=int, help="torch threads (default $STYLDIFF_THREADS or 1)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="styldiff", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", parents=[common], help="write a toy corpus and manifest")

    s = sub.add_parser("pretrain", parents=[common], help="train the photograph-domain denoiser")
    s.add_argument("--data", help="corpus directory from gen-data (default: regenerate from config)")
    s.add_argument("--resume", help="checkpoint to continue (reads the .adam file next to it)")

    s = sub.add_parser("remove-style", parents=[common], help="extract content images")
    s.add_argument("inputs", nargs="+")
    s.add_argument("--model")
    s.add_argument("--sweep", action="store_true", help=f"T_remov in {SWEEP_T_REMOV}")
    s.add_argument("--skip-diffusion", action="store_true", help="grayscale only (photographs)")

    s = sub.add_parser("finetune", parents=[common], help="fine-tune for one style image")
    s.add_argument("--model", required=True)
    s.add_argument("--style", required=True)
    s.add_argument("--style-content", help="precomputed style content (default: run removal)")
    s.add_argument("--contents", help="directory of content photographs (default: regenerate)")
    s.add_argument("--store", help="latent store path (reused when provenance matches)")

    s = sub.add_parser("stylize", parents=[common], help="stylize content images")
    s.add_argument("inputs", nargs="+")
    s.add_argument("--model", required=True, help="fine-tuned checkpoint")
    s.add_argument("--base", help="base checkpoint used for inversion")
    s.add_argument("--t-trans", help="comma-separated return steps")
    s.add_argument("--diverse", type=int, default=0, help="number of stochastic samples")
    s.add_argument("--no-luma", action="store_true", help="inputs are already style-removed")

    s = sub.add_parser("evaluate", parents=[common], help="metrics over content/style/stylized triples")
    s.add_argument("pairs")

    s = sub.add_parser("verify", parents=[common], help="run the verification suite")
    s.add_argument("--full", action="store_true", help="include training-based criteria")
    s.add_argument("--model", help="pretrained checkpoint for --full (default: train one)")

    s = sub.add_parser("grid", parents=[common], help="contact sheet of images")
    s.add_argument("inputs", nargs="+")
    s.add_argument("--layout", required=True, help="ROWSxCOLS")
    s.add_argument("--labels", help="comma-separated labels (default: file names)")
    s.add_argument("--scale", type=int, default=1)
    return p


COMMANDS = {
    "gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "remove-style": cmd_remove_style,
    "finetune": cmd_finetune, "stylize": cmd_stylize, "evaluate": cmd_evaluate,
    "verify": cmd_verify, "grid": cmd_grid,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = _config(args)
        torch.set_num_threads(cfg["threads"])
        if args.command not in ("grid",):
            cfg.write(_out(args))
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, ProvenanceError, dn.ConfigMismatchError, DivergenceError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
