"""Command-line entry point: ``blurprior <command> ...``.

Exit codes: 0 ok, 1 unexpected failure, 2 configuration/input error, 3 training divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import torch

from . import plotting
from .blur import BlurSpec, DatasetManifest, build_dataset, pattern_stats
from .checkpoint import checkpoint_hash, load_checkpoint, save_checkpoint
from .codec import CodecConfig, bilinear_baseline, train_codec
from .evaluation import (
    cross_matrix,
    evaluate_manifest,
    rank_scores,
    text_table,
    write_report,
)
from .images import list_images, read_image, to_tensor, write_image, write_textures
from .model import codec_checkpoint, model_from_checkpoint
from .motion import MotionNet, patch_dominant_directions, render_overlay
from .pipeline import (
    ConfigError,
    TrainConfig,
    TrainingDiverged,
    deblur,
    run_bpp,
    run_finetune,
    run_mixed,
)
from .semantic import load_external_embeddings

log = logging.getLogger("blurprior")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc


def _load_specs(path) -> list[BlurSpec]:
    raw = _read_json(path)
    raw = raw.get("specs", raw) if isinstance(raw, dict) and "family" not in raw else raw
    raw = [raw] if isinstance(raw, dict) else raw
    try:
        return [BlurSpec.from_dict(d) for d in raw]
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad blur spec in {path}: {exc}") from exc


# --- commands ----------------------------------------------------------------

def cmd_make_textures(args):
    write_textures(args.out, args.count, args.size, args.seed)
    print(f"wrote {args.count} textures to {args.out}")


def cmd_synth(args):
    specs = _load_specs(args.spec)
    captions = _read_json(args.captions) if args.captions else None
    if captions is None and (Path(args.sources) / "captions.json").exists():
        captions = _read_json(Path(args.sources) / "captions.json")
    m = build_dataset(args.out, args.sources, specs, captions, seed=args.seed, workers=args.workers)
    print(f"{len(m.samples)} samples, {len(m.log)} skipped -> {Path(args.out) / 'manifest.json'}")


def _motion_model(path) -> MotionNet:
    ckpt = load_checkpoint(path)
    if any(k.startswith("motion.") for k in ckpt.arrays):
        return model_from_checkpoint(ckpt).motion
    raise ConfigError(f"{path} holds no motion-guidance weights")


def cmd_analyze(args):
    model = _motion_model(args.model) if args.model else None
    manifest = DatasetManifest.load(args.manifest)
    hist = pattern_stats(manifest, use_ground_truth=model is None, model=model, grid=args.grid)
    report = {"manifest": str(args.manifest), "source": "model" if model else "ground_truth",
              **hist.to_dict()}
    if args.model:
        report["ckpt_hash"] = checkpoint_hash(args.model)
    out = Path(args.report)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    rows = [[f"{c:.0f}", n] for c, n in hist.angle_bins if n]
    table = text_table(rows, ["angle_deg", "count"]) + f"mode {hist.mode_angle():.0f} deg, " \
        f"locality {hist.locality_index:.3f}\n"
    out.with_suffix(".txt").write_text(table)
    print(table, end="")
    if not args.no_plot:
        plotting.plot_pattern_histogram(hist, out.with_suffix(".png"), title=Path(args.manifest).parent.name)
    if args.overlay:
        if model is None:
            raise ConfigError("--overlay needs --model")
        od = Path(args.overlay)
        od.mkdir(parents=True, exist_ok=True)
        for s in manifest.samples[:args.overlay_count]:
            img = read_image(manifest.resolve(s.blurred_path))
            grid = patch_dominant_directions(model.predict(img), args.grid)
            write_image(od / f"{s.id}_motion.png", render_overlay(img, grid, scale=2.0))
        print(f"overlays -> {od}")


def cmd_train_codec(args):
    paths = []
    for src in args.images:
        p = Path(src)
        if p.suffix == ".json" or (p / "manifest.json").exists():
            m = DatasetManifest.load(p if p.suffix == ".json" else p / "manifest.json")
            paths += [m.resolve(s.sharp_path) for s in m.samples]
        else:
            paths += list_images(p)
    if not paths:
        raise ConfigError("no training images found")
    imgs = torch.cat([to_tensor(read_image(p)) for p in paths])
    cfg = CodecConfig(f=args.f, c_lat=args.c_lat, width=args.width, max_width=args.max_width,
                      in_channels=imgs.shape[1])
    torch.manual_seed(args.seed)
    codec, losses = train_codec(imgs, cfg, steps=args.steps, batch_size=args.batch_size, lr=args.lr,
                                seed=args.seed, log_every=max(1, args.steps // 10))
    meta = {"provenance": [{"stage": "codec", "steps": args.steps, "seed": args.seed,
                            "n_images": len(paths), "final_loss": losses[-1]}]}
    save_checkpoint(codec_checkpoint(codec, meta), args.out)
    with torch.no_grad():
        sample = imgs[:64]
        rec = codec.decode(codec.encode(sample))
        mse = ((rec - sample) ** 2).mean().item()
        base = ((bilinear_baseline(sample, cfg.f) - sample) ** 2).mean().item()
    print(f"codec -> {args.out}  train psnr {10 * np.log10(1 / mse):.2f} dB "
          f"(bilinear {10 * np.log10(1 / base):.2f} dB)")


def _train(args, runner):
    cfg = TrainConfig.load(args.config)
    if args.out:
        cfg.checkpoint_out = args.out
    if args.iterations:
        cfg.iterations = args.iterations
    if not cfg.checkpoint_out:
        raise ConfigError("no output checkpoint (config 'checkpoint_out' or --out)")
    if runner is run_finetune:
        init = args.init or cfg.checkpoint_in
        if not init:
            raise ConfigError("finetune needs --init CKPT")
        ckpt = run_finetune(cfg, load_checkpoint(init))
    else:
        ckpt = runner(cfg)
    losses = ckpt.meta["run_log"]["losses"]
    print(f"{cfg.stage}: {len(losses)} iterations, final loss {losses[-1]:.4f} -> {cfg.checkpoint_out}")
    if not args.no_plot:
        plotting.plot_loss_curve(losses, Path(cfg.checkpoint_out).with_suffix(".loss.png"), title=cfg.stage)


def cmd_deblur(args):
    model = model_from_checkpoint(load_checkpoint(args.ckpt))
    caption = args.caption
    if args.embeddings:
        # the input file stem is the record id; a missing record falls back to the null caption
        sid = Path(args.input).stem
        wanted = SimpleNamespace(samples=[SimpleNamespace(id=sid, caption="")])
        caption = load_external_embeddings(args.embeddings, wanted, model.cfg.embedder)[0][sid]
    result = deblur(read_image(args.input), model, caption, args.steps, args.seed)
    write_image(args.out, result)
    print(f"restored -> {args.out}")


def _named(spec: str) -> dict[str, str]:
    """'a=path,b=path' or 'path,path' (names from the parent directory)."""
    out = {}
    for item in filter(None, spec.split(",")):
        name, _, path = item.rpartition("=")
        p = Path(path)
        name = name or (p.parent.name if p.name == "manifest.json" else p.stem)
        if name in out:
            raise ConfigError(f"duplicate name {name!r}; use name=path")
        out[name] = path
    return out


def cmd_eval(args):
    ckpts = _named(args.ckpt)
    manifests = _named(args.manifests)
    out = Path(args.report)
    if len(ckpts) == 1 and len(manifests) == 1:
        (name, path), (_, mpath) = next(iter(ckpts.items())), next(iter(manifests.items()))
        model = model_from_checkpoint(load_checkpoint(path))
        rep = evaluate_manifest(model, mpath, steps=args.steps, seed=args.seed, model_id=name,
                                provenance={"ckpt_hash": checkpoint_hash(path)}, limit=args.limit)
        write_report(rep, out)
        agg = rep.aggregate
        table = text_table([[k, v] for k, v in sorted(agg.items())], ["metric", "value"])
        out.with_suffix(".txt").write_text(table)
        print(table, end="")
        if not args.no_plot:
            plotting.plot_metric_bars({name: agg["mean_psnr_db"]}, out.with_suffix(".png"),
                                      baseline=agg["mean_input_psnr_db"], title="dashed: blurred input")
        return
    matrix, reports = cross_matrix(ckpts, manifests, steps=args.steps, seed=args.seed, limit=args.limit)
    results = {}
    for r in matrix.rows:
        results[r] = {}
        for c in matrix.cols:
            agg = reports[(r, c)].aggregate
            results[r][f"{c}/psnr"] = agg["mean_psnr_db"]
            results[r][f"{c}/ssim"] = agg["mean_ssim"]
    directions = {k: "higher" for k in next(iter(results.values()))}
    ranks = rank_scores(results, directions) if len(results) > 1 else {}
    payload = {
        "schema_version": "1",
        "matrix": matrix.to_dict(),
        "reports": [reports[k].to_dict() for k in sorted(reports)],
        "rank_scores": {m: {"score": s.score, "per_metric": s.per_metric} for m, s in ranks.items()},
        "provenance": {"ckpt_hash": {n: checkpoint_hash(p) for n, p in ckpts.items()}, "seed": args.seed},
    }
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    text = matrix.to_text()
    if ranks:
        text += "\n" + text_table([[m, s.score] for m, s in sorted(ranks.items(), key=lambda x: x[1].score)],
                                  ["model", "mean_rank"])
    out.with_suffix(".txt").write_text(text)
    print(text, end="")
    if not args.no_plot:
        plotting.plot_cross_matrix(matrix, out.with_suffix(".png"))


# --- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="blurprior", description="Blur-pattern pretraining for latent-diffusion deblurring.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("make-textures", help="write synthetic sharp textures (+ captions.json)")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=500)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_make_textures)

    s = sub.add_parser("synth", help="blur source images with a list of blur specs")
    s.add_argument("--sources", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--spec", required=True, help="JSON blur spec or list of specs")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--captions", help="JSON map of image stem to caption")
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("analyze", help="orientation/magnitude/locality statistics of a dataset")
    s.add_argument("--manifest", required=True)
    s.add_argument("--model", help="checkpoint with motion weights (default: ground truth)")
    s.add_argument("--report", required=True)
    s.add_argument("--grid", type=int, default=10)
    s.add_argument("--overlay", metavar="DIR", help="write motion-vector overlays here")
    s.add_argument("--overlay-count", type=int, default=8)
    s.add_argument("--no-plot", action="store_true")
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("train-codec", help="pretrain the frozen latent codec")
    s.add_argument("--images", nargs="+", required=True, help="image directories or manifests")
    s.add_argument("--out", required=True)
    s.add_argument("--steps", type=int, default=2000)
    s.add_argument("--batch-size", type=int, default=16)
    s.add_argument("--lr", type=float, default=2e-3)
    s.add_argument("--f", type=int, default=8)
    s.add_argument("--c-lat", type=int, default=8)
    s.add_argument("--width", type=int, default=32)
    s.add_argument("--max-width", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_train_codec)

    for name, runner, help_ in (("train-bpp", run_bpp, "stage 1: blur-pattern pretraining"),
                                ("finetune", run_finetune, "stage 2: fine-tune on the target mixture"),
                                ("train-mixed", run_mixed, "single-stage mixed baseline")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", required=True)
        if runner is run_finetune:
            s.add_argument("--init", help="checkpoint to start from")
        s.add_argument("--out", help="override checkpoint_out")
        s.add_argument("--iterations", type=int, help="override iterations")
        s.add_argument("--no-plot", action="store_true")
        s.set_defaults(func=lambda a, r=runner: _train(a, r))

    s = sub.add_parser("deblur", help="restore one image")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--out", required=True)
    g = s.add_mutually_exclusive_group()
    g.add_argument("--caption")
    g.add_argument("--embeddings", help="JSON-lines embeddings; record id = input file stem")
    s.add_argument("--steps", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_deblur)

    s = sub.add_parser("eval", help="score checkpoints on manifests (cross matrix when several)")
    s.add_argument("--ckpt", required=True, help="CKPT or name=CKPT,name=CKPT")
    s.add_argument("--manifests", required=True, help="A,B,... or name=A,name=B")
    s.add_argument("--report", required=True)
    s.add_argument("--steps", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--limit", type=int)
    s.add_argument("--no-plot", action="store_true")
    s.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception:  # noqa: BLE001 - anything else is an internal failure
        log.exception("unexpected failure")
        return EXIT_FAIL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
