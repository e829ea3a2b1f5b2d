"""Command line entry point: gen-data, train, sample, bench, check.

Exit codes: 0 success, 1 validation error, 2 check-suite failure, 3 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, from_dict, load_config
from .masks import Rect, TokenLayout, save_mask
from .pcm import GateConfig

EXIT_OK, EXIT_INVALID, EXIT_CHECK_FAILED, EXIT_IO = 0, 1, 2, 3
COMMANDS = ("gen-data", "train", "sample", "bench", "check")
TRAIN_LOG_HEADER = ("step", "loss", "gate_config", "wall_ms")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pcmamba", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", help="JSON run configuration (defaults apply when omitted)")
    ap.add_argument("--seed", type=int, help="overrides training.seed")
    ap.add_argument("--out", help="overrides paths.out_dir")
    ap.add_argument("--gates", help="sampling gates as 'A,M', e.g. 1,0")
    ap.add_argument("--guidance", type=float, help="overrides sampling.guidance")
    ap.add_argument("--checkpoint", help="checkpoint directory for sample (default OUT/checkpoint)")
    ap.add_argument("--quick", action="store_true", help="check: reduced trial counts")
    return ap


def resolve_config(args) -> RunConfig:
    """Config file plus flag overrides, validated before anything runs."""
    cfg = load_config(args.config) if args.config else RunConfig()
    raw = cfg.to_dict()
    if args.seed is not None:
        raw["training"]["seed"] = args.seed
    if args.out is not None:
        raw["paths"]["out_dir"] = args.out
    if args.guidance is not None:
        raw["sampling"]["guidance"] = args.guidance
    if args.gates is not None:
        try:
            raw["sampling"]["gates"] = list(GateConfig.parse(args.gates))
        except ValueError as exc:
            raise ConfigError(f"--gates: {exc}") from None
    return from_dict(raw)


def layout_and_masks(cfg: RunConfig):
    from .diffusion import MaskSet, default_masks

    lay = TokenLayout(cfg.layout.frames, cfg.layout.height, cfg.layout.width, cfg.layout.channels)
    if cfg.layout.mouth_rect is None:
        return lay, default_masks(lay)
    try:
        return lay, MaskSet.from_rects(Rect(*cfg.layout.mouth_rect), Rect(*cfg.layout.face_rect), lay)
    except ValueError as exc:
        raise ConfigError(f"layout: {exc}") from None


def build_model(cfg: RunConfig, layout: TokenLayout):
    from .diffusion import Denoiser

    m = cfg.model
    return Denoiser.init(np.random.default_rng(cfg.training.seed), layout, c=m.c_model,
                         d_state=m.d_state, blocks=m.blocks, d_emb=m.d_emb, d_id=m.d_id,
                         variant=m.variant)


def schedule(cfg: RunConfig):
    from .diffusion import make_schedule

    return make_schedule(cfg.schedule.T, cfg.schedule.beta_min, cfg.schedule.beta_max)


def train_log_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRAIN_LOG_HEADER)
    for r in rows:
        w.writerow((r.step, repr(r.loss), r.gate_config, f"{r.wall_ms:.3f}"))
    return buf.getvalue()


def cmd_gen_data(cfg: RunConfig, out: Path) -> int:
    from .diffusion import gen_synthetic
    from .tnsr import save_manifest

    lay, masks = layout_and_masks(cfg)
    rng = np.random.default_rng(cfg.training.seed)
    data = gen_synthetic(cfg.data.count, lay, rng, masks, cfg.model.d_id, cfg.model.d_emb)
    arrays = {"x0": data.x0, "audio": data.audio, "motion": data.motion,
              "e_audio": data.cond.e_audio, "e_motion": data.cond.e_motion,
              "e_id": data.cond.e_id, "reference": data.cond.reference}
    d = out / "data"
    save_manifest(d, arrays, {"seed": cfg.training.seed, "count": cfg.data.count,
                              "layout": [lay.frames, lay.height, lay.width, lay.channels]})
    for name in ("face", "audio", "motion"):
        save_mask(d / f"mask_{name}.tnsr", getattr(masks, name))
    print(f"wrote {cfg.data.count} samples to {d}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, out: Path) -> int:
    from .diffusion import TrainSettings, train
    from .tnsr import atomic_write_text, save_manifest

    lay, masks = layout_and_masks(cfg)
    model = build_model(cfg, lay)
    t = cfg.training
    settings = TrainSettings(steps=t.steps, batch=t.batch, lr=t.lr, p_uncond=t.p_uncond,
                             seed=t.seed, optimizer=t.optimizer, momentum=t.momentum)
    log = train(model, schedule(cfg), masks, settings)
    save_manifest(out / "checkpoint", {k: v.data for k, v in model.parameters().items()},
                  {"config": cfg.to_dict()})
    atomic_write_text(out / "train_log.csv", train_log_csv(log))
    final = np.mean([r.loss for r in log[-50:]]) if log else float("nan")
    print(f"trained {t.steps} steps, final loss {final:.4f}; checkpoint in {out / 'checkpoint'}")
    return EXIT_OK


def cmd_sample(cfg: RunConfig, out: Path, checkpoint: Path) -> int:
    from .diffusion import ddim_sample, ddim_steps, gen_synthetic, region_control_metrics
    from .nn import load_parameters
    from .tnsr import atomic_write_text, load_manifest, write_tnsr

    gates = cfg.gates.validate()  # before any model work
    if not (checkpoint / "manifest.json").is_file():
        raise CliError(f"no checkpoint at {checkpoint}", EXIT_IO)
    lay, masks = layout_and_masks(cfg)
    model = build_model(cfg, lay)
    arrays, _ = load_manifest(checkpoint)
    try:
        load_parameters(model, arrays)
    except (KeyError, ValueError) as exc:
        raise CliError(f"checkpoint does not match the configured model: {exc}", EXIT_INVALID) from None
    sched = schedule(cfg)
    seed = cfg.training.seed
    ev = gen_synthetic(cfg.sampling.count, lay, np.random.default_rng(10_000 + seed), masks,
                       cfg.model.d_id, cfg.model.d_emb)
    gen = ddim_sample(model, ev.cond.with_gates(gates), sched, ddim_steps(sched, cfg.sampling.ddim_steps),
                      cfg.sampling.guidance, np.random.default_rng(20_000 + seed))
    metrics = region_control_metrics(gen, ev.audio, ev.motion, masks)
    write_tnsr(out / "generated.tnsr", gen)
    body = {"gates": list(gates), "guidance": cfg.sampling.guidance, "count": cfg.sampling.count,
            **metrics.__dict__}
    atomic_write_text(out / "metrics.json", json.dumps(body, indent=2, sort_keys=True) + "\n")
    print(json.dumps(body, sort_keys=True))
    return EXIT_OK


def cmd_bench(cfg: RunConfig, out: Path) -> int:
    from .bench import METHODS, bench_scaling, fit_loglog_slope, write_csv

    b = cfg.bench
    points = bench_scaling(b.lengths, c=b.channels, repeats=b.repeats, chunk=b.chunk,
                           seed=cfg.training.seed)
    write_csv(points, out / "bench.csv")
    for method in METHODS:
        slope, se = fit_loglog_slope([p for p in points if p.method == method])
        print(f"{method}: log-log slope {slope:.3f} +/- {se:.3f}")
    return EXIT_OK


def cmd_check(quick: bool) -> int:
    from .verify import run_all

    results = run_all(quick=quick)
    for r in results:
        print(r.line(), flush=True)
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_CHECK_FAILED if failed else EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        out = Path(cfg.paths.out_dir)
        if args.command == "check":
            return cmd_check(args.quick)
        if args.command == "sample":
            cfg.gates.validate()
            ckpt = Path(args.checkpoint) if args.checkpoint else out / "checkpoint"
            return cmd_sample(cfg, out, ckpt)
        return {"gen-data": cmd_gen_data, "train": cmd_train, "bench": cmd_bench}[args.command](cfg, out)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
