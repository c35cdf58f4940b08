"""Command-line surface: training, evaluation, checks, dumps, benchmarks.

Exit codes: 0 success, 1 usage error, 2 data error, 3 check failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import dsp
from .audio import AudioError, read_wav, write_wav
from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, RunConfig, load_config, parse_config_text
from .gradcheck import registry, run_gradcheck
from .metrics import MetricReport, evaluate_pair, rtf_bench, write_metric_csv
from .nn import Autoencoder, MaskSpec, ModelError, build_mask
from .train import Trainer, default_stages

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_CHECK = 3


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(EXIT_USAGE, f"usage error: {message}")


def _seed_list(raw: str) -> list[int]:
    return [int(x) for x in raw.split(",") if x.strip()]


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    path = Path(args.config)
    if not path.exists():
        raise CliError(EXIT_DATA, f"config file not found: {path}")
    try:
        cfg = load_config(path)
    except ConfigError as e:
        raise CliError(EXIT_DATA, str(e))
    if args.seed is not None:
        from dataclasses import replace

        cfg = replace(cfg, seed=args.seed)
    wanted = {int(s) for s in args.stages.split(",")} if args.stages else {1, 2, 3}
    stages = [s for s in default_stages(cfg) if s.stage in wanted and s.steps > 0]
    trainer = Trainer(cfg, out_dir=args.out)
    trainer.run(stages)
    final = trainer.history[-1] if trainer.history else {}
    print(f"trained {trainer.global_step} steps; final total={final.get('total', float('nan')):.6g}")
    print(f"checkpoint: {Path(args.out) / 'checkpoint.nac'}")
    return EXIT_OK


def _model_from_checkpoint(path) -> tuple[Autoencoder, RunConfig]:
    try:
        ckpt = load_checkpoint(path)
    except (OSError, CheckpointError) as e:
        raise CliError(EXIT_DATA, f"cannot load checkpoint: {e}")
    cfg = parse_config_text(ckpt.meta.get("config", ""))
    model = Autoencoder(np.random.default_rng(0), cfg.model_config())
    params = dict(ckpt.params)
    for name, arr in ckpt.ema.items():  # evaluate with EMA weights when present
        if name.startswith("ema."):
            params[name[4:]] = arr
    for name, p in model.named_params():
        if name not in params:
            raise CliError(EXIT_DATA, f"checkpoint missing parameter {name}")
        p.assign(params[name])
    for name, _ in model.named_state():
        if name in ckpt.state:
            model.set_state(name, ckpt.state[name])
    return model, cfg


def cmd_eval(args) -> int:
    ref_dir = Path(args.ref)
    if not ref_dir.is_dir():
        raise CliError(EXIT_DATA, f"reference directory not found: {ref_dir}")
    refs = sorted(ref_dir.glob("*.wav"))
    if not refs:
        raise CliError(EXIT_DATA, f"no .wav files in {ref_dir}")
    model = None
    if args.checkpoint:
        model, _ = _model_from_checkpoint(args.checkpoint)
    est_dir = Path(args.est) if args.est else None
    if model is None and est_dir is None:
        raise CliError(EXIT_USAGE, "eval needs --est or --checkpoint")

    rows: list[tuple[str, MetricReport]] = []
    unpaired = []
    for ref_path in refs:
        try:
            ref = read_wav(ref_path)
        except AudioError as e:
            raise CliError(EXIT_DATA, str(e))
        if model is not None:
            rng = np.random.default_rng(0)
            z, n = model.encode(ref.samples.astype(np.float32), rng, "infer")
            est = model.decode(z, rng, "infer", length=n).data
        else:
            est_path = est_dir / ref_path.name
            if not est_path.exists():
                unpaired.append(ref_path.name)
                continue
            est = read_wav(est_path).samples
        rows.append((ref_path.name, evaluate_pair(ref.samples, est, ref.sample_rate)))
    if unpaired:
        raise CliError(EXIT_DATA, "unpaired reference files: " + ", ".join(unpaired))
    write_metric_csv(args.out, rows)
    print(f"wrote {len(rows)} rows + aggregate to {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    names = None if args.scope in (None, "all") else [args.scope]
    if names and names[0] not in registry():
        raise CliError(EXIT_USAGE, f"unknown loss name {names[0]!r}; known: {', '.join(sorted(registry()))}")
    rows = run_gradcheck(names, tol=args.tol)
    width = max(len(n) for n, _, _ in rows)
    for name, err, ok in rows:
        print(f"{name:<{width}s}  {err:10.3e}  {'pass' if ok else 'FAIL'}")
    if not all(ok for _, _, ok in rows):
        print(f"gradcheck failed (tolerance {args.tol})", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def cmd_mask_dump(args) -> int:
    try:
        if args.kind == "sliding_window":
            spec = MaskSpec("sliding_window", window=args.window)
        else:
            spec = MaskSpec("chunked_midpoint_shift", chunk=args.chunk)
    except ModelError as e:
        raise CliError(EXIT_USAGE, str(e))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    wrote = []
    for layer in range(1, args.depth + 1):
        mask = build_mask(spec, args.length, layer, args.depth)
        allow = (mask == 0).astype(int)
        grid = "\n".join("".join("#" if v else "." for v in row) for row in allow)
        base = f"mask_L{args.length}_layer{layer}"
        (out / f"{base}.txt").write_text(grid + "\n")
        np.savetxt(out / f"{base}.csv", allow, fmt="%d", delimiter=",")
        wrote.append(base)
        if spec.kind == "sliding_window":
            break  # every layer shares the same mask
    print(f"wrote {len(wrote)} mask(s) to {out}")
    return EXIT_OK


def cmd_chirp(args) -> int:
    try:
        buf = dsp.chirp(args.duration, args.sample_rate, args.f_start, args.octaves, args.amplitude_dbfs)
    except dsp.DspError as e:
        raise CliError(EXIT_DATA, str(e))
    if args.stereo:
        from .audio import AudioBuffer

        buf = AudioBuffer(buf.sample_rate, np.vstack([buf.samples, buf.samples]))
    write_wav(args.out, buf, encoding=args.encoding)
    print(f"wrote {buf.duration:.3f}s sweep to {args.out}")
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.checkpoint:
        model, cfg = _model_from_checkpoint(args.checkpoint)
        sr = cfg.sample_rate
        label = f"checkpoint {args.checkpoint}"
    elif args.preset == "identity":
        model, sr, label = None, args.sample_rate, "identity preset"
    else:
        cfg = RunConfig()
        model = Autoencoder(np.random.default_rng(0), cfg.model_config())
        sr = cfg.sample_rate
        label = "toy preset (untrained weights)"

    if model is None:
        process = lambda audio: audio
    else:
        def process(audio):
            rng = np.random.default_rng(0)
            z, n = model.encode(audio, rng, "infer")
            return model.decode(z, rng, "infer", length=n)

    result = rtf_bench(process, args.duration, sr, args.repeats)
    print(f"bench: {label}, {args.duration:.1f}s audio, {args.repeats} repeats")
    for i, t in enumerate(result["timings"]):
        print(f"  run {i + 1}: {t * 1e3:9.2f} ms")
    print(f"median RTF: {result['rtf']:.1f}")
    print("note: desk-scale CPU timing; not comparable to published accelerator numbers")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .train import ablation_harness, format_ablation_table, table_grid

    cfg = load_config(args.config) if args.config else RunConfig(
        segment_samples=512, dim=16, depth=2, latent_dim=16,
        mrstft_ffts=(64,), use_left_right=False,
        velocity_dim=16, velocity_depth=1, critic_dim=16, critic_depth=1,
    )
    specs = table_grid(cfg)
    if args.configs:
        keep = {s.strip().upper() for s in args.configs.split(",")}
        specs = [s for s in specs if s.name in keep]
        if not specs:
            raise CliError(EXIT_USAGE, f"no ablation config matches {args.configs!r}")
    rows = ablation_harness(cfg, specs, seeds=_seed_list(args.seeds), steps=args.steps,
                            progress=lambda r: print(f"  done {r['config']} seed {r['seed']}"))
    table = format_ablation_table(rows)
    print(table)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.txt").write_text(table + "\n")
    import csv as _csv

    with open(out / "ablation.csv", "w", newline="") as fh:
        writer = _csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    print(f"wrote {out / 'ablation.csv'}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    p = _Parser(prog="nacodec", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run the staged toy training schedule")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--stages", default=None, help="comma list, e.g. 1 or 1,2,3")
    t.add_argument("--seed", type=int, default=None)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="reconstruction metrics over paired WAV files")
    e.add_argument("--ref", required=True)
    e.add_argument("--est", default=None)
    e.add_argument("--checkpoint", default=None)
    e.add_argument("--out", required=True)
    e.set_defaults(fn=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference checks for registered losses")
    g.add_argument("--scope", default="all")
    g.add_argument("--tol", type=float, default=1e-4)
    g.set_defaults(fn=cmd_gradcheck)

    m = sub.add_parser("mask-dump", help="write attention masks as text grids and CSV")
    m.add_argument("--kind", choices=["sliding_window", "chunked_midpoint_shift"], required=True)
    m.add_argument("--length", type=int, required=True)
    m.add_argument("--window", type=int, default=0)
    m.add_argument("--chunk", type=int, default=0)
    m.add_argument("--depth", type=int, default=1)
    m.add_argument("--out", required=True)
    m.set_defaults(fn=cmd_mask_dump)

    c = sub.add_parser("chirp", help="synthesise a log-frequency sweep WAV")
    c.add_argument("--duration", type=float, default=1.0)
    c.add_argument("--sample-rate", type=int, default=48000)
    c.add_argument("--f-start", type=float, default=100.0)
    c.add_argument("--octaves", type=float, default=2.0)
    c.add_argument("--amplitude-dbfs", type=float, default=-6.0)
    c.add_argument("--encoding", choices=["pcm16", "pcm24", "float32"], default="float32")
    c.add_argument("--stereo", action="store_true")
    c.add_argument("--out", required=True)
    c.set_defaults(fn=cmd_chirp)

    b = sub.add_parser("bench", help="encode+decode real-time factor")
    b.add_argument("--checkpoint", default=None)
    b.add_argument("--preset", choices=["toy", "identity"], default="toy")
    b.add_argument("--duration", type=float, default=1.0)
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--sample-rate", type=int, default=8000)
    b.set_defaults(fn=cmd_bench)

    a = sub.add_parser("ablate", help="bottleneck/auxiliary-loss comparison grid")
    a.add_argument("--config", default=None)
    a.add_argument("--out", required=True)
    a.add_argument("--steps", type=int, default=2000)
    a.add_argument("--seeds", default="0,1,2")
    a.add_argument("--configs", default=None, help="subset, e.g. B,C")
    a.set_defaults(fn=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except (ConfigError, AudioError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
