"""Command line entry point: ``mitbench {gen-data,train,reconstruct,eval,run}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import baselines, gan, pipeline
from .dataset import generate, load, split_datasets, unflatten

log = logging.getLogger("mitbench")

ALIASES = {"ccnn": "mitnet", "mitnet": "mitnet", "fcn": "fcn", "sae": "sae", "nr": "nr"}


def _methods(spec: str | None, default) -> tuple[str, ...]:
    if not spec:
        return tuple(default)
    out = []
    for name in spec.split(","):
        name = name.strip().lower()
        if name not in ALIASES:
            raise ValueError(f"unknown method {name!r}; choose from {sorted(ALIASES)}")
        out.append(ALIASES[name])
    return tuple(out)


def _config(args) -> pipeline.ExperimentConfig:
    return pipeline.load_config(args.config, args.seed, args.paper_scale)


def _require_data(path) -> None:
    if path is None or not (Path(path) / "manifest.json").exists():
        raise FileNotFoundError(f"no dataset found at {path}")


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    ds = generate(cfg.dataset, args.out)
    print(f"wrote {len(ds)} samples to {args.out} (sha256 {ds.manifest['sha256'][:12]})")
    return 0


def cmd_train(args) -> int:
    _require_data(args.data)
    cfg = _config(args)
    splits = split_datasets(load(args.data))
    out = Path(args.out)
    method = args.method.lower()
    if method == "gan":
        methods = _methods(args.condition_methods, cfg.methods)
        models = {m: pipeline.load_reconstructor(m, args.checkpoints) for m in methods}
        cfg.methods = methods
        conds, truths, counts = pipeline.gan_training_set(cfg, models, splits["train"])
        G, _, hist = gan.train_gan(conds, truths, cfg.gan, time_budget_s=args.time_budget)
        out.mkdir(parents=True, exist_ok=True)
        gan.save_gan(out / pipeline.CHECKPOINTS["gan"], G, {"condition_counts": counts})
        pipeline._loss_csv(out / "gan_losses.csv", hist.rows)
    else:
        pipeline.train_method(ALIASES.get(method, method), cfg, splits, out)
    (out / f"provenance_train_{method}.json").write_text(
        json.dumps(pipeline.provenance(cfg, {"data": str(args.data)}), indent=1, sort_keys=True))
    print(f"checkpoint written to {out}")
    return 0


def read_frame(path: str | Path) -> np.ndarray:
    """A 16x16 complex frame from .npy, or a 16x32 real text table (real | imag)."""
    p = Path(path)
    if p.suffix == ".npy":
        f = np.load(p)
        if np.iscomplexobj(f):
            return f.astype(np.complex128)
        return unflatten(f).astype(np.complex128)
    delim = "," if p.suffix == ".csv" else None
    return unflatten(np.loadtxt(p, delimiter=delim)).astype(np.complex128)


def cmd_reconstruct(args) -> int:
    cfg = _config(args)
    method = _methods(args.method, ["mitnet"])[0]
    frame = read_frame(args.frame)
    model = pipeline.load_reconstructor(method, args.checkpoints)
    vec = pipeline.reconstruct_vectors(method, model, frame[None], cfg.nr)[0]
    img = pipeline.render(vec[None])[0]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    np.savetxt(out / f"{method}_vector.txt", vec)
    gan.write_pgm(out / f"{method}_render.pgm", img)
    gan.write_pgm(out / f"{method}_mask.pgm", (img >= 0.5).astype(float))
    if args.enhance:
        G = gan.load_gan(args.enhance)
        enhanced = gan.enhance(G, img)
        gan.write_pgm(out / f"{method}_enhanced.pgm", enhanced)
        gan.write_pgm(out / f"{method}_enhanced_mask.pgm", (enhanced >= 0.5).astype(float))
    print(f"images written to {out}")
    return 0


def cmd_eval(args) -> int:
    _require_data(args.data)
    cfg = _config(args)
    cfg.methods = _methods(args.method, cfg.methods)
    test = split_datasets(load(args.data))["test"]
    models = {m: pipeline.load_reconstructor(m, args.checkpoints) for m in cfg.methods}
    G = gan.load_gan(args.enhance) if args.enhance else None
    _, agg = pipeline.evaluate(cfg, models, G, test, Path(args.out))
    (Path(args.out) / "provenance.json").write_text(
        json.dumps(pipeline.provenance(cfg, {"data": str(args.data)}), indent=1, sort_keys=True))
    _print_report(agg)
    return 0


def cmd_run(args) -> int:
    cfg = _config(args)
    data = args.data or str(Path(args.out) / "data")
    agg = pipeline.run_experiment(cfg, data, args.out, gan_time_budget_s=args.time_budget)
    _print_report(agg)
    return 0


def _print_report(agg: list[dict]) -> None:
    for r in agg:
        print(f"{r['method']:7s} {r['shape_class']:8s} enhanced={r['enhanced']} "
              f"IoU={r['mean_iou']:6.2f}% CD={r['mean_cd']:6.2f}px n={r['n']}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mitbench", description="MIT reconstruction workbench")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("--config", help="experiment config JSON (defaults: desk scale)")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--paper-scale", action="store_true", help="paper-scale dataset and widths")
        if data:
            sp.add_argument("--data", help="dataset directory")

    sp = sub.add_parser("gen-data", help="simulate the synthetic dataset")
    common(sp, data=False)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train ccnn, fcn, sae or gan")
    common(sp)
    sp.add_argument("--method", required=True, choices=["ccnn", "mitnet", "fcn", "sae", "gan"])
    sp.add_argument("--out", required=True, help="checkpoint directory")
    sp.add_argument("--checkpoints", help="reconstructor checkpoints (gan condition source)")
    sp.add_argument("--condition-methods", help="comma list of gan condition sources")
    sp.add_argument("--time-budget", type=float, default=None, help="gan wall-clock cap, seconds")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("reconstruct", help="reconstruct one frame to images")
    common(sp, data=False)
    sp.add_argument("--method", default="mitnet")
    sp.add_argument("--checkpoints", help="directory holding the method checkpoint")
    sp.add_argument("--frame", required=True, help=".npy complex frame or 16x32 real table")
    sp.add_argument("--enhance", help="GAN checkpoint file")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_reconstruct)

    sp = sub.add_parser("eval", help="evaluate methods on the test split")
    common(sp)
    sp.add_argument("--method", help="comma list (default: all)")
    sp.add_argument("--checkpoints")
    sp.add_argument("--enhance", help="GAN checkpoint file")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("run", help="end-to-end: data, training, GAN, evaluation")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--time-budget", type=float, default=None, help="gan wall-clock cap, seconds")
    sp.set_defaults(func=cmd_run)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (FileNotFoundError, KeyError, ValueError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
