"""Command-line interface.

Exit codes: 0 on success, 1 when the configuration, arguments or input files
are invalid, 2 when a command fails while running. Every output file gets a
``<output>.manifest.json`` sibling recording the inputs (with hashes), the
full configuration, the seed and the toolkit version, which is enough to
re-run the command.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import __version__
from .config import STREAM_MODEL, ConfigError, RunConfig
from .formats import FormatError, read_checkpoint, read_stack, read_volume, write_checkpoint, \
    write_stack, write_volume

log = logging.getLogger("xrfield")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(out, command: str, argv, cfg: RunConfig, inputs=(), extra=None) -> Path:
    out = Path(out)
    doc = {
        "command": command,
        "argv": list(argv),
        "toolkit_version": __version__,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "config_sha256": cfg.digest(),
        "inputs": [{"path": str(p), "sha256": sha256_file(p)} for p in inputs],
        "output": {"path": str(out), "sha256": sha256_file(out) if out.is_file() else None},
    }
    if extra:
        doc.update(extra)
    path = out.with_name(out.name + ".manifest.json")
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def _model_seed(cfg: RunConfig) -> int:
    from .phantom import rng_for
    return int(rng_for(cfg.seed, STREAM_MODEL).integers(2 ** 63))


def _indices(text: str):
    try:
        return [int(t) for t in text.replace(",", " ").split()]
    except ValueError:
        raise UsageError(f"constraint indices must be integers, got {text!r}") from None


# --------------------------------------------------------------------------- commands


def cmd_phantom_gen(args, cfg: RunConfig):
    from .phantom import generate_dataset, generate_phantom
    spec = cfg.phantom_spec()
    n = cfg.doc["phantom"]["n_objects"]
    out = Path(args.out)
    if n == 1:
        vol, _ = generate_phantom(spec)
        write_volume(out, vol)
        write_manifest(out, "phantom-gen", args.argv, cfg)
        return
    out.mkdir(parents=True, exist_ok=True)
    for k, (vol, _) in enumerate(generate_dataset(n, spec, cfg.seed)):
        p = out / f"object{k:04d}.vol"
        write_volume(p, vol)
        write_manifest(p, "phantom-gen", args.argv, cfg, extra={"object_index": k})


def cmd_project(args, cfg: RunConfig):
    from .projector import project_dataset
    vol = read_volume(args.inp)
    p = cfg.doc["projector"]
    stack = project_dataset(vol, cfg.angles(args.angles), n_depth=p["n_depth"],
                            detector=p["detector"], pixel_size=p["pixel_size_m"],
                            noise_sigma=p["noise_sigma"], rng=cfg.noise_rng(),
                            workers=args.workers)
    write_stack(args.out, stack)
    write_manifest(args.out, "project", args.argv, cfg, [args.inp])


def cmd_sart(args, cfg: RunConfig):
    from .sart import sart_reconstruct_stack
    stack = read_stack(args.inp)
    vol = sart_reconstruct_stack(stack, cfg.sart_config())
    write_volume(args.out, vol)
    write_manifest(args.out, "sart", args.argv, cfg, [args.inp])


def _stacks(paths):
    files = []
    for p in paths:
        p = Path(p)
        files.extend(sorted(p.glob("*.prj")) if p.is_dir() else [p])
    if not files:
        raise UsageError("no projection files given")
    return files, [read_stack(f) for f in files]


def cmd_train(args, cfg: RunConfig):
    from .field import FieldModel
    from .trainer import train
    files, dataset = _stacks(args.inp)
    over = {"workers": args.workers}
    if args.iterations is not None:
        over["max_iterations"] = args.iterations
    tc = cfg.train_config(**over)
    grid = cfg.grid()
    model = FieldModel.create(cfg.field_config(), grid, dataset[0].energy, _model_seed(cfg))
    out = Path(args.out)
    log_path = args.log or out.with_name(out.name + ".loss.csv")
    model, hist = train(dataset, tc, model, grid=grid, log_path=log_path,
                        checkpoint_dir=args.checkpoint_dir)
    write_checkpoint(out, model, {"iterations": len(hist.loss),
                                  "final_loss": hist.loss[-1] if hist.loss else None})
    write_manifest(out, "train", args.argv, cfg, files,
                   {"loss_log": str(log_path), "iterations": len(hist.loss)})


def cmd_infer(args, cfg: RunConfig):
    from .trainer import infer
    model, _ = read_checkpoint(args.ckpt)
    stack = read_stack(args.inp)
    idx = _indices(args.constraints)
    vol = infer(model, stack, idx, cfg.grid())
    write_volume(args.out, vol)
    write_manifest(args.out, "infer", args.argv, cfg, [args.ckpt, args.inp],
                   {"constraints": idx})


def cmd_eval(args, cfg: RunConfig):
    from .metrics import evaluate
    cand, ref = read_volume(args.cand), read_volume(args.ref)
    report = evaluate(cand, ref, cfg.ring_mask())
    text = report.to_json()
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")
        write_manifest(args.out, "eval", args.argv, cfg, [args.cand, args.ref])


def cmd_combos(args, cfg: RunConfig):
    from .metrics import combination_study
    model, _ = read_checkpoint(args.ckpt)
    stack = read_stack(args.inp)
    ref = read_volume(args.ref)
    study = combination_study(model, stack, args.k, ref, cfg.ring_mask(), grid=ref.grid,
                              workers=args.workers)
    out = Path(args.out)
    study.write_csv(out)
    summary = out.with_name(out.stem + ".summary.csv")
    study.write_summary_csv(summary)
    write_manifest(out, "combos", args.argv, cfg, [args.ckpt, args.inp, args.ref],
                   {"summary_csv": str(summary), "spacing": study.spacing,
                    "n_entries": len(study)})
    print(f"{len(study)} combinations of {args.k} views; summary in {summary}")


def gradcheck_suite(seed: int = 0, n_samples: int = 100):
    """Finite-difference check of the full render-and-loss pipeline on a miniature model.

    Returns ``(max_rel_err, rows)``.
    """
    from . import nnkit as nn
    from .field import FieldConfig, FieldModel
    from .geometry import GridSpec
    from .nnkit.gradcheck import check_gradients
    from .phantom import PhantomSpec, generate_phantom
    from .projector import project_dataset
    from .trainer import TrainConfig, _draw_object, RaySampler, object_loss

    spec = PhantomSpec.scaled(8, 2.5, seed=seed)
    vol, _ = generate_phantom(spec)
    stack = project_dataset(vol, [0.3, 1.4], n_depth=16)
    fc = FieldConfig(encoding_levels=2, mlp_width=8, shared_blocks=1, head_blocks=1, latent_dim=8,
                     encoder_stages=2, stage_widths=(4, 4))
    model = FieldModel.create(fc, vol.grid, seed=seed)
    rng = np.random.default_rng(seed)
    # perturb biases away from zero so every parameter has a generic gradient
    for name, p in model.params.params.items():
        p += rng.normal(0.0, 0.1, p.shape)
    tc = TrainConfig(rays_per_iter=8, depth_samples=4, constraint_count=1)
    draw = _draw_object(0, stack, RaySampler.from_stack(stack), tc, fc.contrast_channels,
                        vol.grid, rng)

    def loss_fn(tape):
        return object_loss(model, stack, draw)

    rows = check_gradients(loss_fn, model.params, n_samples=n_samples, h=1e-6,
                           rng=np.random.default_rng(seed + 1), floor=1e-8)
    return max(r[4] for r in rows), rows


def cmd_gradcheck(args, cfg: RunConfig):
    worst, rows = gradcheck_suite(cfg.seed)
    report = {"max_relative_error": worst, "tolerance": 1e-4, "n_samples": len(rows),
              "passed": worst <= 1e-4}
    text = json.dumps(report, indent=2)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")
        write_manifest(args.out, "gradcheck", args.argv, cfg)
    if not report["passed"]:
        raise RuntimeError(f"gradient check failed: max relative error {worst:.3g} > 1e-4")


COMMANDS = {
    "phantom-gen": cmd_phantom_gen, "project": cmd_project, "sart": cmd_sart,
    "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval, "combos": cmd_combos,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="run configuration JSON (defaults if omitted)")
    common.add_argument("--seed", type=int, help="overrides the configuration seed")
    common.add_argument("--workers", type=int, default=1, help="threads; 1 is deterministic")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="xrfield", description="Sparse-view X-ray refractive-index reconstruction")
    p.add_argument("--version", action="version", version=f"xrfield {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("phantom-gen", parents=[common], help="generate phantom volume(s)")
    s.add_argument("--out", required=True, help="ONIXVOL1 file, or directory when n_objects > 1")

    s = sub.add_parser("project", parents=[common], help="simulate contrast projections")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--angles", help="'Nxstart:stop' in degrees, endpoints inclusive")
    s.add_argument("--out", required=True)

    s = sub.add_parser("sart", parents=[common], help="SART baseline reconstruction")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)

    s = sub.add_parser("train", parents=[common], help="train the field model")
    s.add_argument("--in", dest="inp", required=True, nargs="+",
                   help="ONIXPRJ1 files or directories of *.prj")
    s.add_argument("--out", required=True, help="final ONIXCKPT1 checkpoint")
    s.add_argument("--log", help="loss log path (default <out>.loss.csv)")
    s.add_argument("--checkpoint-dir")
    s.add_argument("--iterations", type=int, help="stop after this many iterations")

    s = sub.add_parser("infer", parents=[common], help="reconstruct from chosen constraint views")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--constraints", required=True, help="view indices, e.g. '0,2,5'")
    s.add_argument("--out", required=True)

    s = sub.add_parser("eval", parents=[common], help="L2 and DSSIM of a volume vs a reference")
    s.add_argument("--cand", required=True)
    s.add_argument("--ref", required=True)
    s.add_argument("--out", help="write the JSON report here as well")

    s = sub.add_parser("combos", parents=[common], help="score every k-subset of constraints")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--ref", required=True)
    s.add_argument("-k", type=int, required=True)
    s.add_argument("--out", required=True, help="CSV of (subset, l2, dssim)")

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    s.add_argument("--out")
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        if args.workers < 1:
            raise UsageError("--workers must be >= 1")
        cfg = RunConfig.load(args.config) if args.config else RunConfig.defaults()
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as e:
        print(f"error: cannot read configuration: {e}", file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args.argv = argv
    try:
        COMMANDS[args.command](args, cfg)
    except (UsageError, ConfigError, FormatError, FileNotFoundError, IsADirectoryError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except (ValueError, IndexError) as e:
        # argument-level problems detected by the library (bad indices, mismatched grids)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as e:  # noqa: BLE001 - any failure while running is a runtime error
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def replay(manifest_path, out) -> int:
    """Re-run the command recorded in a manifest, writing to ``out``."""
    doc = json.loads(Path(manifest_path).read_text())
    argv = list(doc["argv"])
    with tempfile.TemporaryDirectory() as tmp:
        cfg_path = Path(tmp) / "config.json"
        cfg_path.write_text(json.dumps(doc["config"]))
        cleaned = []
        skip = False
        for i, a in enumerate(argv):
            if skip:
                skip = False
                continue
            if a in ("--config", "--out", "--seed"):
                skip = True
                continue
            if a.startswith(("--config=", "--out=", "--seed=")):
                continue
            cleaned.append(a)
        return main(cleaned + ["--config", str(cfg_path), "--out", str(out)])


if __name__ == "__main__":
    sys.exit(main())
