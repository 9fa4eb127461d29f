"""Command-line entry point binding the library into reproducible runs.

Every subcommand resolves its full configuration up front, writes its outputs
and then a ``manifest.json`` next to them recording the command, resolved
config, seed, input paths and the SHA-256 of every artifact. Runs with the
same manifest ``run`` section produce identical output hashes.

Exit codes: 0 success, 2 argument errors (argparse), 3 bad configuration or
usage, 4 missing inputs, 5 malformed data files, 1 anything unexpected.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import replace

import numpy as np

from .errors import (CheckpointError, ConfigurationError, PetctsegError,
                     UsageError, VolumeFormatError)
from .gradient_suite import run_gradient_suite
from .metrics import (binarize, evaluate_case, extract_surface, mean_report,
                      write_report_csv)
from .model import predict_case
from .phantom import PhantomSpec, gen_phantom
from .preprocess import preprocess_case
from .trainer import (ablation_harness, config_from_dict, config_to_dict,
                      crossval_split, load_checkpoint, save_checkpoint,
                      train, write_ablation_csv)
from .runtime import tune_allocator
from .volume import (Volume, list_case_ids, read_case, write_case,
                     write_volume)

EXIT_OK = 0
EXIT_CONFIG = 3
EXIT_MISSING = 4
EXIT_FORMAT = 5


def _sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_manifest(out_dir, command, config, seed, inputs, outputs,
                    started):
    manifest = {
        "run": {
            "command": command,
            "config": config,
            "seed": seed,
            "inputs": inputs,
        },
        "outputs": {os.path.relpath(p, out_dir): _sha256(p)
                    for p in sorted(outputs)},
        "wall_clock_s": round(time.time() - started, 3),
        "created_unix": int(started),
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")
    return path


def _load_json(path, what):
    if not os.path.exists(path):
        raise FileNotFoundError(f"{what} file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{what} file {path} is not valid JSON: {exc}")


def _phantom_spec_from_dict(data):
    allowed = set(PhantomSpec.__dataclass_fields__)
    unknown = set(data) - allowed
    if unknown:
        raise ConfigurationError(f"unknown phantom spec keys: {sorted(unknown)}")
    for key, value in list(data.items()):
        if isinstance(value, list):
            data[key] = tuple(value)
    return PhantomSpec(**data)


def _case_files(root, case_id):
    return [os.path.join(root, case_id, f"{n}.vol.{e}")
            for n in ("ct", "pet", "mask") for e in ("json", "raw")]


def _load_cases(data_dir):
    if not os.path.isdir(data_dir):
        raise FileNotFoundError(f"data directory not found: {data_dir}")
    ids = list_case_ids(data_dir)
    if not ids:
        raise FileNotFoundError(f"no cases found under {data_dir}")
    return [read_case(data_dir, cid) for cid in ids]


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_phantom(args):
    started = time.time()
    spec_dict = _load_json(args.spec, "phantom spec") if args.spec else {}
    if args.seed is not None:
        spec_dict["seed"] = args.seed
    spec = _phantom_spec_from_dict(spec_dict)
    os.makedirs(args.out, exist_ok=True)
    outputs = []
    for i in range(args.count):
        case = gen_phantom(replace(spec, seed=spec.seed + i),
                           case_id=f"case{i:03d}")
        write_case(case, args.out)
        outputs.extend(_case_files(args.out, case.case_id))
    _write_manifest(args.out, "gen-phantom",
                    {"spec": _spec_dict(spec), "count": args.count},
                    spec.seed, {"spec_file": args.spec}, outputs, started)
    print(f"wrote {args.count} cases to {args.out}")
    return EXIT_OK


def _spec_dict(spec):
    out = {}
    for name in PhantomSpec.__dataclass_fields__:
        value = getattr(spec, name)
        out[name] = list(value) if isinstance(value, tuple) else value
    return out


def cmd_preprocess(args):
    started = time.time()
    cases = _load_cases(args.data)
    spacing = tuple(float(s) for s in args.spacing.split(","))
    dims = tuple(int(d) for d in args.dims.split(","))
    if len(spacing) != 3 or len(dims) != 3:
        raise ConfigurationError("--spacing and --dims need three values")
    os.makedirs(args.out, exist_ok=True)
    outputs = []
    for case in cases:
        processed = preprocess_case(case, spacing, dims)
        write_case(processed, args.out)
        outputs.extend(_case_files(args.out, case.case_id))
    _write_manifest(args.out, "preprocess",
                    {"target_spacing_mm": list(spacing),
                     "target_dims": list(dims)},
                    None, {"data": args.data}, outputs, started)
    print(f"preprocessed {len(cases)} cases into {args.out}")
    return EXIT_OK


def _resolved_train_config(args):
    data = _load_json(args.config, "train config") if args.config else {}
    cfg = config_from_dict(data)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def cmd_train(args):
    started = time.time()
    cfg = _resolved_train_config(args)
    cases = _load_cases(args.data)
    splits = crossval_split([c.case_id for c in cases], cfg.folds, cfg.seed)
    if not 0 <= args.fold < cfg.folds:
        raise ConfigurationError(f"--fold must lie in [0, {cfg.folds})")
    train_ids, test_ids = splits[args.fold]
    by_id = {c.case_id: c for c in cases}
    os.makedirs(args.out, exist_ok=True)

    resume = load_checkpoint(args.resume) if args.resume else None
    log_path = os.path.join(args.out, "train_log.csv")
    result = train([by_id[i] for i in train_ids], [by_id[i] for i in test_ids],
                   cfg, resume_from=resume, log_path=log_path,
                   verbose=args.verbose)

    outputs = [log_path]
    final_stem = os.path.join(args.out, "checkpoint_final")
    save_checkpoint(result.final, final_stem)
    outputs += [final_stem + ".ckpt.json", final_stem + ".ckpt.bin"]
    best = result.best or result.final
    best_stem = os.path.join(args.out, "checkpoint_best")
    save_checkpoint(best, best_stem)
    outputs += [best_stem + ".ckpt.json", best_stem + ".ckpt.bin"]

    _write_manifest(args.out, "train",
                    {"train": config_to_dict(cfg), "fold": args.fold,
                     "resume": bool(args.resume)},
                    cfg.seed, {"data": args.data, "resume": args.resume},
                    outputs, started)
    dsc = result.final.best_dsc
    print(f"trained {cfg.epochs} epochs; best test DSC "
          f"{dsc if dsc is not None else 'n/a'}")
    return EXIT_OK


def cmd_eval(args):
    started = time.time()
    ckpt = load_checkpoint(args.checkpoint)
    cases = _load_cases(args.data)
    params = ckpt.param_tensors()
    reports = []
    for case in sorted(cases, key=lambda c: c.case_id):
        prob = predict_case(params, ckpt.config.model, case)
        prob_vol = Volume(prob, case.mask.spacing_mm, "MASK")
        reports.append(evaluate_case(prob_vol, case.mask,
                                     case_id=case.case_id))
    os.makedirs(args.out, exist_ok=True)
    report_path = os.path.join(args.out, "metrics.csv")
    write_report_csv(reports, report_path)
    _write_manifest(args.out, "eval",
                    {"train": config_to_dict(ckpt.config)}, ckpt.config.seed,
                    {"checkpoint": args.checkpoint, "data": args.data},
                    [report_path], started)
    mean = mean_report(reports)
    print(f"evaluated {len(reports)} cases; mean DSC {mean.dsc:.4f}")
    return EXIT_OK


def _write_pgm(path, image):
    """8-bit binary portable graymap."""
    arr = np.asarray(image, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode())
        fh.write(arr.tobytes())


def _slice_with_contour(image_slice, mask_slice):
    lo, hi = float(image_slice.min()), float(image_slice.max())
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    img = ((image_slice - lo) * scale).astype(np.uint8)
    mask3 = np.broadcast_to(mask_slice, (1,) + mask_slice.shape)
    edge = extract_surface(mask3.astype(np.float32))[0]
    img[edge] = 255
    return img


def cmd_predict(args):
    started = time.time()
    ckpt = load_checkpoint(args.checkpoint)
    case = read_case(args.data, args.case)
    params = ckpt.param_tensors()
    prob = predict_case(params, ckpt.config.model, case)
    mask = binarize(prob, args.threshold)
    os.makedirs(args.out, exist_ok=True)
    stem = os.path.join(args.out, f"{case.case_id}_pred")
    write_volume(Volume(mask, case.ct.spacing_mm, "MASK"), stem)
    outputs = [stem + ".vol.json", stem + ".vol.raw"]

    if args.slices:
        d, h, w = case.ct.dims
        views = {
            "axial": (case.ct.values[d // 2], mask[d // 2]),
            "coronal": (case.ct.values[:, h // 2, :], mask[:, h // 2, :]),
            "sagittal": (case.ct.values[:, :, w // 2], mask[:, :, w // 2]),
        }
        for name, (img, msk) in views.items():
            path = os.path.join(args.out, f"{case.case_id}_{name}.pgm")
            _write_pgm(path, _slice_with_contour(img, msk))
            outputs.append(path)

    _write_manifest(args.out, "predict",
                    {"threshold": args.threshold,
                     "train": config_to_dict(ckpt.config)},
                    ckpt.config.seed,
                    {"checkpoint": args.checkpoint, "data": args.data,
                     "case": args.case},
                    outputs, started)
    print(f"prediction written for case {case.case_id} "
          f"({int(mask.sum())} foreground voxels)")
    return EXIT_OK


def cmd_ablate(args):
    started = time.time()
    cfg = _resolved_train_config(args)
    cases = _load_cases(args.data)
    rows = ablation_harness(cases, cfg)
    os.makedirs(args.out, exist_ok=True)
    table_path = os.path.join(args.out, "ablation.csv")
    write_ablation_csv(rows, table_path)
    _write_manifest(args.out, "ablate", {"train": config_to_dict(cfg)},
                    cfg.seed, {"data": args.data}, [table_path], started)
    for label, dsc, hd, sd, status in rows:
        print(f"{label:10s} dsc={dsc:.4f} hd={hd:.3f} assd={sd:.3f} [{status}]"
              if status == "ok" else f"{label:10s} [{status}]")
    return EXIT_OK


def cmd_gradcheck(args):
    rows = run_gradient_suite(seeds=range(args.seeds),
                              include_model=not args.ops_only)
    width = max(len(name) for name, _ in rows)
    failed = False
    for name, err in rows:
        status = "ok" if err < args.tolerance else "FAIL"
        failed |= status == "FAIL"
        print(f"{name:<{width}s}  {err:.3e}  {status}")
    print(f"{'all operations within tolerance' if not failed else 'FAILURES present'}"
          f" (tolerance {args.tolerance:g}, {args.seeds} seeds)")
    return EXIT_OK if not failed else 1


def build_parser():
    parser = argparse.ArgumentParser(
        prog="petctseg",
        description="Volumetric PET-CT tumor segmentation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-phantom", help="synthesize dual-modality phantoms")
    p.add_argument("--spec", help="PhantomSpec JSON file (defaults used if omitted)")
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_phantom)

    p = sub.add_parser("preprocess", help="resample and normalize cases")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--spacing", default="1,1,1", help="target mm, z,y,x")
    p.add_argument("--dims", default="24,24,24", help="target extents d,h,w")
    p.set_defaults(fn=cmd_preprocess)

    p = sub.add_parser("train", help="train on one cross-validation fold")
    p.add_argument("--config", help="TrainConfig JSON; defaults if omitted")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--resume", help="checkpoint stem to resume from")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("predict", help="predict one case, optionally with slice images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--case", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--slices", action="store_true",
                   help="write axial/coronal/sagittal PGMs with the contour")
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("ablate", help="modality and fusion-ratio sweep")
    p.add_argument("--config", help="TrainConfig JSON; defaults if omitted")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("gradcheck", help="run the gradient verification suite")
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.add_argument("--ops-only", action="store_true",
                   help="skip the full-model case")
    p.set_defaults(fn=cmd_gradcheck)

    return parser


def main(argv=None):
    tune_allocator()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except FileNotFoundError as exc:
        print(f"error: missing input: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (VolumeFormatError, CheckpointError) as exc:
        print(f"error: bad data file: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (ConfigurationError, UsageError) as exc:
        print(f"error: configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PetctsegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
