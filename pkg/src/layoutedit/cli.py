"""Command-line surface: synth, train, edit, eval, gradcheck, dump-attn.

Exit codes: 0 success, 1 validation error, 2 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, InjectionConfig, RunConfig
from .data import DatasetError, generate_dataset, write_ppm
from .diffusion import BLOCK_NAMES
from .encoders import VocabError
from .gradcheck import REL_TOL, check_param_group, projection_head
from .layout import Box4, LayoutError, load_layout_json
from .metrics import DetectionSet, load_detection_json, report
from .qlt import QltError, load_qlt, save_qlt
from .rng import Rng
from .tensor import NumericsError, Tensor

VALIDATION_ERRORS = (ConfigError, DatasetError, LayoutError, VocabError,
                     QltError, FileNotFoundError, ValueError, KeyError)


def _add_config_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON config file; flags override it")
    p.add_argument("--seed", type=int)
    p.add_argument("--lam", type=float, dest="lam")
    p.add_argument("--cfg-w", type=float, dest="cfg_w")
    p.add_argument("--steps", type=int, dest="sample_steps")
    p.add_argument("--train-steps", type=int, dest="train_steps")
    p.add_argument("--lr", type=float)
    p.add_argument("--dropout-rate", type=float, dest="dropout_rate")
    p.add_argument("--heads", type=int)
    p.add_argument("--max-n", type=int, dest="max_n")
    p.add_argument("--injection", choices=["down2", "down4", "mid", "all"])
    p.add_argument("--ip-scale", type=float, dest="ip_scale")
    p.add_argument("--dtype", choices=["float32", "float64"])
    p.add_argument("--data-dir", dest="data_dir")
    p.add_argument("--checkpoint-dir", dest="checkpoint_dir")
    p.add_argument("--report-dir", dest="report_dir")


def build_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    for name in ("seed", "lam", "cfg_w", "sample_steps", "train_steps", "lr",
                 "dropout_rate", "heads", "max_n", "dtype", "data_dir",
                 "checkpoint_dir", "report_dir"):
        val = getattr(args, name, None)
        if val is not None:
            setattr(cfg, name, val)
    if getattr(args, "injection", None) is not None:
        cfg.injection = InjectionConfig(position=args.injection,
                                        ip_scale=cfg.injection.ip_scale)
    if getattr(args, "ip_scale", None) is not None:
        cfg.injection.ip_scale = args.ip_scale
    return cfg.apply_env().validate()


def _parse_counts(spec: str) -> list:
    out = []
    for part in spec.split(","):
        if "-" in part:
            a, b = part.split("-", 1)
            out.extend(range(int(a), int(b) + 1))
        else:
            out.append(int(part))
    return out


# ----------------------------------------------------------------------
def cmd_synth(args) -> int:
    cfg = build_config(args)
    counts = _parse_counts(args.counts)
    names = generate_dataset(cfg.data_dir, cfg.seed, counts=counts,
                             image_size=cfg.image_size)
    print(f"wrote {len(names)} scenes to {cfg.data_dir}")
    return 0


def cmd_train(args) -> int:
    from .pipeline import Pipeline

    cfg = build_config(args)
    pipe = Pipeline(cfg)
    source = pipe.init_ip_weights(args.ip_checkpoint, seed=cfg.seed + 7)
    ckpt = Path(cfg.checkpoint_dir)
    ckpt.mkdir(parents=True, exist_ok=True)
    losses = pipe.train(cfg.data_dir, log_path=ckpt / "loss_log.jsonl",
                        progress=lambda s, l: print(f"step {s}: loss {l:.4f}"))
    pipe.save(ckpt)
    print(f"trained {len(losses)} steps (ip init: {source}); "
          f"checkpoint at {ckpt}")
    return 0


def cmd_edit(args) -> int:
    from .data import caption_for
    from .pipeline import Pipeline, load_image

    cfg = build_config(args)
    pipe = Pipeline(cfg)
    pipe.load(cfg.checkpoint_dir)
    doc = load_layout_json(args.layout)
    image = load_image(args.image)
    aux = caption_for(doc["count"], doc["category"])
    out = pipe.edit(image, doc["boxes"], aux, args.prompt)
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_qlt(out_path.with_suffix(".qlt"), out)
    write_ppm(out_path.with_suffix(".ppm"), np.clip(out, 0.0, 1.0))
    print(f"wrote {out_path.with_suffix('.qlt')} and .ppm")
    return 0


def cmd_eval(args) -> int:
    pred_dir, gt_dir = Path(args.pred_dir), Path(args.gt_dir)
    gt_files = sorted(gt_dir.glob("*.json"))
    if not gt_files:
        raise FileNotFoundError(f"no ground-truth JSON files in {gt_dir}")
    stray = {p.name for p in pred_dir.glob("*.json")} - {g.name for g in gt_files}
    if stray:
        raise ValueError(f"prediction files without ground truth: {sorted(stray)}")
    sets, names = [], []
    for g in gt_files:
        with open(g) as f:
            gt_raw = json.load(f)
        if "boxes" in gt_raw:          # layout schema
            ground_truth = [Box4(*b) for b in gt_raw["boxes"]]
        elif gt_raw.get("ground_truth"):
            ground_truth = load_detection_json(g).ground_truth
        else:                          # detection schema as oracle truth
            ground_truth = [d.box for d in load_detection_json(g).detections]
        pred_path = pred_dir / g.name
        dets = load_detection_json(pred_path).detections if pred_path.exists() else []
        sets.append(DetectionSet(detections=dets, ground_truth=ground_truth))
        names.append(g.stem)
    rep = report(sets, names)
    out = Path(args.out) if args.out else Path("report.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as f:
        json.dump(rep, f, indent=1)
    print(f"OA={rep['OA']:.4f} AP={rep['AP']:.4f} ({len(sets)} images) -> {out}")
    return 0


def cmd_gradcheck(args) -> int:
    from . import tensor as T
    from .pipeline import Pipeline

    cfg = RunConfig(seed=args.seed if args.seed is not None else 0,
                    d_i=16, d_t=16, d_l=16, d_model=16, heads=2, max_n=4,
                    image_size=16, patch_size=8, dtype="float64",
                    t_train=50).validate()
    pipe = Pipeline(cfg)
    rng = Rng(cfg.seed).spawn("gradcheck-harness")
    img = rng.normal((3, 16, 16))
    latent = rng.normal((pipe.denoiser.n_tokens, pipe.denoiser.d_latent))
    boxes = [(0.1, 0.1, 0.4, 0.5), (0.5, 0.6, 0.9, 0.9)]

    head_f = projection_head(rng, "head_f")
    head_t = projection_head(rng, "head_t")
    head_d = projection_head(rng, "head_d")
    bundle_cache = {}

    def bundle():
        if "b" not in bundle_cache:
            bundle_cache["b"] = pipe.condition(img, boxes, "two squares")
        return bundle_cache["b"]

    def head_scalar():
        b = pipe.condition(img, boxes, "two squares", detach=False)
        return head_f(b.f) + head_t(b.f_t)

    def denoiser_scalar():
        return head_d(pipe.denoiser.forward(Tensor(latent), 7, bundle()))

    groups = []
    for p in (pipe.image_encoder.params() + pipe.text_encoder.params()
              + pipe.adapter_head_params()):
        groups.append((p, head_scalar))
    for p in pipe.denoiser.all_params():
        groups.append((p, denoiser_scalar))

    failed = 0
    check_rng = Rng(cfg.seed).spawn("entries")
    print(f"{'parameter group':40s} {'max rel err':>12s}  result")
    for p, fn in groups:
        rep = check_param_group(fn, p, check_rng, max_entries=args.entries,
                                corrupt=(p.name == args.corrupt))
        ok = rep.passed
        failed += 0 if ok else 1
        print(f"{rep.name:40s} {rep.max_rel_err:12.3e}  "
              f"{'pass' if ok else 'FAIL'}")
    print(f"{len(groups)} groups checked, {failed} failed (tol {REL_TOL})")
    return 0 if failed == 0 else 2


def cmd_dump_attention(args) -> int:
    from .data import caption_for
    from .pipeline import Pipeline, load_image

    cfg = build_config(args)
    if args.site not in BLOCK_NAMES:
        raise ConfigError(f"unknown site {args.site!r}; valid sites: "
                          f"{', '.join(BLOCK_NAMES)}")
    pipe = Pipeline(cfg)
    if Path(cfg.checkpoint_dir, "manifest.json").exists():
        pipe.load(cfg.checkpoint_dir)
    doc = load_layout_json(args.layout)
    image = load_image(args.image)
    aux = caption_for(doc["count"], doc["category"])
    bundle = pipe.condition(image, doc["boxes"], aux, prompt=args.prompt)
    latent = Rng(cfg.seed).spawn("dump").normal(
        (pipe.denoiser.n_tokens, pipe.denoiser.d_latent))
    capture = {args.site: {}}
    pipe.denoiser.forward(Tensor(latent.astype(pipe.denoiser.w_in.data.dtype)),
                          args.t, bundle, weights_out=capture)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for branch in ("text", "adapter"):
        path = out_dir / f"{args.site}_{branch}.qlt"
        save_qlt(path, capture[args.site][branch])
        print(f"wrote {path}")
    return 0


# ----------------------------------------------------------------------
def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="layoutedit",
        description="Layout- and count-conditioned toy diffusion editing")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic shape scenes")
    _add_config_flags(p)
    p.add_argument("--counts", default="1-10",
                   help="object counts, e.g. '1-10' or '2,4,6'")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the adapter branch")
    _add_config_flags(p)
    p.add_argument("--ip-checkpoint", help="prior checkpoint for adapter init")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("edit", help="sample an edited image")
    _add_config_flags(p)
    p.add_argument("--image", required=True)
    p.add_argument("--layout", required=True)
    p.add_argument("--prompt", default="")
    p.add_argument("--out", default="edited")
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("eval", help="score detections against ground truth")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--gt-dir", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("--seed", type=int)
    p.add_argument("--entries", type=int, default=4,
                   help="sampled entries per parameter group")
    p.add_argument("--corrupt", help="test hook: corrupt this group's gradient")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("dump-attn", help="export attention maps at a block")
    _add_config_flags(p)
    p.add_argument("--image", required=True)
    p.add_argument("--layout", required=True)
    p.add_argument("--prompt", default="")
    p.add_argument("--site", required=True)
    p.add_argument("--t", type=int, default=500)
    p.add_argument("--out", default="attention")
    p.set_defaults(func=cmd_dump_attention)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericsError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 2
    except VALIDATION_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
