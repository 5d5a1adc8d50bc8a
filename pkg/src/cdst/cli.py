"""Command-line interface: ``cdst <command> ...``."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from .calibrate import DEFAULT_ALPHA, global_color_calibration
from .colorlab import ColorHistogram, color_distance, extract_histogram, greyscale
from .denoiser import build_sdxl_layout, cdst_inference_policy
from .edges import DEFAULT_HIGH, DEFAULT_LOW, DEFAULT_SIGMA, canny
from .imageio import read_image, write_edges, write_image
from .training import (
    DatasetConfig,
    ModelBundle,
    TrainConfig,
    build_dataset,
    load_config,
    train,
    write_outputs,
)
from .workflows import (
    WORKFLOWS,
    Pipeline,
    WorkflowError,
    WorkflowPreset,
    characteristics_preserved,
    evaluate_pair,
    load_preset,
    metrics_record,
    style_color_content,
    style_color_prompt,
    write_jsonl,
)

RUN_LOG_SUFFIX = ".run.json"


class CLIError(Exception):
    pass


def _need_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CLIError(f"{what} not found: {path}")
    return p


def cmd_histogram(args) -> None:
    img = read_image(_need_file(args.image, "image"))
    extract_histogram(img).save(args.output)


def cmd_distance(args) -> None:
    a = ColorHistogram.load(_need_file(args.a, "histogram"))
    b = ColorHistogram.load(_need_file(args.b, "histogram"))
    print(f"{color_distance(a, b):.17g}")


def cmd_calibrate(args) -> None:
    img = read_image(_need_file(args.image, "image"))
    ref = read_image(_need_file(args.reference, "reference"))
    write_image(global_color_calibration(img, ref, args.alpha), args.output)


def cmd_greyscale(args) -> None:
    write_image(greyscale(read_image(_need_file(args.image, "image"))), args.output)


def cmd_canny(args) -> None:
    img = read_image(_need_file(args.image, "image"))
    write_edges(canny(img, args.low, args.high, args.sigma), args.output)


def cmd_layout(args) -> None:
    if args.preset != "sdxl":
        raise CLIError(f"unknown layout preset {args.preset!r}")
    reg = build_sdxl_layout()
    pol = cdst_inference_policy(reg)
    print("index\tstage\tstyle_active\tlambda_s\tlambda_c")
    for i in range(reg.total):
        print(f"{i}\t{reg.stage_of(i)}\t{int(pol.style_active[i])}\t{pol.lambda_s[i]:g}\t{pol.lambda_c[i]:g}")


def cmd_train(args) -> None:
    cfg_path = _need_file(args.config, "config")
    cfg = load_config(cfg_path)
    base_dir = cfg_path.parent
    if "dataset" not in cfg:
        raise CLIError("config needs a 'dataset' section")
    data = build_dataset(DatasetConfig.from_dict(cfg["dataset"]))
    out_dir = Path(args.output or cfg.get("output", "run"))
    if not out_dir.is_absolute() and args.output is None:
        out_dir = base_dir / out_dir
    bundle = ModelBundle()
    if cfg.get("base_checkpoint"):
        base = Path(cfg["base_checkpoint"])
        base = base if base.is_absolute() else base_dir / base
        bundle.load_state(ModelBundle.load(_need_file(str(base), "base checkpoint")).state(), ("base", "control"))
    elif "pretrain" in cfg:
        train(TrainConfig.from_dict(cfg["pretrain"]), data, bundle, stage="base")
        out_dir.mkdir(parents=True, exist_ok=True)
        bundle.save(out_dir / "base.ckpt")
    else:
        raise CLIError("config needs either 'base_checkpoint' or a 'pretrain' section")
    result = train(TrainConfig.from_dict(cfg.get("train", {})), data, bundle, stage="streams")
    paths = write_outputs(result, out_dir)
    print(paths["checkpoint"])


def _preset_for(args):
    preset = load_preset(args.preset or WORKFLOWS[args.workflow])
    overrides = {}
    if args.color_weight is not None:
        overrides["color_weight"] = args.color_weight
    if args.steps is not None:
        overrides["steps"] = args.steps
    return replace(preset, **overrides) if overrides else preset


def cmd_generate(args) -> None:
    preset = _preset_for(args)
    style = read_image(_need_file(args.style, "style image"))
    content = read_image(_need_file(args.content, "content image")) if args.content else None
    color = read_image(_need_file(args.color, "color image")) if args.color else None
    if args.workflow in ("scp", "scc") and color is None:
        raise CLIError(f"workflow {args.workflow} needs --color")
    if args.workflow in ("scc", "cp") and content is None:
        raise CLIError(f"workflow {args.workflow} needs --content")
    pipe = Pipeline.load(args.checkpoint)
    if args.workflow == "scp":
        out = style_color_prompt(pipe, style, color, args.prompt, preset, args.seed)
    elif args.workflow == "scc":
        out = style_color_content(pipe, style, color, content, preset, args.seed, prompt_key=args.prompt)
    else:
        out = characteristics_preserved(pipe, style, content, preset, args.seed, prompt_key=args.prompt)
    write_image(out, args.output)
    # Run log next to the output: enough to rerun and to evaluate.
    log = {
        "workflow": args.workflow,
        "style": str(args.style),
        "color": str(args.color if args.workflow != "cp" else args.content),
        "content": str(args.content) if args.content else None,
        "prompt": args.prompt,
        "seed": args.seed,
        "checkpoint": str(args.checkpoint),
        "preset": preset.to_dict(),
    }
    out_path = Path(args.output)
    log_path = out_path.with_name(out_path.stem + RUN_LOG_SUFFIX)
    log_path.write_text(json.dumps(log, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def cmd_eval(args) -> None:
    root = Path(args.dir)
    if not root.is_dir():
        raise CLIError(f"results directory not found: {args.dir}")
    logs = sorted(root.glob("*" + RUN_LOG_SUFFIX))
    if not logs:
        raise CLIError(f"no run logs (*{RUN_LOG_SUFFIX}) in {args.dir}")
    records = []
    for log_path in logs:
        log = json.loads(log_path.read_text(encoding="utf-8"))
        run_id = log_path.name[: -len(RUN_LOG_SUFFIX)]
        out = read_image(_need_file(str(root / f"{run_id}.png"), "output image"))
        color_ref = read_image(_need_file(_resolve(log["color"], log_path), "color reference"))
        # Luma is compared with the structure source: the content image when
        # there is one, else the style image; a size mismatch falls back to the
        # color reference.
        luma_ref = read_image(_need_file(_resolve(log.get("content") or log["style"], log_path), "luma reference"))
        if (luma_ref.height, luma_ref.width) != (out.height, out.width):
            luma_ref = None
        metrics = evaluate_pair(out, color_ref, luma_ref)
        records.append(metrics_record(run_id, metrics, WorkflowPreset.from_dict(log["preset"]), log["seed"]))
    out_path = Path(args.output) if args.output else root / "metrics.jsonl"
    write_jsonl(records, out_path)
    print(out_path)


def _resolve(path: str, log_path: Path) -> str:
    p = Path(path)
    if p.is_absolute() or p.is_file():
        return str(p)
    return str(log_path.parent / p)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cdst", description="Color-disentangled style transfer toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("histogram", help="180-bin quantized color histogram of an image")
    p.add_argument("image")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_histogram)

    p = sub.add_parser("distance", help="L2 distance between two histogram files")
    p.add_argument("a")
    p.add_argument("b")
    p.set_defaults(func=cmd_distance)

    p = sub.add_parser("calibrate", help="global color calibration of an image towards a reference")
    p.add_argument("image")
    p.add_argument("reference")
    p.add_argument("--alpha", type=float, default=DEFAULT_ALPHA)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("greyscale", help="luma image")
    p.add_argument("image")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_greyscale)

    p = sub.add_parser("canny", help="Canny edge map as a 1-bit PNG")
    p.add_argument("image")
    p.add_argument("--low", type=float, default=DEFAULT_LOW)
    p.add_argument("--high", type=float, default=DEFAULT_HIGH)
    p.add_argument("--sigma", type=float, default=DEFAULT_SIGMA)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_canny)

    p = sub.add_parser("layout", help="print the cross-attention block table with inference weights")
    p.add_argument("--preset", default="sdxl")
    p.set_defaults(func=cmd_layout)

    p = sub.add_parser("train", help="train stream projections and embedders from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("-o", "--output", help="output directory (overrides the config)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="run one inference workflow")
    p.add_argument("--workflow", choices=sorted(WORKFLOWS), required=True)
    p.add_argument("--style", required=True)
    p.add_argument("--color")
    p.add_argument("--content")
    p.add_argument("--prompt", help="caption key (texture family name)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--preset", help="preset name or JSON file (default: the workflow's shipped preset)")
    p.add_argument("--color-weight", type=float, help="override the preset color weight")
    p.add_argument("--steps", type=int, help="override the preset step count")
    p.add_argument("--checkpoint", default="model.ckpt")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", help="score generated images against their color references")
    p.add_argument("--dir", required=True)
    p.add_argument("-o", "--output", help="JSONL path (default: <dir>/metrics.jsonl)")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except (CLIError, WorkflowError, OSError, ValueError, KeyError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"cdst {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
