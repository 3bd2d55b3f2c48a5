"""Command-line entry point: ``vlmproj <verb> ...``.

Exit codes: 0 success, 1 validation error, 2 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import tensorio
from .bench import ToyPipeline, measure_generation, read_score_rows, report_table
from .errors import ValidationError
from .gradcheck import check_op, check_pipeline, check_variant
from .projector import VARIANTS, Projector, build, format_millions, load_spec, param_shapes
from .tensor import DIFFERENTIABLE_INPUTS
from .toyvlm import ToyVLM, ToyVLMConfig
from .train import memorization_config, memorization_task, multitask_config, pretrain_config, run_stage

EXIT_OK, EXIT_VALIDATION, EXIT_IO = 0, 1, 2


def _write(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_params(args) -> int:
    spec = load_spec(args.spec)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["name", "shape", "count", "millions"])
    total = 0
    for name, shape in param_shapes(spec).items():
        n = int(np.prod(shape))
        total += n
        w.writerow([name, "x".join(map(str, shape)), n, format_millions(n)])
    w.writerow(["total", "", total, format_millions(total)])
    _write(buf.getvalue(), None)
    return EXIT_OK


def cmd_forward(args) -> int:
    spec = load_spec(args.spec)
    p = Projector.load(args.params) if args.params else build(spec)
    if p.spec != spec:
        raise ValidationError("--params directory was saved for a different spec")
    tensorio.save(args.out, p.forward(tensorio.load(args.input)))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.op:
        results = check_op(args.op, args.seed)
    elif args.variant:
        results = check_variant(args.variant, args.seed)
    else:
        results = [r for op in DIFFERENTIABLE_INPUTS for r in check_op(op, args.seed)]
        results += [r for v in VARIANTS for r in check_variant(v, args.seed)]
        results += check_pipeline(args.seed)
    ok = True
    for r in results:
        ok &= r.ok
        print(f"{r.target},{r.wrt},{r.rel_error:.3e},{r.tol:.0e},{'PASS' if r.ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_VALIDATION


def _load_prompt(path) -> dict:
    d = json.loads(Path(path).read_text())
    prompt = {"text_ids": [int(i) for i in d.get("text_ids", [])], "max_new": int(d.get("max_new", 16))}
    if d.get("image"):
        img_path = Path(d["image"])
        if not img_path.is_absolute():
            img_path = Path(path).parent / img_path
        prompt["image"] = tensorio.load(img_path)
    return prompt


def _default_prompt(model: ToyVLM, seed: int) -> dict:
    side = model.cfg.vision.image_side
    rng = np.random.default_rng(seed)
    return {"image": rng.standard_normal((side, side, 3)), "text_ids": [1, 2, 3], "max_new": 16}


def cmd_generate(args) -> int:
    model = ToyVLM(ToyVLMConfig.load(args.config))
    prompt = _load_prompt(args.prompt)
    n = prompt["max_new"]
    if n < 1:
        raise ValidationError("max_new must be >= 1")
    pipe = ToyPipeline(model)
    pipe.check(prompt, n)
    t0 = time.perf_counter()
    state = pipe.prefill(prompt)
    ids = [pipe.decode(state) for _ in range(n)]
    total = time.perf_counter() - t0
    out = {"ids": ids, "eval_avg_tokens_per_s": n / total, "total_s": total}
    print(json.dumps(out))
    return EXIT_OK


def cmd_bench(args) -> int:
    model = ToyVLM(ToyVLMConfig.load(args.config))
    prompt = _load_prompt(args.prompt) if args.prompt else _default_prompt(model, args.seed)
    pipe = ToyPipeline(model)
    report = measure_generation(
        pipe, prompt, n_out=args.n_out, repeats=args.repeats,
        label=args.label, prefill_tokens=pipe.prompt_length(prompt),
    )
    print(json.dumps(report.to_dict(), indent=2))
    return EXIT_OK


def cmd_score(args) -> int:
    rows = read_score_rows(Path(args.rows).read_text())
    _write(report_table([(label, row, None) for label, row in rows]), args.out)
    return EXIT_OK


def cmd_train_toy(args) -> int:
    cfg = ToyVLMConfig.load(args.config) if args.config else memorization_config()
    model = ToyVLM(cfg)
    data = memorization_task(model, n=args.samples, caption_len=args.caption_len, seed=args.seed)
    overrides = {"total_steps": args.steps, "batch": args.batch}
    for key in ("peak_lr_projector", "peak_lr_base"):
        if getattr(args, key) is not None:
            overrides[key] = getattr(args, key)
    stages = {
        "pretrain": [pretrain_config(**overrides)],
        "multitask": [multitask_config(**overrides)],
        "both": [pretrain_config(**overrides), multitask_config(**overrides)],
    }[args.stage]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "lr_projector", "lr_base", "loss"])
    offset = 0
    for i, stage in enumerate(stages):
        res = run_stage(model, stage, data, seed=args.seed + i)
        for s, (lp, lb, loss) in enumerate(zip(res.lr_projector, res.lr_base, res.losses)):
            w.writerow([offset + s, repr(lp), repr(lb), repr(loss)])
        offset += stage.total_steps
    _write(buf.getvalue(), args.out)
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="vlmproj", description="Projector zoo and toy VLM tooling")
    sub = ap.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("params", help="per-tensor and total parameter counts")
    p.add_argument("--spec", required=True)
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("forward", help="run a projector on a TNSR feature file")
    p.add_argument("--spec", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--params", help="directory written by Projector.save (default: seeded init)")
    p.set_defaults(func=cmd_forward)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--op", choices=sorted(DIFFERENTIABLE_INPUTS))
    g.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("generate", help="greedy generation with the toy pipeline")
    p.add_argument("--config", required=True)
    p.add_argument("--prompt", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("bench", help="time generation of n-out tokens")
    p.add_argument("--config", required=True)
    p.add_argument("--prompt")
    p.add_argument("--n-out", type=int, default=256)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--label", default="toy")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("score", help="six-benchmark averages from a score CSV")
    p.add_argument("--rows", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("train-toy", help="toy two-stage training; writes a loss-curve CSV")
    p.add_argument("--stage", choices=("pretrain", "multitask", "both"), default="both")
    p.add_argument("--out")
    p.add_argument("--config", help="ToyVLMConfig JSON (default: the memorization toy dims)")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--samples", type=int, default=32)
    p.add_argument("--caption-len", type=int, default=1)
    p.add_argument("--peak-lr-projector", type=float)
    p.add_argument("--peak-lr-base", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train_toy)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, json.JSONDecodeError, TypeError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
