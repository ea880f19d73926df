"""Operator surface: one subcommand per pipeline stage.

Exit codes: 0 success; 2 bad input (malformed files, unknown names, value
errors) with a machine-readable ``error: <code>: <message>`` line on
stderr; 3 degraded result (the command ran but could not fully resolve —
e.g. no periodicity found, or a pool miss downgraded the pipeline to an
architecture-only report).  All file outputs are written atomically
(temp file + rename).  ``--config`` points at a flat key-value file; CLI
flags override config values, which override built-in defaults.
"""

from __future__ import annotations

import argparse
import json
import os
import re
import sys
from pathlib import Path

from . import similarity
from .archextract import extract_architecture, hypothesis_json
from .checkpoint import read_wbin, write_wbin, quantize_checkpoint
from .cnn import Hyper, cnn_train, load_model, predict, save_model
from .config import Config, parse_config
from .errors import DegradedResultError, ToolkitError
from .extraction import (DEFAULT_POLICY, POLICIES, ProbeOracle, extract,
                         plan_bits, verify)
from .finetune import (ArchSpec, DeltaModel, PRESETS, apply_finetune,
                       gen_base, gen_independent)
from .floatbits import FORMATS
from .modelpool import ModelPool
from .pipeline import result_json, run_pipeline
from .raster import image_to_pgm, rasterize
from .sweeps import sweep_classifier, sweep_detector
from .tracesim import (FRAMEWORKS, VENDORS, build_profile, gen_trace,
                       inject_noise, read_trace, write_trace)

_ARCH_RE = re.compile(r"^enc(\d+)-h(\d+)$")


def parse_arch(label: str) -> ArchSpec:
    if label in PRESETS:
        return PRESETS[label]
    m = _ARCH_RE.match(label)
    if not m:
        raise ToolkitError(
            f"unknown arch {label!r}; expected base, large, or encN-hH",
            code="bad-arch")
    count, hidden = int(m.group(1)), int(m.group(2))
    heads = next((h for h in (12, 16, 8, 4, 2, 1) if hidden % h == 0))
    return ArchSpec(count, hidden, heads)


def _fmt(name: str):
    if name not in FORMATS:
        raise ToolkitError(f"unknown float format {name!r}",
                           code="bad-format")
    return FORMATS[name]


def _atomic_write_text(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp-%d" % os.getpid())
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _atomic_write_wbin(ckpt, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp-%d" % os.getpid())
    write_wbin(ckpt, tmp)
    os.replace(tmp, path)


def _emit(args, text: str) -> None:
    if not text.endswith("\n"):
        text += "\n"
    if getattr(args, "out", None):
        _atomic_write_text(args.out, text)
    else:
        sys.stdout.write(text)


def _json_text(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _load_config(args) -> Config:
    if getattr(args, "config", None):
        return parse_config(args.config)
    return Config()


def _require_json_format(args) -> None:
    if getattr(args, "format", "json") != "json":
        raise ToolkitError("this subcommand only emits json",
                           code="bad-format")


# ---------------------------------------------------------------------------
# checkpoint commands


def cmd_gen_ckpt(args) -> int:
    arch = parse_arch(args.arch)
    meta = {"vendor": args.vendor, "framework": args.framework}
    gen = gen_independent if args.variant == "independent" else gen_base
    ckpt = gen(arch, args.seed, small_weight_fraction=args.small_fraction,
               metadata=meta)
    _atomic_write_wbin(ckpt, args.out)
    return 0


def cmd_finetune_sim(args) -> int:
    base = read_wbin(args.base)
    dm = DeltaModel(sigma_encoder=args.sigma_encoder,
                    sigma_last_layer=args.sigma_last_layer,
                    sign_flip_target=args.sign_flip_target)
    _atomic_write_wbin(apply_finetune(base, dm, args.seed), args.out)
    return 0


def cmd_diff_weights(args) -> int:
    a, b = read_wbin(args.a), read_wbin(args.b)
    pairs = similarity.checkpoint_pairs(a, b)
    if args.format == "csv":
        _emit(args, similarity.stats_csv(pairs, metric=args.metric))
        return 0
    rows = []
    for name, ta, tb in pairs:
        st = similarity.diff_stats(
            similarity.weight_diff_map(ta, tb, args.metric))
        rows.append({"tensor": name, "metric": args.metric,
                     "mean": st.mean, "max": st.max,
                     "frac_below_0.001": st.fraction_below(0.001),
                     "frac_below_0.002": st.fraction_below(0.002)})
    _emit(args, _json_text(rows))
    return 0


def cmd_confidence_corr(args) -> int:
    a, b = read_wbin(args.a), read_wbin(args.b)
    inputs = similarity.attention_inputs(
        hidden=a.tensor(a.names()[0]).data.shape[0],
        count=args.inputs, tokens=args.tokens, seed=args.seed)
    r = similarity.confidence_correlation(a, b, inputs, heads=args.heads)
    if args.format == "csv":
        lines = ["layer,head,r"]
        for li in range(r.shape[0]):
            for h in range(r.shape[1]):
                lines.append(f"{li},{h},{r[li, h]!r}")
        _emit(args, "\n".join(lines))
        return 0
    _emit(args, _json_text({"mean_r": float(r.mean()),
                            "per_head": r.tolist()}))
    return 0


# ---------------------------------------------------------------------------
# trace commands


def cmd_gen_traces(args) -> int:
    arch = parse_arch(args.arch)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i in range(args.count):
        seed = args.seed + i
        profile = build_profile(args.vendor, args.framework, arch, seed=seed)
        trace = gen_trace(profile, seed=seed)
        if args.noise_kernels:
            trace = inject_noise(trace, args.noise_kernels,
                                 args.noise_amplitude_us, seed=seed)
        name = f"{args.vendor}_{args.framework}_{arch.label}_{seed}.trace"
        tmp = out_dir / (name + ".tmp-%d" % os.getpid())
        write_trace(trace, tmp)
        os.replace(tmp, out_dir / name)
    return 0


def cmd_inject_noise(args) -> int:
    trace = read_trace(args.trace)
    noisy = inject_noise(trace, args.n, args.amplitude_us, seed=args.seed)
    out = Path(args.out)
    tmp = out.with_name(out.name + ".tmp-%d" % os.getpid())
    write_trace(noisy, tmp)
    os.replace(tmp, out)
    return 0


def cmd_detect_arch(args) -> int:
    trace = read_trace(args.trace)
    hypothesis = extract_architecture(trace)
    _emit(args, hypothesis_json(hypothesis))
    if hypothesis.encoder_count is None:
        raise DegradedResultError("no repetition found in trace")
    return 0


def cmd_rasterize(args) -> int:
    image = rasterize(read_trace(args.trace))
    image_to_pgm(image, args.out)
    return 0


# ---------------------------------------------------------------------------
# classifier commands


def cmd_train_classifier(args) -> int:
    cfg = _load_config(args)
    files = sorted(Path(args.traces_dir).glob("*.trace"))
    if not files:
        raise ToolkitError(f"no *.trace files under {args.traces_dir}",
                           code="bad-input")
    images = [rasterize(read_trace(f)) for f in files]
    hyper = Hyper(
        learning_rate=args.learning_rate if args.learning_rate is not None
        else cfg.getfloat("learning_rate", Hyper.learning_rate, "train"),
        batch_size=args.batch_size if args.batch_size is not None
        else cfg.getint("batch_size", Hyper.batch_size, "train"),
        epochs=args.epochs if args.epochs is not None
        else cfg.getint("epochs", Hyper.epochs, "train"),
        val_fraction=args.val_fraction if args.val_fraction is not None
        else cfg.getfloat("val_fraction", Hyper.val_fraction, "train"),
    )
    model = cnn_train(images, args.task, hyper=hyper, seed=args.seed)
    save_model(model, args.out)
    last = model.history[-1] if model.history else {}
    sys.stderr.write(
        f"trained {args.task} on {len(images)} images: "
        f"val_accuracy {last.get('val_accuracy')}\n")
    return 0


def cmd_classify(args) -> int:
    model = load_model(args.model)
    image = rasterize(read_trace(args.trace))
    _emit(args, _json_text({"task": model.task,
                            "prediction": predict(model, image)}))
    return 0


# ---------------------------------------------------------------------------
# extraction commands


def cmd_plan_bits(args) -> int:
    fmt = _fmt(args.fmt)
    base = read_wbin(args.base)
    if fmt.name != "f32":
        base = quantize_checkpoint(base, fmt)
    plan = plan_bits(base, policy=args.policy, fmt=fmt)
    _emit(args, _json_text(plan.to_json_dict()))
    return 0


def _oracle_pair(args):
    fmt = _fmt(args.fmt)
    base = read_wbin(args.base)
    victim = read_wbin(args.victim)
    if fmt.name != "f32":
        base = quantize_checkpoint(base, fmt)
        victim = quantize_checkpoint(victim, fmt)
    return fmt, base, victim


def cmd_extract(args) -> int:
    fmt, base, victim = _oracle_pair(args)
    plan = plan_bits(base, policy=args.policy, fmt=fmt)
    oracle = ProbeOracle(victim, fmt=fmt, error_rate=args.error_rate,
                         seed=args.seed)
    clone, report = extract(plan, oracle, base,
                            transcript_path=args.transcript)
    if args.clone_out:
        _atomic_write_wbin(clone, args.clone_out)
    _emit(args, _json_text(report.to_json_dict()))
    return 0


def cmd_verify(args) -> int:
    fmt, base, victim = _oracle_pair(args)
    clone = read_wbin(args.clone)
    if fmt.name != "f32":
        clone = quantize_checkpoint(clone, fmt)
    plan = plan_bits(base, policy=args.policy, fmt=fmt)
    _emit(args, _json_text(verify(clone, victim, plan).to_json_dict()))
    return 0


# ---------------------------------------------------------------------------
# pipeline and sweeps


def cmd_pipeline(args) -> int:
    cfg = _load_config(args)
    trace = read_trace(args.trace)
    victim = read_wbin(args.victim)
    pool = ModelPool.scan(args.pool_dir)
    classifiers = {}
    for binding in args.classifier or []:
        task, _, path = binding.partition("=")
        if not path:
            raise ToolkitError(
                f"--classifier expects task=path, got {binding!r}",
                code="bad-input")
        classifiers[task] = load_model(path)
    oracle = ProbeOracle(victim, error_rate=args.error_rate, seed=args.seed)
    result = run_pipeline(trace, oracle, pool,
                          classifiers=classifiers or None, config=cfg,
                          victim=victim if not args.no_verify else None,
                          clone_out=args.clone_out)
    _emit(args, result_json(result, include_timing=args.include_timing))
    if result.degraded:
        raise DegradedResultError(
            "; ".join(result.anomalies) or "architecture-only result")
    return 0


def cmd_noise_sweep(args) -> int:
    arch = parse_arch(args.arch)
    if args.mode == "detector":
        points = sweep_detector(args.vendor, args.framework, arch,
                                trials=args.trials, seed=args.seed)
    else:
        if not args.model or not args.task:
            raise ToolkitError(
                "classifier sweep needs --model and --task",
                code="bad-input")
        model = load_model(args.model)
        cases = [(args.vendor, args.framework, arch)]
        points = sweep_classifier(model, args.task, cases,
                                  trials=args.trials, seed=args.seed)
    if args.format == "csv":
        lines = ["n_kernels,amplitude_us,trials,accuracy"]
        lines += [f"{p.n_kernels},{p.amplitude_us!r},{p.trials},"
                  f"{p.accuracy!r}" for p in points]
        _emit(args, "\n".join(lines))
        return 0
    _emit(args, _json_text([p.to_json_dict() for p in points]))
    return 0


# ---------------------------------------------------------------------------
# argument wiring


def _add_common(p, out=True, fmt=False, fmt_default="json"):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None)
    if out:
        p.add_argument("--out", default=None,
                       help="output path (default: stdout)")
    if fmt:
        p.add_argument("--format", choices=("json", "csv"),
                       default=fmt_default)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="tlextract",
        description="transfer-learning model extraction toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-ckpt", help="synthesize a checkpoint")
    p.add_argument("--arch", required=True)
    p.add_argument("--vendor", default="acme", choices=VENDORS)
    p.add_argument("--framework", default="eager", choices=FRAMEWORKS)
    p.add_argument("--variant", default="pretrained",
                   choices=("pretrained", "independent"))
    p.add_argument("--small-fraction", type=float, default=0.90)
    _add_common(p)
    p.set_defaults(func=cmd_gen_ckpt, require_out=True)

    p = sub.add_parser("finetune-sim", help="simulate fine-tuning drift")
    p.add_argument("--base", required=True)
    p.add_argument("--sigma-encoder", type=float, default=0.001)
    p.add_argument("--sigma-last-layer", type=float, default=0.012)
    p.add_argument("--sign-flip-target", type=float, default=0.01)
    _add_common(p)
    p.set_defaults(func=cmd_finetune_sim, require_out=True)

    p = sub.add_parser("diff-weights", help="per-tensor weight diff stats")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--metric", default="abs_diff",
                   choices=similarity.METRICS)
    _add_common(p, fmt=True, fmt_default="csv")
    p.set_defaults(func=cmd_diff_weights)

    p = sub.add_parser("confidence-corr",
                       help="attention-head confidence correlation")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--inputs", type=int, default=8)
    p.add_argument("--tokens", type=int, default=16)
    _add_common(p, fmt=True)
    p.set_defaults(func=cmd_confidence_corr)

    p = sub.add_parser("gen-traces", help="simulate kernel traces")
    p.add_argument("--vendor", required=True, choices=VENDORS)
    p.add_argument("--framework", required=True, choices=FRAMEWORKS)
    p.add_argument("--arch", required=True)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--noise-kernels", type=int, default=0)
    p.add_argument("--noise-amplitude-us", type=float, default=20.0)
    _add_common(p, out=False)
    p.set_defaults(func=cmd_gen_traces)

    p = sub.add_parser("inject-noise", help="perturb kernel durations")
    p.add_argument("--trace", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--amplitude-us", type=float, required=True)
    _add_common(p)
    p.set_defaults(func=cmd_inject_noise, require_out=True)

    p = sub.add_parser("detect-arch", help="recover architecture from trace")
    p.add_argument("--trace", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_detect_arch)

    p = sub.add_parser("rasterize", help="render trace to a PGM image")
    p.add_argument("--trace", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_rasterize, require_out=True)

    p = sub.add_parser("train-classifier", help="train a trace classifier")
    p.add_argument("--traces-dir", required=True)
    p.add_argument("--task", required=True,
                   choices=("vendor", "framework", "encoder_count"))
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--learning-rate", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--val-fraction", type=float, default=None)
    _add_common(p)
    p.set_defaults(func=cmd_train_classifier, require_out=True)

    p = sub.add_parser("classify", help="classify one trace")
    p.add_argument("--model", required=True)
    p.add_argument("--trace", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("plan-bits", help="plan probe bits against a base")
    p.add_argument("--base", required=True)
    p.add_argument("--policy", default=DEFAULT_POLICY, choices=POLICIES)
    p.add_argument("--fmt", default="f32", choices=tuple(FORMATS))
    _add_common(p)
    p.set_defaults(func=cmd_plan_bits)

    p = sub.add_parser("extract", help="probe the victim and build a clone")
    p.add_argument("--base", required=True)
    p.add_argument("--victim", required=True)
    p.add_argument("--policy", default=DEFAULT_POLICY, choices=POLICIES)
    p.add_argument("--fmt", default="f32", choices=tuple(FORMATS))
    p.add_argument("--error-rate", type=float, default=0.0)
    p.add_argument("--clone-out", default=None)
    p.add_argument("--transcript", default=None)
    _add_common(p)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("verify", help="score a clone against ground truth")
    p.add_argument("--clone", required=True)
    p.add_argument("--victim", required=True)
    p.add_argument("--base", required=True)
    p.add_argument("--policy", default=DEFAULT_POLICY, choices=POLICIES)
    p.add_argument("--fmt", default="f32", choices=tuple(FORMATS))
    _add_common(p)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("pipeline", help="full trace-to-clone attack run")
    p.add_argument("--trace", required=True)
    p.add_argument("--victim", required=True,
                   help="victim checkpoint (probe target and ground truth)")
    p.add_argument("--pool-dir", required=True)
    p.add_argument("--classifier", action="append", metavar="TASK=PATH")
    p.add_argument("--error-rate", type=float, default=0.0)
    p.add_argument("--clone-out", default=None)
    p.add_argument("--include-timing", action="store_true")
    p.add_argument("--no-verify", action="store_true",
                   help="skip ground-truth scoring of the clone")
    _add_common(p)
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("noise-sweep", help="accuracy vs injected noise")
    p.add_argument("--mode", required=True,
                   choices=("detector", "classifier"))
    p.add_argument("--vendor", required=True, choices=VENDORS)
    p.add_argument("--framework", required=True, choices=FRAMEWORKS)
    p.add_argument("--arch", required=True)
    p.add_argument("--trials", type=int, default=50)
    p.add_argument("--model", default=None)
    p.add_argument("--task", default=None)
    _add_common(p, fmt=True)
    p.set_defaults(func=cmd_noise_sweep)

    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "require_out", False) and not args.out:
        sys.stderr.write("error: bad-input: this subcommand needs --out\n")
        return 2
    try:
        return args.func(args)
    except DegradedResultError as exc:
        sys.stderr.write(f"error: {exc.code}: {exc}\n")
        return 3
    except ToolkitError as exc:
        sys.stderr.write(f"error: {exc.code}: {exc}\n")
        return 2
    except (OSError, ValueError, KeyError) as exc:
        sys.stderr.write(f"error: bad-input: {exc}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
