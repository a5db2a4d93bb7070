"""Command-line pipeline: corpus -> teacher -> distilled student -> packed model, plus reports.

Subcommands cover the full workflow (train-teacher, distill, ptb, pack, ppl,
bench, scaling, census, storage-report, hist, make-corpus).  Every run is
reproducible: one --seed feeds a generator hierarchy, configuration comes from
an INI file overridable by flags (flags win), and commands that write artifacts
record a manifest (command line, config hash, seed, version) and mark the
output directory `.incomplete` until they finish.

This module keeps its import-time footprint to the standard library so that
thread counts can be pinned in the environment before numpy loads; the heavy
imports happen inside the command handlers.
"""

import argparse
import configparser
import hashlib
import os
import subprocess
import sys

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

# Mirror of model.PRESETS; kept literal so --help works without importing numpy.
PRESET_NAMES = ("tiny", "small", "780M", "1.3B", "2.7B")

_MODEL_KEYS = ("d_model", "n_layer", "vocab", "n_heads", "d_state", "d_conv", "expand", "scope")
_TRAIN_KEYS = ("peak_lr", "warmup", "steps", "batch_tokens", "seq_len", "clip", "beta1", "beta2")
_IO_KEYS = ("out_dir", "corpus")
VALID_KEYS = tuple(
    [f"model.{k}" for k in _MODEL_KEYS]
    + [f"train.{k}" for k in _TRAIN_KEYS]
    + [f"io.{k}" for k in _IO_KEYS]
)

THREAD_ENV_VARS = (
    "OPENBLAS_NUM_THREADS",
    "OMP_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
    "NUMBA_NUM_THREADS",
)


class UsageError(Exception):
    """Bad invocation or configuration; maps to exit status 2."""


# === configuration plumbing ===


def _parse_value(text: str):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            continue
    return text


def _reject_unknown(key: str) -> None:
    if key not in VALID_KEYS:
        raise UsageError(
            f"unknown config key {key!r}; valid keys: {', '.join(VALID_KEYS)}"
        )


def load_config_file(path: str) -> dict:
    """Read `[model]/[train]/[io]` sections into a flat dotted-key dict."""
    parser = configparser.ConfigParser()
    try:
        with open(path) as f:
            parser.read_file(f)
    except (OSError, configparser.Error) as e:
        raise UsageError(f"cannot read config {path}: {e}") from e
    merged = {}
    for section in parser.sections():
        for option, raw in parser.items(section):
            key = f"{section}.{option}"
            _reject_unknown(key)
            merged[key] = _parse_value(raw)
    return merged


def parse_set_overrides(pairs) -> dict:
    merged = {}
    for pair in pairs or ():
        key, sep, raw = pair.partition("=")
        if not sep or not key:
            raise UsageError(f"--set expects key=value, got {pair!r}")
        key = key.strip()
        _reject_unknown(key)
        merged[key] = _parse_value(raw.strip())
    return merged


def resolve_config(args):
    """Merge preset, config file, and flags (flags win) into typed configs."""
    from .model import get_preset
    from .train import TrainConfig

    merged = {}
    if getattr(args, "config", None):
        merged.update(load_config_file(args.config))
    merged.update(parse_set_overrides(getattr(args, "set", None)))
    for flag, key in (("steps", "train.steps"), ("corpus", "io.corpus"), ("scope", "model.scope")):
        value = getattr(args, flag, None)
        if value is not None:
            merged[key] = value
    if getattr(args, "out", None):
        merged["io.out_dir"] = args.out

    model_over = {}
    for key in _MODEL_KEYS:
        if f"model.{key}" in merged:
            field = "vocab_size" if key == "vocab" else key
            model_over[field] = merged[f"model.{key}"]
    train_over = {k: merged[f"train.{k}"] for k in _TRAIN_KEYS if f"train.{k}" in merged}

    try:
        model_cfg = get_preset(getattr(args, "preset", "tiny"), **model_over)
        train_cfg = TrainConfig(seed=args.seed, **train_over)
    except (ValueError, TypeError) as e:
        raise UsageError(str(e)) from e
    io = {"out_dir": merged.get("io.out_dir", ""), "corpus": merged.get("io.corpus", "")}
    return model_cfg, train_cfg, io


def _resolved_items(model_cfg, train_cfg, io, seed) -> dict:
    out = {
        "model.d_model": model_cfg.d_model,
        "model.n_layer": model_cfg.n_layer,
        "model.vocab": model_cfg.vocab_size,
        "model.n_heads": model_cfg.n_heads,
        "model.d_state": model_cfg.d_state,
        "model.d_conv": model_cfg.d_conv,
        "model.expand": model_cfg.expand,
        "model.scope": model_cfg.scope,
        "seed": seed,
    }
    for key in _TRAIN_KEYS:
        out[f"train.{key}"] = getattr(train_cfg, key)
    # io.* are locations, not run-defining values: two runs that differ only in
    # where they read or write must hash identically for manifest comparison.
    return out


def config_hash(resolved: dict) -> str:
    text = "\n".join(f"{k}={resolved[k]}" for k in sorted(resolved))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def describe_version() -> str:
    here = os.path.dirname(os.path.abspath(__file__))
    try:
        out = subprocess.run(
            ["git", "describe", "--tags", "--always", "--dirty"],
            cwd=here,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except OSError:
        pass
    from . import __version__

    return f"v{__version__}"


# === output-directory lifecycle ===


def _write_manifest(out_dir: str, argv, resolved: dict) -> None:
    lines = [
        f"command=bimamba {' '.join(argv)}",
        f"config_hash={config_hash(resolved)}",
        f"seed={resolved['seed']}",
        f"version={describe_version()}",
    ]
    with open(os.path.join(out_dir, "manifest.txt"), "w") as f:
        f.write("\n".join(lines) + "\n")


def _begin_outdir(out_dir: str) -> str:
    os.makedirs(out_dir, exist_ok=True)
    marker = os.path.join(out_dir, ".incomplete")
    with open(marker, "w"):
        pass
    return marker


def _finish_outdir(marker: str, out_dir: str, args, resolved: dict) -> None:
    _write_manifest(out_dir, args._argv, resolved)
    os.remove(marker)


def _read_corpus(io_cfg: dict) -> bytes:
    path = io_cfg.get("corpus", "")
    if not path:
        raise UsageError("a corpus file is required (--corpus or io.corpus)")
    with open(path, "rb") as f:
        return f.read()


def _emit(lines, out_path: str | None, echo=print) -> None:
    text = "\n".join(lines)
    echo(text)
    if out_path is not None:
        with open(out_path, "w") as f:
            f.write(text + "\n")


# === command handlers ===


def cmd_make_corpus(args) -> int:
    from .data import synth_corpus

    model_cfg, train_cfg, io = resolve_config(args)
    resolved = _resolved_items(model_cfg, train_cfg, io, args.seed)
    marker = _begin_outdir(args.out)
    data = synth_corpus(args.n_bytes, seed=args.seed)
    with open(os.path.join(args.out, "corpus.txt"), "wb") as f:
        f.write(data)
    _finish_outdir(marker, args.out, args, resolved)
    return EXIT_OK


def cmd_train_teacher(args) -> int:
    from .data import CorpusStream
    from .model import init_model
    from .store import save_model
    from .train import train_teacher

    model_cfg, train_cfg, io = resolve_config(args)
    model_cfg = _with_scope(model_cfg, "none")
    resolved = _resolved_items(model_cfg, train_cfg, io, args.seed)
    marker = _begin_outdir(args.out)
    corpus = _read_corpus(io)
    model = init_model(model_cfg, seed=args.seed)
    stream = CorpusStream(corpus, train_cfg.seq_len, seed=args.seed)
    with open(os.path.join(args.out, "train.log"), "w") as logf:
        train_teacher(model, stream, train_cfg, log=_tee_log(logf))
    save_model(os.path.join(args.out, "teacher.bmb"), model)
    _finish_outdir(marker, args.out, args, resolved)
    return EXIT_OK


def cmd_distill(args) -> int:
    from .data import CorpusStream
    from .model import init_model
    from .store import load_model, save_model
    from .train import distill

    model_cfg, train_cfg, io = resolve_config(args)
    if model_cfg.scope == "none":
        model_cfg = _with_scope(model_cfg, "full")
    resolved = _resolved_items(model_cfg, train_cfg, io, args.seed)
    marker = _begin_outdir(args.out)
    teacher = load_model(args.teacher)
    corpus = _read_corpus(io)
    student = init_model(model_cfg, seed=args.seed)
    stream = CorpusStream(corpus, train_cfg.seq_len, seed=args.seed)
    with open(os.path.join(args.out, "train.log"), "w") as logf:
        distill(student, teacher, stream, train_cfg, log=_tee_log(logf))
    save_model(os.path.join(args.out, "student.bmb"), student)
    _finish_outdir(marker, args.out, args, resolved)
    return EXIT_OK


def cmd_ptb(args) -> int:
    from .store import load_model, ptb_binarize, save_model

    model_cfg, train_cfg, io = resolve_config(args)
    resolved = _resolved_items(model_cfg, train_cfg, io, args.seed)
    marker = _begin_outdir(args.out)
    teacher = load_model(args.teacher)
    binarized = ptb_binarize(teacher, scope=args.scope or "full")
    save_model(os.path.join(args.out, "ptb.bmb"), binarized)
    _finish_outdir(marker, args.out, args, resolved)
    return EXIT_OK


def cmd_pack(args) -> int:
    from .model import prepare_inference
    from .store import load_model, save_packed

    model_cfg, train_cfg, io = resolve_config(args)
    resolved = _resolved_items(model_cfg, train_cfg, io, args.seed)
    marker = _begin_outdir(args.out)
    model = load_model(args.model)
    inf = prepare_inference(model, packed=True)
    save_packed(os.path.join(args.out, "packed.bmb"), inf)
    _finish_outdir(marker, args.out, args, resolved)
    return EXIT_OK


def cmd_ppl(args) -> int:
    from .bench import perplexity

    model_cfg, train_cfg, io = resolve_config(args)
    resolved = _resolved_items(model_cfg, train_cfg, io, args.seed)
    marker = _begin_outdir(args.out) if args.out else None
    model = _load_any(args.model)
    corpus = _read_corpus(io)
    res = perplexity(model, corpus, args.seq_len)
    lines = [f"tokens={res.tokens} nll={res.nll:.6f} ppl={res.ppl:.6f}"]
    _emit(lines, os.path.join(args.out, "ppl.txt") if args.out else None)
    if marker:
        _finish_outdir(marker, args.out, args, resolved)
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import bench_csv, bench_generation
    from .model import encode

    model_cfg, train_cfg, io = resolve_config(args)
    resolved = _resolved_items(model_cfg, train_cfg, io, args.seed)
    marker = _begin_outdir(args.out) if args.out else None
    packed, dense = _inference_pair(args, model_cfg)
    prompt = encode(args.prompt, add_bos=True)
    rp, rd = bench_generation(packed, dense, prompt, n_tokens=args.n_tokens, runs=args.runs)
    lines = [
        f"{r.descriptor}: {r.tokens_per_s:.1f} tok/s (std {r.std:.1f}), peak {r.peak_bytes} bytes"
        for r in (rp, rd)
    ]
    print("\n".join(lines))
    if args.out:
        with open(os.path.join(args.out, "bench.csv"), "w") as f:
            f.write(bench_csv({"packed": rp, "dense": rd}))
        _finish_outdir(marker, args.out, args, resolved)
    return EXIT_OK


def cmd_scaling(args) -> int:
    from .bench import scaling_csv, scaling_curve
    from .model import prepare_inference

    model_cfg, train_cfg, io = resolve_config(args)
    resolved = _resolved_items(model_cfg, train_cfg, io, args.seed)
    marker = _begin_outdir(args.out) if args.out else None
    try:
        lengths = [int(x) for x in args.lengths.split(",") if x]
    except ValueError as e:
        raise UsageError(f"--lengths expects comma-separated integers: {e}") from e
    model = _trainable_model(args, model_cfg)
    inf = prepare_inference(model, packed=True)
    points = scaling_curve(inf, lengths)
    lines = [
        f"L={p.length}: {p.ns_per_token:.0f} ns/token, state {p.state_bytes} bytes"
        for p in points
    ]
    print("\n".join(lines))
    if args.out:
        with open(os.path.join(args.out, "scaling.csv"), "w") as f:
            f.write(scaling_csv(points))
        _finish_outdir(marker, args.out, args, resolved)
    return EXIT_OK


def cmd_census(args) -> int:
    from .store import census_report

    model_cfg, train_cfg, io = resolve_config(args)
    resolved = _resolved_items(model_cfg, train_cfg, io, args.seed)
    marker = _begin_outdir(args.out) if args.out else None
    lines = census_report(model_cfg)
    _emit(lines, os.path.join(args.out, "census.txt") if args.out else None)
    if marker:
        _finish_outdir(marker, args.out, args, resolved)
    return EXIT_OK


def cmd_storage_report(args) -> int:
    from .store import storage_report

    model_cfg, train_cfg, io = resolve_config(args)
    if args.scope is not None:
        model_cfg = _with_scope(model_cfg, args.scope)
    resolved = _resolved_items(model_cfg, train_cfg, io, args.seed)
    marker = _begin_outdir(args.out) if args.out else None
    lines = storage_report(model_cfg).lines()
    _emit(lines, os.path.join(args.out, "storage.txt") if args.out else None)
    if marker:
        _finish_outdir(marker, args.out, args, resolved)
    return EXIT_OK


def cmd_hist(args) -> int:
    from .bench import histogram_csv, weight_histogram
    from .store import load_model

    model_cfg, train_cfg, io = resolve_config(args)
    resolved = _resolved_items(model_cfg, train_cfg, io, args.seed)
    marker = _begin_outdir(args.out) if args.out else None
    model = load_model(args.model)
    rep = weight_histogram(model, args.layer, args.module, bins=args.bins)
    print(
        f"layer {rep.layer} {rep.module}: mean={rep.mean:.6f} std={rep.std:.6f} "
        f"saturation={rep.saturation:.4f}"
    )
    if args.out:
        with open(os.path.join(args.out, "hist.csv"), "w") as f:
            f.write(histogram_csv(rep))
        _finish_outdir(marker, args.out, args, resolved)
    return EXIT_OK


# === handler helpers ===


def _with_scope(model_cfg, scope: str):
    import dataclasses

    return dataclasses.replace(model_cfg, scope=scope)


def _tee_log(logf):
    def log(line: str) -> None:
        print(line)
        logf.write(line + "\n")

    return log


def _load_any(path: str):
    """Open either a trainable checkpoint or a packed deployment file."""
    from .store import TAG_BITS, load_model, load_packed, read_checkpoint

    _, entries = read_checkpoint(path)
    if any(tag == TAG_BITS for tag, _ in entries.values()):
        return load_packed(path)
    return load_model(path)


def _trainable_model(args, model_cfg):
    from .model import init_model
    from .store import load_model

    if getattr(args, "model", None):
        return load_model(args.model)
    return init_model(model_cfg, seed=args.seed)


def _inference_pair(args, model_cfg):
    """(packed, dense) twins of one model, from a trainable or packed file."""
    from .model import densify_inference, prepare_inference
    from .store import TAG_BITS, load_packed, read_checkpoint

    if getattr(args, "model", None):
        _, entries = read_checkpoint(args.model)
        if any(tag == TAG_BITS for tag, _ in entries.values()):
            packed = load_packed(args.model)
            return packed, densify_inference(packed)
    model = _trainable_model(args, model_cfg)
    return prepare_inference(model, packed=True), prepare_inference(model, packed=False)


# === parser ===


def _add_common(sp, out_required: bool) -> None:
    sp.add_argument("--threads", type=int, default=None, help="worker threads (default: $BIMAMBA_THREADS or 1)")
    sp.add_argument("--seed", type=int, default=0, help="root seed for every stochastic component")
    sp.add_argument("--config", default=None, help="INI config file with [model]/[train]/[io] sections")
    sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a single config key (repeatable)")
    sp.add_argument("--preset", default="tiny", choices=PRESET_NAMES, help="model size preset")
    sp.add_argument("--out", required=out_required, default=None, help="output directory for artifacts + manifest")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="bimamba",
        description="Train, binarize, pack, evaluate, and benchmark selective state-space language models.",
    )
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    sp = sub.add_parser("make-corpus", help="generate a deterministic synthetic text corpus")
    _add_common(sp, out_required=True)
    sp.add_argument("--n-bytes", type=int, default=1_050_000, help="corpus size in bytes")
    sp.set_defaults(handler=cmd_make_corpus)

    sp = sub.add_parser("train-teacher", help="train a full-precision teacher on next-token loss")
    _add_common(sp, out_required=True)
    sp.add_argument("--corpus", default=None, help="training text file (io.corpus)")
    sp.add_argument("--steps", type=int, default=None, help="optimizer steps (train.steps)")
    sp.set_defaults(handler=cmd_train_teacher, scope=None)

    sp = sub.add_parser("distill", help="train a binarized student against a teacher's distributions")
    _add_common(sp, out_required=True)
    sp.add_argument("--teacher", required=True, help="teacher checkpoint (.bmb)")
    sp.add_argument("--corpus", default=None, help="training text file (io.corpus)")
    sp.add_argument("--steps", type=int, default=None, help="optimizer steps (train.steps)")
    sp.add_argument("--scope", default=None, choices=("full", "partial"), help="which projections to binarize")
    sp.set_defaults(handler=cmd_distill)

    sp = sub.add_parser("ptb", help="binarize a trained checkpoint without any retraining")
    _add_common(sp, out_required=True)
    sp.add_argument("--teacher", required=True, help="full-precision checkpoint (.bmb)")
    sp.add_argument("--scope", default="full", choices=("full", "partial"))
    sp.set_defaults(handler=cmd_ptb)

    sp = sub.add_parser("pack", help="pack a binarized checkpoint into sign-bit deployment form")
    _add_common(sp, out_required=True)
    sp.add_argument("--model", required=True, help="binarized checkpoint (.bmb)")
    sp.set_defaults(handler=cmd_pack)

    sp = sub.add_parser("ppl", help="evaluate perplexity on a text file")
    _add_common(sp, out_required=False)
    sp.add_argument("--model", required=True, help="checkpoint, trainable or packed (.bmb)")
    sp.add_argument("--corpus", default=None, help="evaluation text file (io.corpus)")
    sp.add_argument("--seq-len", type=int, default=256, help="evaluation window length")
    sp.set_defaults(handler=cmd_ppl)

    sp = sub.add_parser("bench", help="time packed vs dense generation on identical outputs")
    _add_common(sp, out_required=False)
    sp.add_argument("--model", default=None, help="checkpoint to bench (default: fresh preset init)")
    sp.add_argument("--prompt", default="The study changed. ", help="prompt text")
    sp.add_argument("--n-tokens", type=int, default=128)
    sp.add_argument("--runs", type=int, default=5)
    sp.set_defaults(handler=cmd_bench)

    sp = sub.add_parser("scaling", help="per-token step time across sequence lengths")
    _add_common(sp, out_required=False)
    sp.add_argument("--model", default=None, help="checkpoint to measure (default: fresh preset init)")
    sp.add_argument("--lengths", default="256,512,1024,2048", help="comma-separated lengths")
    sp.set_defaults(handler=cmd_scaling)

    sp = sub.add_parser("census", help="parameter counts per bucket with percentages")
    _add_common(sp, out_required=False)
    sp.set_defaults(handler=cmd_census)

    sp = sub.add_parser("storage-report", help="packed storage footprint vs half-precision baseline")
    _add_common(sp, out_required=False)
    sp.add_argument("--scope", default=None, choices=("full", "partial", "none"))
    sp.set_defaults(handler=cmd_storage_report)

    sp = sub.add_parser("hist", help="weight histogram for one module of a checkpoint")
    _add_common(sp, out_required=False)
    sp.add_argument("--model", required=True, help="trainable checkpoint (.bmb)")
    sp.add_argument("--layer", type=int, default=0)
    sp.add_argument("--module", default="in_proj", choices=("in_proj", "out_proj", "conv", "embedding"))
    sp.add_argument("--bins", type=int, default=64)
    sp.set_defaults(handler=cmd_hist)

    return p


def pin_threads(n: int) -> None:
    """Fix every math-library thread pool; must run before numpy is imported."""
    if n < 1:
        raise UsageError(f"--threads must be >= 1, got {n}")
    for var in THREAD_ENV_VARS:
        os.environ[var] = str(n)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args._argv = argv
    try:
        if args.threads is not None:
            threads = args.threads
        else:
            raw = os.environ.get("BIMAMBA_THREADS", "1")
            try:
                threads = int(raw)
            except ValueError:
                raise UsageError(f"BIMAMBA_THREADS must be an integer, got {raw!r}") from None
        pin_threads(threads)
        from .bench import BenchError
        from .store import CheckpointError
        from .train import TrainingError

        try:
            return args.handler(args)
        except (CheckpointError, TrainingError, BenchError, ValueError, OSError) as e:
            print(f"bimamba {args.command}: error: {e}", file=sys.stderr)
            return EXIT_FAILURE
    except UsageError as e:
        print(f"bimamba {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
