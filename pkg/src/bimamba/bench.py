"""Evaluation and measurement: perplexity, throughput, scaling, histograms.

Timing conventions: wall clock, warmup excluded, at least five measured
runs with the standard deviation reported, single-threaded.  Generation
benchmarks verify that the packed and dense paths emit identical tokens
before any timing happens — speed numbers always certify correctness.
Memory figures are allocation accounting (weights plus recurrent state),
not OS-level sampling, so they are exact and reproducible.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .fbi import FbiLinearParams, PackedMatrix, binarize, effective_weight, pack, packed_gemv
from .model import (
    BiMambaModel,
    InferenceModel,
    generate,
    init_states,
    model_forward,
    model_step,
)
from .tensor import Tensor


class BenchError(RuntimeError):
    pass


# === perplexity ===


@dataclass
class PerplexityResult:
    tokens: int
    nll: float  # total negative log-likelihood, nats
    ppl: float  # exp(nll / tokens)


def perplexity(model, corpus: bytes, seq_len: int) -> PerplexityResult:
    """Next-token perplexity over non-overlapping [BOS]+seq_len windows.

    State resets at every window boundary.  `model` is either a trainable
    model or any callable mapping a token id array to a logits array.
    """
    if seq_len < 1:
        raise ValueError("seq_len must be positive")
    n_windows = len(corpus) // seq_len
    if n_windows < 1:
        raise ValueError(f"corpus of {len(corpus)} bytes is too short for one {seq_len}-byte window")
    from .data import CorpusStream  # local import to avoid a cycle at module load

    windows = CorpusStream(corpus, seq_len, seed=0).windows  # unshuffled layout
    nll = 0.0
    with T.no_grad():
        for row in windows:
            logits = _logits_of(model, row[:-1])
            logp = _log_softmax_np(logits)
            nll -= float(logp[np.arange(seq_len), row[1:]].sum())
    tokens = n_windows * seq_len
    return PerplexityResult(tokens=tokens, nll=nll, ppl=float(np.exp(nll / tokens)))


def _logits_of(model, tokens: np.ndarray) -> np.ndarray:
    if isinstance(model, BiMambaModel):
        return model_forward(model, tokens).data
    if isinstance(model, InferenceModel):
        states = init_states(model)
        return np.stack([model_step(model, int(t), states) for t in tokens])
    return np.asarray(model(tokens))


def _log_softmax_np(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.float64)
    x = x - x.max(axis=1, keepdims=True)
    return x - np.log(np.exp(x).sum(axis=1, keepdims=True))


# === generation benchmark ===


@dataclass
class BenchResult:
    tokens_per_s: float
    std: float
    peak_bytes: int  # weights + recurrent state, exact accounting
    descriptor: str


def _resident_bytes(inf: InferenceModel) -> int:
    states = init_states(inf)
    return inf.weight_bytes + sum(s.nbytes for s in states)


def bench_generation(
    packed: InferenceModel,
    dense: InferenceModel,
    prompt: np.ndarray,
    n_tokens: int = 128,
    runs: int = 5,
) -> tuple[BenchResult, BenchResult]:
    """Throughput of the packed vs dense step path on identical output."""
    if n_tokens < 1:
        raise ValueError("n_tokens must be positive")
    if runs < 5:
        raise ValueError("need at least 5 measured runs")
    if packed.config != dense.config:
        raise ValueError("models must share a config")
    out_p = generate(packed, prompt, n_tokens)
    out_d = generate(dense, prompt, n_tokens)
    if not np.array_equal(out_p, out_d):
        raise BenchError("packed and dense generation disagree; refusing to time incorrect output")

    def measure(inf: InferenceModel, label: str) -> BenchResult:
        generate(inf, prompt, n_tokens)  # warmup
        rates = []
        for _ in range(runs):
            t0 = time.perf_counter()
            generate(inf, prompt, n_tokens)
            rates.append(n_tokens / (time.perf_counter() - t0))
        rates = np.asarray(rates)
        return BenchResult(
            tokens_per_s=float(rates.mean()),
            std=float(rates.std()),
            peak_bytes=_resident_bytes(inf),
            descriptor=label,
        )

    return measure(packed, "packed"), measure(dense, "dense")


# === packed-kernel microbenchmark ===


@dataclass
class KernelBench:
    d_model: int
    d_inner: int
    dense_seconds: float  # per in-proj + out-proj matrix-vector pair
    packed_seconds: float

    @property
    def speedup(self) -> float:
        return self.dense_seconds / self.packed_seconds


def kernel_bench(d_inner: int, d_state: int = 128, repeats: int = 7, iters: int = 32, seed: int = 0) -> KernelBench:
    """Packed vs dense fp32 matrix-vector time for one block's projections.

    Shapes follow a block at this inner width: the input projection
    (2*d_inner + 2*d_state + n_heads, d_model) and the output projection
    (d_model, d_inner), with d_model = d_inner / 2 and 64-wide heads.
    Best-of-`repeats` timing over `iters` calls per trial, single thread.
    """
    if d_inner % 128:
        raise ValueError("d_inner must be a multiple of 128")
    d_model = d_inner // 2
    n_heads = d_inner // 64
    rng = np.random.default_rng(seed)
    pairs = []
    for m, n in ((2 * d_inner + 2 * d_state + n_heads, d_model), (d_model, d_inner)):
        w_b = binarize(rng.normal(size=(m, n))).astype(np.float32)
        alpha = rng.uniform(0.5, 1.5, size=n).astype(np.float32)
        beta = rng.normal(0.0, 0.1, size=n).astype(np.float32)
        packed = pack(w_b, alpha, beta)
        dense = (w_b * alpha[None, :] + beta[None, :]).astype(np.float32)
        x = rng.normal(size=n).astype(np.float32)
        pairs.append((packed, dense, x))

    for packed, dense, x in pairs:  # warmup (includes any JIT)
        np.testing.assert_allclose(packed_gemv(packed, x), dense @ x, atol=1e-2)

    def best_of(fn) -> float:
        best = np.inf
        for _ in range(repeats):
            t0 = time.perf_counter()
            for _ in range(iters):
                fn()
            best = min(best, (time.perf_counter() - t0) / iters)
        return best

    dense_t = best_of(lambda: [d @ x for _, d, x in pairs])
    packed_t = best_of(lambda: [packed_gemv(p, x) for p, _, x in pairs])
    return KernelBench(d_model=d_model, d_inner=d_inner, dense_seconds=dense_t, packed_seconds=packed_t)


# === sequence-length scaling ===


@dataclass
class ScalingPoint:
    length: int
    ns_per_token: float
    state_bytes: int


def measure_step_time(inf: InferenceModel, n_steps: int, repeats: int = 3, seed: int = 0) -> float:
    """Seconds per recurrent step, best of `repeats` timed walks."""
    rng = np.random.default_rng(seed)
    tokens = rng.integers(0, inf.config.vocab_size, size=n_steps)
    best = np.inf
    for _ in range(repeats + 1):  # first walk doubles as warmup
        states = init_states(inf)
        t0 = time.perf_counter()
        for tok in tokens:
            model_step(inf, int(tok), states)
        dt = time.perf_counter() - t0
        best = min(best, dt)
    return best / n_steps


def scaling_curve(inf: InferenceModel, lengths: list[int], seed: int = 0) -> list[ScalingPoint]:
    """Per-token recurrent step time at each sequence length.

    Constant per-token cost (state never grows) is the linear-complexity
    claim; callers check the largest/smallest ratio.
    """
    if list(lengths) != sorted(lengths) or len(lengths) < 1:
        raise ValueError("lengths must be ascending and non-empty")
    rng = np.random.default_rng(seed)
    points = []
    for L in lengths:
        tokens = rng.integers(0, inf.config.vocab_size, size=L)
        states = init_states(inf)
        for tok in tokens[: min(32, L)]:
            model_step(inf, int(tok), states)  # warmup
        states = init_states(inf)
        t0 = time.perf_counter()
        for tok in tokens:
            model_step(inf, int(tok), states)
        dt = time.perf_counter() - t0
        if dt < 1e-3:
            raise BenchError(
                f"aggregate time {dt * 1e3:.3f} ms at length {L} is below the 1 ms timer floor"
            )
        points.append(
            ScalingPoint(length=int(L), ns_per_token=dt / L * 1e9, state_bytes=sum(s.nbytes for s in states))
        )
    return points


# === weight histograms and distribution distance ===


MODULE_KINDS = ("in_proj", "out_proj", "conv", "embedding")


@dataclass
class HistogramReport:
    layer: int
    module: str
    edges: np.ndarray  # uniform, len = bins + 1
    counts: np.ndarray  # len = bins
    mean: float
    std: float
    saturation: float  # fraction of latent entries at the clamp boundary


def _module_values(model: BiMambaModel, layer: int, module: str) -> tuple[np.ndarray, float]:
    """(values to histogram, latent saturation fraction) for one module."""
    if module not in MODULE_KINDS:
        raise ValueError(f"unknown module kind {module!r}; expected one of {MODULE_KINDS}")
    if module == "embedding":
        return model.embedding.data.ravel(), 0.0
    if not 0 <= layer < len(model.layers):
        raise ValueError(f"layer {layer} out of range")
    blk = model.layers[layer]
    if module == "conv":
        return blk.conv_weight.data.ravel(), 0.0
    proj = blk.in_proj if module == "in_proj" else blk.out_proj
    if isinstance(proj, FbiLinearParams):
        sat = float(np.mean(np.abs(proj.weight.data) >= 1.0 - 1e-6))
        return effective_weight(proj).ravel(), sat
    return proj.weight.data.ravel(), 0.0


def weight_histogram(model: BiMambaModel, layer: int, module: str, bins: int = 64) -> HistogramReport:
    """Distribution of a module's deployed weights.

    Binarized projections are histogrammed after scaling and shifting
    (the values inference actually multiplies by); everything else uses
    the raw weights.
    """
    if bins < 1:
        raise ValueError("bins must be positive")
    values, sat = _module_values(model, layer, module)
    lo, hi = float(values.min()), float(values.max())
    if lo == hi:  # degenerate single-value tensor still gets a valid span
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, bins + 1)
    counts, _ = np.histogram(values, bins=edges)
    return HistogramReport(
        layer=layer,
        module=module,
        edges=edges,
        counts=counts,
        mean=float(values.mean()),
        std=float(values.std()),
        saturation=sat,
    )


def symmetric_kl(p_counts: np.ndarray, q_counts: np.ndarray) -> float:
    """Symmetric KL between two histograms over shared edges, add-one smoothed."""
    p_counts = np.asarray(p_counts, dtype=np.float64)
    q_counts = np.asarray(q_counts, dtype=np.float64)
    if p_counts.shape != q_counts.shape:
        raise ValueError("histograms must share bin edges")
    p = (p_counts + 1.0) / (p_counts + 1.0).sum()
    q = (q_counts + 1.0) / (q_counts + 1.0).sum()
    return float((p * np.log(p / q)).sum() + (q * np.log(q / p)).sum())


def distribution_distance(binarized: BiMambaModel, teacher: BiMambaModel, bins: int = 64) -> float:
    """How far a binarized model's deployed projection weights sit from the
    teacher's full-precision ones: symmetric KL over shared bins, summed
    across every binarized projection."""
    if len(binarized.layers) != len(teacher.layers):
        raise ValueError("models must have the same depth")
    total = 0.0
    compared = 0
    for i, (s_blk, t_blk) in enumerate(zip(binarized.layers, teacher.layers)):
        for role in ("in_proj", "out_proj"):
            s_proj = getattr(s_blk, role)
            if not isinstance(s_proj, FbiLinearParams):
                continue
            t_proj = getattr(t_blk, role)
            s_vals = effective_weight(s_proj).ravel()
            t_vals = t_proj.weight.data.ravel()
            lo = min(float(s_vals.min()), float(t_vals.min()))
            hi = max(float(s_vals.max()), float(t_vals.max()))
            if lo == hi:
                lo, hi = lo - 0.5, hi + 0.5
            edges = np.linspace(lo, hi, bins + 1)
            total += symmetric_kl(np.histogram(s_vals, bins=edges)[0], np.histogram(t_vals, bins=edges)[0])
            compared += 1
    if compared == 0:
        raise ValueError("model has no binarized projections to compare")
    return total


# === CSV export ===


def histogram_csv(report: HistogramReport) -> str:
    lines = ["bin_lo,bin_hi,count"]
    for lo, hi, c in zip(report.edges[:-1], report.edges[1:], report.counts):
        lines.append(f"{lo:.8g},{hi:.8g},{int(c)}")
    return "\n".join(lines) + "\n"


def scaling_csv(points: list[ScalingPoint]) -> str:
    lines = ["length,ns_per_token"]
    for p in points:
        lines.append(f"{p.length},{p.ns_per_token:.1f}")
    return "\n".join(lines) + "\n"


def bench_csv(results: dict[str, BenchResult]) -> str:
    lines = ["path,tokens_per_s,std,peak_bytes"]
    for name, r in results.items():
        lines.append(f"{name},{r.tokens_per_s:.3f},{r.std:.3f},{r.peak_bytes}")
    return "\n".join(lines) + "\n"
