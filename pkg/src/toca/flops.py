"""Analytic FLOPs model for the toy transformer, plus an instrumented counter.

Cost conventions used throughout:

- one multiply-accumulate = 2 flops, so a matmul (m,k)@(k,n) costs 2*m*k*n
- softmax = 5 flops per element of the attention map
- the MLP activation = 6 flops per element
- sort/argmax overheads use log base 2

Layer norms, residual additions and the attention scaling divide are not
charged; the closed forms price exactly the matrix products, softmaxes and
activations the model executes, which is what the instrumented counter
cross-check verifies.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

FLOPS_PER_MAC = 2
SOFTMAX_FLOPS_PER_ELEMENT = 5
ACTIVATION_FLOPS_PER_ELEMENT = 6


def flops_self_attention(n_tokens: int, hidden: int, heads: int) -> int:
    """Q/K/V/output projections plus per-head map build, softmax and apply.

    8*N*D^2 + 4*N^2*D + 5*N^2*H
    """
    n, d, h = n_tokens, hidden, heads
    return 8 * n * d * d + 4 * n * n * d + 5 * n * n * h


def flops_cross_attention(n_img: int, n_text: int, hidden: int, heads: int) -> int:
    """Image-query / text-key attention: 4*(N1+N2)*D^2 + 4*N1*N2*D + 5*N1*N2*H."""
    n1, n2, d, h = n_img, n_text, hidden, heads
    return 4 * (n1 + n2) * d * d + 4 * n1 * n2 * d + 5 * n1 * n2 * h


def flops_mlp(n_tokens: int, hidden: int) -> int:
    """Two projections through a 4*D hidden layer plus the activation: 16*N*D^2 + 24*N*D."""
    n, d = n_tokens, hidden
    return 16 * n * d * d + 24 * n * d


def flops_selection_overhead(n_tokens: int, grid_size: int) -> float:
    """Per-dispatch cost of computing scores and picking the cached token set.

    Charges N for the attention-influence score, 2N for the entropy score,
    3N for the counter score, N*log2(G^2) + 2N/G^2 for the per-cell argmax
    boost, and N*log2(N) for the global sort.
    """
    n = n_tokens
    g = grid_size
    if n < 1 or g < 1:
        raise ValueError("n_tokens and grid_size must be >= 1")
    s1 = n
    s2 = 2 * n
    s3 = 3 * n
    s4 = n * math.log2(g * g) + 2 * n / (g * g)
    global_sort = n * math.log2(n) if n > 1 else 0.0
    return float(s1 + s2 + s3 + s4 + global_sort)


class FlopCounter:
    """Accumulates flops for the primitive ops the cost model prices."""

    def __init__(self) -> None:
        self.flops = 0

    def matmul(self, m: int, k: int, n: int) -> None:
        self.flops += FLOPS_PER_MAC * m * k * n

    def softmax(self, elements: int) -> None:
        self.flops += SOFTMAX_FLOPS_PER_ELEMENT * elements

    def activation(self, elements: int) -> None:
        self.flops += ACTIVATION_FLOPS_PER_ELEMENT * elements


@dataclass
class FlopsReport:
    """Totals for one generation run under a caching schedule."""

    baseline_flops: float
    cached_flops: float
    overhead_flops: float
    speedup: float
    fresh_steps: int
    total_steps: int
    per_type_baseline: dict[str, float] = field(default_factory=dict)
    per_type_cached: dict[str, float] = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "baseline_flops": self.baseline_flops,
            "cached_flops": self.cached_flops,
            "overhead_flops": self.overhead_flops,
            "speedup": self.speedup,
            "fresh_steps": self.fresh_steps,
            "total_steps": self.total_steps,
            "per_type_baseline": dict(self.per_type_baseline),
            "per_type_cached": dict(self.per_type_cached),
        }


def _partial_module_cost(kind: str, f: float, n: int, n2: int, d: int, h: int) -> float:
    # f is the computed token fraction. Projection terms (token count * D^2)
    # scale linearly with f; attention-map terms scale quadratically, matching
    # the complexity model the schedule is tuned against.
    if f <= 0.0:
        return 0.0
    if kind == "self_attn":
        return f * (8 * n * d * d) + f * f * (4 * n * n * d + 5 * n * n * h)
    if kind == "cross_attn":
        return f * (4 * (n + n2) * d * d) + f * f * (4 * n * n2 * d + 5 * n * n2 * h)
    if kind == "mlp":
        return f * (16 * n * d * d + 24 * n * d)
    raise ValueError(f"unknown module kind {kind!r}")


def estimate_run_flops(
    depth: int,
    hidden: int,
    heads: int,
    n_tokens: int,
    n_text: int,
    total_steps: int,
    cfg_doubled: bool,
    schedule,
) -> FlopsReport:
    """Price a full generation run analytically.

    Fresh steps pay the full per-forward cost. At every other step each
    (layer, module) dispatch pays its computed-token fraction of the module
    cost plus, whenever an actual selection runs (0 < cached < N), the
    scoring/sort overhead. Classifier-free guidance doubles everything.
    """
    from .cache import cache_token_count, cycle_plan, effective_cache_ratio, type_ratio_factors

    schedule.validate()
    halves = 2 if cfg_doubled else 1
    kinds = ["self_attn"] + (["cross_attn"] if n_text > 0 else []) + ["mlp"]
    full_cost = {
        "self_attn": flops_self_attention(n_tokens, hidden, heads),
        "mlp": flops_mlp(n_tokens, hidden),
    }
    if n_text > 0:
        full_cost["cross_attn"] = flops_cross_attention(n_tokens, n_text, hidden, heads)

    per_forward = depth * sum(full_cost[k] for k in kinds)
    baseline = float(total_steps * halves * per_forward)
    per_type_baseline = {k: float(total_steps * halves * depth * full_cost[k]) for k in kinds}

    fresh = set(cycle_plan(schedule, total_steps))
    factors = type_ratio_factors(schedule, hidden, heads, n_tokens, n_text)

    cached = 0.0
    overhead = 0.0
    per_type_cached = {k: 0.0 for k in kinds}
    for t in range(total_steps):
        if t in fresh:
            cached += halves * per_forward
            for k in kinds:
                per_type_cached[k] += halves * depth * full_cost[k]
            continue
        for layer in range(depth):
            for k in kinds:
                r_eff = effective_cache_ratio(
                    layer, t, k, schedule, depth, total_steps, factors
                )
                n_cached = cache_token_count(r_eff, n_tokens)
                f = (n_tokens - n_cached) / n_tokens
                cost = halves * _partial_module_cost(k, f, n_tokens, n_text, hidden, heads)
                cached += cost
                per_type_cached[k] += cost
                if 0 < n_cached < n_tokens:
                    overhead += halves * flops_selection_overhead(n_tokens, schedule.grid_size)

    total = cached + overhead
    return FlopsReport(
        baseline_flops=baseline,
        cached_flops=total,
        overhead_flops=overhead,
        speedup=baseline / total,
        fresh_steps=len(fresh),
        total_steps=total_steps,
        per_type_baseline=per_type_baseline,
        per_type_cached=per_type_cached,
    )


def verify_closed_forms(n_tokens: int, hidden: int, heads: int, n_text: int = 0, seed: int = 0) -> dict[str, bool]:
    """Run each module once with a counter attached and compare against the closed forms."""
    from . import linalg, model

    rng_seed = np.random.SeedSequence((seed, 7))
    x = linalg.gaussian((n_tokens, hidden), 1.0, rng_seed)
    rng = np.random.Generator(np.random.PCG64((seed, 11)))
    scale = hidden ** -0.5

    results: dict[str, bool] = {}

    sa = model.SelfAttnWeights(
        wq=rng.standard_normal((hidden, hidden)) * scale,
        wk=rng.standard_normal((hidden, hidden)) * scale,
        wv=rng.standard_normal((hidden, hidden)) * scale,
        wo=rng.standard_normal((hidden, hidden)) * scale,
    )
    counter = FlopCounter()
    model.self_attention_forward(x, sa, heads, counter=counter)
    results["self_attn"] = counter.flops == flops_self_attention(n_tokens, hidden, heads)

    if n_text > 0:
        text = linalg.gaussian((n_text, hidden), 1.0, np.random.SeedSequence((seed, 13)))
        ca = model.CrossAttnWeights(
            wq=rng.standard_normal((hidden, hidden)) * scale,
            wk=rng.standard_normal((hidden, hidden)) * scale,
            wv=rng.standard_normal((hidden, hidden)) * scale,
            wo=rng.standard_normal((hidden, hidden)) * scale,
        )
        counter = FlopCounter()
        model.cross_attention_forward(x, text, ca, heads, counter=counter)
        results["cross_attn"] = counter.flops == flops_cross_attention(
            n_tokens, n_text, hidden, heads
        )

    mlp = model.MlpWeights(
        w1=rng.standard_normal((hidden, 4 * hidden)) * scale,
        w2=rng.standard_normal((4 * hidden, hidden)) * (4 * hidden) ** -0.5,
    )
    counter = FlopCounter()
    model.mlp_forward(x, mlp, counter=counter)
    results["mlp"] = counter.flops == flops_mlp(n_tokens, hidden)
    return results
