"""Analytic prefill FLOPs and KV-cache size under visual-token pruning.

Counting convention: one multiply-accumulate = 2 FLOPs. Per layer, with
``n`` tokens resident:

* Q, K, V, O projections      8 n d^2
* attention scores + mixing   4 n^2 d
* feed-forward                2 m n d f   (m = 2 plain MLP, m = 3 gated)

Layers before the compression layer see ``N + text`` tokens, layers from it
onward see ``retained + text``. The LM head (2 n d V) runs on the final
length. Decode-phase cost and wall-clock time are not modelled.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .compress import keep_count


@dataclass(frozen=True)
class ArchSpec:
    n_layers: int
    d_model: int
    n_heads: int
    ffn_dim: int
    vocab_size: int
    bytes_per_element: int = 2
    ffn_matrices: int = 2

    def __post_init__(self):
        for k in ("n_layers", "d_model", "n_heads", "ffn_dim", "vocab_size",
                  "bytes_per_element", "ffn_matrices"):
            if getattr(self, k) <= 0:
                raise ValueError(f"{k} must be positive")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")


PRESETS = {
    # LLaMA-style 7B decoder; gated (SwiGLU) FFN has three d x f matrices
    "7b-class": ArchSpec(n_layers=32, d_model=4096, n_heads=32, ffn_dim=11008,
                         vocab_size=32000, bytes_per_element=2, ffn_matrices=3),
    "toy": ArchSpec(n_layers=2, d_model=64, n_heads=2, ffn_dim=128, vocab_size=132,
                    bytes_per_element=8, ffn_matrices=2),
}


@dataclass(frozen=True)
class WorkloadSpec:
    visual_tokens: int
    text_tokens: int
    compression_layer: int = 2
    ratio: float = 0.0

    @property
    def retained(self) -> int:
        if self.visual_tokens == 0:
            return 0
        return keep_count(self.visual_tokens, self.ratio)

    @classmethod
    def keeping(cls, visual_tokens: int, retained: int, text_tokens: int,
                compression_layer: int = 2) -> "WorkloadSpec":
        """Workload whose ratio keeps exactly ``retained`` of ``visual_tokens``."""
        w = cls(visual_tokens, text_tokens, compression_layer, 1.0 - retained / visual_tokens)
        if w.retained != retained:
            raise ValueError(f"no ratio keeps exactly {retained} of {visual_tokens}")
        return w


def layer_flops(arch: ArchSpec, n: int) -> float:
    d = arch.d_model
    return 8.0 * n * d * d + 4.0 * n * n * d + 2.0 * arch.ffn_matrices * n * d * arch.ffn_dim


def prefill_flops(arch: ArchSpec, workload: WorkloadSpec) -> float:
    n_full = workload.visual_tokens + workload.text_tokens
    n_comp = workload.retained + workload.text_tokens
    ell = workload.compression_layer
    pre = min(max(ell - 1, 0), arch.n_layers)
    post = arch.n_layers - pre
    n_last = n_comp if post > 0 else n_full
    return (pre * layer_flops(arch, n_full) + post * layer_flops(arch, n_comp)
            + 2.0 * n_last * arch.d_model * arch.vocab_size)


def kv_cache_bytes(arch: ArchSpec, workload: WorkloadSpec, include_text: bool = True) -> int:
    """Resident K/V bytes across all layers.

    Pruned tokens' caches from layers before the compression layer are
    dropped, so only ``retained`` visual tokens count.
    """
    tokens = workload.retained + (workload.text_tokens if include_text else 0)
    return int(tokens * arch.n_layers * 2 * arch.d_model * arch.bytes_per_element)


@dataclass(frozen=True)
class SweepRow:
    tokens: int
    flops: float
    kv_bytes: int


def sweep_tokens(arch: ArchSpec, retained_counts, visual_tokens: int = 576, text_tokens: int = 0,
                 compression_layer: int = 2) -> list[SweepRow]:
    rows = []
    for k in sorted(int(k) for k in retained_counts):
        if not 1 <= k <= visual_tokens:
            raise ValueError(f"retained count {k} outside [1, {visual_tokens}]")
        w = WorkloadSpec.keeping(visual_tokens, k, text_tokens, compression_layer)
        rows.append(SweepRow(k, prefill_flops(arch, w), kv_cache_bytes(arch, w)))
    return rows


def reduction(full: float, compressed: float) -> float:
    return 1.0 - compressed / full


# published reference figures for a 7B decoder with 576 visual tokens, pruning at layer 2
REFERENCE = {
    "flops_full": 9.3e12,
    "flops_64": 1.5e12,
    "flops_128": 2.0e12,
    "flops_reduction_64": 0.839,
    "kv_mb_full": 367.2,
    "kv_mb_64": 40.9,
    "kv_reduction_64": 0.889,
}


def fit_text_tokens(arch: ArchSpec, visual_tokens: int = 576, layer: int = 2,
                    max_text: int = 1024) -> int:
    """Text length minimising squared log-error against the reference FLOPs."""
    best, best_err = 0, np.inf
    targets = [(visual_tokens, REFERENCE["flops_full"]), (64, REFERENCE["flops_64"]),
               (128, REFERENCE["flops_128"])]
    for text in range(max_text + 1):
        err = 0.0
        for kept, ref in targets:
            w = WorkloadSpec.keeping(visual_tokens, kept, text, layer)
            err += np.log(prefill_flops(arch, w) / ref) ** 2
        if err < best_err:
            best, best_err = text, err
    return best


def calibration_report(arch: ArchSpec, text_tokens: int | None = None, visual_tokens: int = 576,
                       layer: int = 2) -> dict:
    """Reproduce the full vs 64 vs 128 token comparison for ``arch``."""
    if text_tokens is None:
        text_tokens = fit_text_tokens(arch, visual_tokens, layer)
    full = WorkloadSpec(visual_tokens, text_tokens, layer, 0.0)
    w64 = WorkloadSpec.keeping(visual_tokens, 64, text_tokens, layer)
    w128 = WorkloadSpec.keeping(visual_tokens, 128, text_tokens, layer)
    f_full, f64, f128 = (prefill_flops(arch, w) for w in (full, w64, w128))
    kv_full_vis = kv_cache_bytes(arch, full, include_text=False)
    kv_64_vis = kv_cache_bytes(arch, w64, include_text=False)
    return {
        "text_tokens": text_tokens,
        "flops_full": f_full,
        "flops_64": f64,
        "flops_128": f128,
        "flops_reduction_64": reduction(f_full, f64),
        "kv_bytes_full": kv_cache_bytes(arch, full),
        "kv_bytes_64": kv_cache_bytes(arch, w64),
        "kv_reduction_64_with_text": reduction(kv_cache_bytes(arch, full), kv_cache_bytes(arch, w64)),
        # visual-span accounting: text caches are identical on both sides and left out
        "kv_reduction_64": reduction(kv_full_vis, kv_64_vis),
        "kv_bytes_per_visual_token": kv_full_vis / visual_tokens,
        "reference_mb_per_visual_token": REFERENCE["kv_mb_full"] / visual_tokens,
    }


def write_sweep_csv(path, rows: list[SweepRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["tokens", "flops", "kv_bytes"])
        for r in rows:
            w.writerow([r.tokens, f"{r.flops:.6e}", r.kv_bytes])
