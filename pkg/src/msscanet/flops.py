"""Multiply-accumulate accounting for the network, closed form and instrumented.

Only linear-algebra primitives are counted: matrix products, 1x1 convolutions and
the channel re-weighting product.  Bias additions, normalisation, softmax and
activation functions are excluded.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .model import BRANCHES, Model, ModelConfig, forward
from .tensor import count_macs, no_grad

COMPONENTS = ("patch_embed", "window_attention", "channel_attention", "cross_attention",
              "mlp", "head")

# reported per-token figure, kept only for side-by-side display
REFERENCE_FLOPS_PER_TOKEN = 14.7e6


@dataclass
class FlopsBreakdown:
    components: dict[str, int]
    tokens: int
    attention_scores: int = 0  # Q K^T MACs of the windowed attention (subset of window_attention)
    notes: dict[str, str] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return sum(self.components.values())

    @property
    def per_token(self) -> float:
        return self.total / self.tokens if self.tokens else 0.0

    def rows(self) -> list[tuple[str, int]]:
        return [(k, self.components[k]) for k in COMPONENTS] + [("total", self.total)]

    def to_text(self) -> str:
        width = max(len(k) for k in COMPONENTS + ("per_token",))
        lines = [f"{'component':<{width}}  {'MACs':>16}"]
        lines += [f"{name:<{width}}  {n:>16,d}" for name, n in self.rows()]
        lines.append(f"{'per_token':<{width}}  {self.per_token:>16,.1f}")
        lines.append(f"{'scores':<{width}}  {self.attention_scores:>16,d}")
        lines.append(f"(reference: {REFERENCE_FLOPS_PER_TOKEN / 1e6:.1f}M FLOPs/token reported "
                     f"for the full-size model; counting conventions differ)")
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["component", "macs"])
        w.writerows(self.rows())
        w.writerow(["per_token", f"{self.per_token:.6f}"])
        w.writerow(["attention_scores", self.attention_scores])
        return buf.getvalue()


def window_attention_macs(n_tokens: int, d: int, window_tokens: int) -> tuple[int, int]:
    """``(total, qk_scores)`` for one windowed attention layer over ``n_tokens``.

    Projections cost ``4 N d^2``; each of the ``N / N_w`` windows costs
    ``N_w^2 d`` for the scores and the same again for weighting the values.
    """
    windows = n_tokens // window_tokens
    scores = windows * window_tokens ** 2 * d
    return 4 * n_tokens * d * d + 2 * scores, scores


def flops_analytic(config: ModelConfig, global_attention: bool = False) -> FlopsBreakdown:
    """Closed-form MACs of one forward pass.

    With ``global_attention`` every branch attends over its whole grid instead of
    windows, which is the quadratic reference the windowed design is compared to.
    """
    d, r = config.embed_dim, config.reduction
    comp = dict.fromkeys(COMPONENTS, 0)
    scores_total = 0
    tokens = {}
    for b in config.branches:
        p, g = config.patch_size(b), config.grid(b)
        n = g * g
        tokens[b] = n
        comp["patch_embed"] += n * 3 * p * p * d
        window_tokens = n if global_attention else config.window_size ** 2
        for _ in range(config.depth):
            if config.use_spatial:
                macs, scores = window_attention_macs(n, d, window_tokens)
                comp["window_attention"] += macs
                scores_total += scores
            if config.use_channel:
                comp["channel_attention"] += 2 * d * (d // r) + d * n
            comp["mlp"] += 8 * n * d * d
    if config.use_cross:
        n_s, n_l = tokens["short"], tokens["long"]
        comp["cross_attention"] = 4 * (n_s + n_l) * d * d + 4 * n_s * n_l * d
    fused = d * len(config.branches)
    comp["head"] = fused * config.head_hidden + config.head_hidden
    return FlopsBreakdown(comp, sum(tokens.values()), scores_total)


def flops_measured(model: Model, image=None) -> FlopsBreakdown:
    """Run one instrumented forward pass and tally the MACs actually executed."""
    cfg = model.config
    if image is None:
        image = np.zeros((3, cfg.image_size, cfg.image_size))
    with no_grad(), count_macs() as counter:
        forward(model, image)
    comp = {k: counter.component(k) for k in COMPONENTS}
    unattributed = counter.total - sum(comp.values())
    notes = {"unattributed": str(unattributed)} if unattributed else {}
    tokens = sum(cfg.grid(b) ** 2 for b in BRANCHES if b in cfg.branches)
    return FlopsBreakdown(comp, tokens, counter.path("window_attention", "scores"), notes)
