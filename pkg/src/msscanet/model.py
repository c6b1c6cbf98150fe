"""Dual-branch network assembly, configuration and ablation naming."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from .attention import (
    AttentionParams,
    BlockParams,
    ChannelAttnParams,
    cross_branch_attention,
    transformer_block,
)
from .exceptions import ConfigError, ShapeError
from .patch import TokenGrid, embed_tokens, patchify, positional_encoding
from .tensor import Tensor, add, concat, layer_norm, mac_scope, matmul, mean, relu, reshape

BRANCHES = ("short", "long")


@dataclass(frozen=True)
class ModelConfig:
    """Architectural hyper-parameters and ablation toggles.

    The short branch uses the larger patches (fewer tokens), the long branch the
    smaller ones.
    """

    image_size: int = 192
    patch_short: int = 32
    patch_long: int = 16
    embed_dim: int = 256
    window_size: int = 6
    depth: int = 2
    heads: int = 4
    reduction: int = 16
    head_hidden: int = 128
    use_short_branch: bool = True
    use_long_branch: bool = True
    use_spatial: bool = True
    use_channel: bool = True
    use_cross: bool = True
    input_mean: float = 0.5
    input_std: float = 0.25
    seed: int = 0

    def __post_init__(self):
        self.validate()

    @classmethod
    def reduced(cls, **overrides) -> "ModelConfig":
        """Desk-scale configuration used by the tests and quick experiments."""
        base = dict(image_size=64, patch_short=16, patch_long=8, embed_dim=32, window_size=4,
                    depth=1, heads=2, reduction=8, head_hidden=32)
        base.update(overrides)
        return cls(**base)

    def replace(self, **changes) -> "ModelConfig":
        return replace(self, **changes)

    def grid(self, branch: str) -> int:
        return self.image_size // self.patch_size(branch)

    def patch_size(self, branch: str) -> int:
        return self.patch_short if branch == "short" else self.patch_long

    @property
    def branches(self) -> tuple[str, ...]:
        return tuple(b for b in BRANCHES if getattr(self, f"use_{b}_branch"))

    def validate(self):
        ints = ("image_size", "patch_short", "patch_long", "embed_dim", "window_size",
                "heads", "reduction", "head_hidden")
        for name in ints:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if self.depth < 0:
            raise ConfigError("depth must be non-negative")
        if not self.input_std > 0:
            raise ConfigError("input_std must be positive")
        if not (self.use_short_branch or self.use_long_branch):
            raise ConfigError("at least one branch must be enabled")
        if self.use_cross and not (self.use_short_branch and self.use_long_branch):
            raise ConfigError("cross-branch attention needs both branches enabled")
        d = self.embed_dim
        if d % 4:
            raise ConfigError(f"embed_dim {d} must be divisible by 4 (positional encoding)")
        if d % self.heads:
            raise ConfigError(f"embed_dim {d} must be divisible by heads={self.heads}")
        if self.use_channel and d % self.reduction:
            raise ConfigError(f"embed_dim {d} must be divisible by reduction={self.reduction}")
        for b in self.branches:
            p = self.patch_size(b)
            if self.image_size % p:
                raise ConfigError(f"image_size {self.image_size} is not divisible by the "
                                  f"{b}-branch patch size {p}")
            g = self.image_size // p
            if self.use_spatial and self.depth and g % self.window_size:
                raise ConfigError(f"{b}-branch grid {g}x{g} is not divisible by "
                                  f"window_size {self.window_size}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "ModelConfig":
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(values) - set(known)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**values)


@dataclass
class BranchFeatures:
    """Per-branch token grids handed to the consistency losses.

    ``F_*`` are block-stack outputs before cross attention, ``G_*`` the
    cross-attended updates (``None`` without cross attention), and ``E_*`` the
    linear patch projections before positional encoding.
    """

    F_s: TokenGrid | None = None
    F_l: TokenGrid | None = None
    G_s: TokenGrid | None = None
    G_l: TokenGrid | None = None
    E_s: TokenGrid | None = None
    E_l: TokenGrid | None = None


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[tuple[int, ...], str, int]]:
    """Ordered ``name -> (shape, init, fan_in)`` for every parameter of ``config``.

    ``init`` is ``"uniform"`` (bounded by 1/sqrt(fan_in)), ``"zeros"`` or ``"ones"``.
    """
    d, r = config.embed_dim, config.reduction
    spec: dict[str, tuple[tuple[int, ...], str, int]] = {}

    def weight(name, shape, fan_in):
        spec[name] = (shape, "uniform", fan_in)

    def const(name, shape, kind):
        spec[name] = (shape, kind, 0)

    for b in config.branches:
        p = config.patch_size(b)
        pre = f"branch.{b}"
        weight(f"{pre}.embed.W", (3 * p * p, d), 3 * p * p)
        for i in range(config.depth):
            blk = f"{pre}.block{i}"
            if config.use_spatial:
                const(f"{blk}.ln1.gamma", (d,), "ones")
                const(f"{blk}.ln1.beta", (d,), "zeros")
                for w in ("W_q", "W_k", "W_v", "W_o"):
                    weight(f"{blk}.attn.{w}", (d, d), d)
            if config.use_channel:
                weight(f"{blk}.ca.W1", (d // r, d), d)
                const(f"{blk}.ca.b1", (d // r,), "zeros")
                weight(f"{blk}.ca.W2", (d, d // r), d // r)
                const(f"{blk}.ca.b2", (d,), "zeros")
            const(f"{blk}.ln2.gamma", (d,), "ones")
            const(f"{blk}.ln2.beta", (d,), "zeros")
            weight(f"{blk}.mlp.W1", (d, 4 * d), d)
            const(f"{blk}.mlp.b1", (4 * d,), "zeros")
            weight(f"{blk}.mlp.W2", (4 * d, d), 4 * d)
            const(f"{blk}.mlp.b2", (d,), "zeros")
    if config.use_cross:
        for b in BRANCHES:
            const(f"cross.{b}.ln.gamma", (d,), "ones")
            const(f"cross.{b}.ln.beta", (d,), "zeros")
            for w in ("W_q", "W_k", "W_v", "W_o"):
                weight(f"cross.{b}.{w}", (d, d), d)
    fused = d * len(config.branches)
    weight("head.W1", (fused, config.head_hidden), fused)
    const("head.b1", (config.head_hidden,), "zeros")
    weight("head.W2", (config.head_hidden, 1), config.head_hidden)
    const("head.b2", (1,), "zeros")
    return spec


def parameter_count(config: ModelConfig) -> int:
    """Closed-form parameter count.

    Per enabled branch with patch side ``p``: ``3p^2 d`` for the embedding, and per
    block ``4d^2 + 2d`` (window attention + its norm, if spatial), ``2d^2/r + d/r + d``
    (channel gate, if channel) and ``8d^2 + 7d`` (MLP + its norm).  Cross attention
    adds ``8d^2 + 4d``; the head adds ``B d h + 2h + 1`` for ``B`` branches and
    hidden width ``h``.
    """
    d, r, h = config.embed_dim, config.reduction, config.head_hidden
    per_block = 8 * d * d + 7 * d
    if config.use_spatial:
        per_block += 4 * d * d + 2 * d
    if config.use_channel:
        per_block += 2 * d * d // r + d // r + d
    total = 0
    for b in config.branches:
        p = config.patch_size(b)
        total += 3 * p * p * d + config.depth * per_block
    if config.use_cross:
        total += 8 * d * d + 4 * d
    return total + len(config.branches) * d * h + 2 * h + 1


class Model:
    """Parameter store plus configuration; call it on an image to run :func:`forward`."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor],
                 mos_scale: tuple[float, float] = (0.0, 1.0)):
        self.config = config
        self.params = params
        self.mos_scale = (float(mos_scale[0]), float(mos_scale[1]))

    def __call__(self, image):
        return forward(self, image)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self):
        return self.params.items()

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def num_parameters(self) -> int:
        return sum(t.size for t in self.params.values())

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, t in self.params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    def predict(self, image) -> float:
        """Predicted MOS on the model's original score scale."""
        from .tensor import no_grad

        with no_grad():
            mos, _ = forward(self, image)
        lo, hi = self.mos_scale
        return lo + mos.item() * (hi - lo)

    # structured views ----------------------------------------------------
    def attention_params(self, prefix: str) -> AttentionParams:
        p = self.params
        return AttentionParams(p[f"{prefix}.W_q"], p[f"{prefix}.W_k"], p[f"{prefix}.W_v"],
                               p[f"{prefix}.W_o"], heads=self.config.heads)

    def block_params(self, branch: str, index: int) -> BlockParams:
        p, cfg = self.params, self.config
        pre = f"branch.{branch}.block{index}"
        bp = BlockParams(p[f"{pre}.mlp.W1"], p[f"{pre}.mlp.b1"], p[f"{pre}.mlp.W2"],
                         p[f"{pre}.mlp.b2"], p[f"{pre}.ln2.gamma"], p[f"{pre}.ln2.beta"])
        if cfg.use_spatial:
            bp.attn = self.attention_params(f"{pre}.attn")
            bp.ln1_gamma, bp.ln1_beta = p[f"{pre}.ln1.gamma"], p[f"{pre}.ln1.beta"]
        if cfg.use_channel:
            bp.channel = ChannelAttnParams(p[f"{pre}.ca.W1"], p[f"{pre}.ca.b1"],
                                           p[f"{pre}.ca.W2"], p[f"{pre}.ca.b2"])
        return bp


def build_model(config: ModelConfig) -> Model:
    """Initialise every parameter deterministically from ``config.seed``.

    Weights are uniform in ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]``, biases and norm
    shifts are zero and norm gains are one.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    params = {}
    for name, (shape, init, fan_in) in parameter_shapes(config).items():
        if init == "uniform":
            bound = 1.0 / np.sqrt(fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        elif init == "ones":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data, requires_grad=True)
    return Model(config, params)


def _as_image(image) -> Tensor:
    if isinstance(image, Tensor):
        return image
    return Tensor(np.asarray(image, dtype=np.float64))


def forward(model: Model, image) -> tuple[Tensor, BranchFeatures]:
    """Predict a normalised MOS for one ``[3, H, W]`` image.

    Returns the scalar prediction and the branch features used by the losses.
    """
    cfg, p = model.config, model.params
    image = _as_image(image)
    if image.shape != (3, cfg.image_size, cfg.image_size):
        raise ShapeError(f"expected a [3,{cfg.image_size},{cfg.image_size}] image, "
                         f"got {list(image.shape)}")
    # Pixels in [0, 1] carry little variance next to the unit-scale positional
    # code, so they are standardised with fixed constants before patch embedding.
    image = Tensor((image.data - cfg.input_mean) / cfg.input_std)
    feats = BranchFeatures()
    final: dict[str, TokenGrid] = {}
    for b in cfg.branches:
        ps, g = cfg.patch_size(b), cfg.grid(b)
        tag = b[0]
        with mac_scope("patch_embed"):
            proj = embed_tokens(patchify(image, ps), p[f"branch.{b}.embed.W"], None, g, g, ps)
        setattr(feats, f"E_{tag}", proj)
        x = proj.with_tokens(add(proj.tokens, positional_encoding(g, g, cfg.embed_dim)))
        for i in range(cfg.depth):
            x = transformer_block(x, model.block_params(b, i), cfg.window_size,
                                  cfg.use_spatial, cfg.use_channel)
        setattr(feats, f"F_{tag}", x)
        final[b] = x
    if cfg.use_cross:
        with mac_scope("cross_attention"):
            normed = {
                b: final[b].with_tokens(layer_norm(final[b].tokens, p[f"cross.{b}.ln.gamma"],
                                                   p[f"cross.{b}.ln.beta"]))
                for b in BRANCHES
            }
            g_s, g_l = cross_branch_attention(normed["short"], normed["long"],
                                              model.attention_params("cross.short"),
                                              model.attention_params("cross.long"))
        feats.G_s, feats.G_l = g_s, g_l
        final["short"] = final["short"].with_tokens(add(final["short"].tokens, g_s.tokens))
        final["long"] = final["long"].with_tokens(add(final["long"].tokens, g_l.tokens))
    with mac_scope("head"):
        pooled = [reshape(mean(final[b].tokens, axis=0), (1, cfg.embed_dim))
                  for b in cfg.branches]
        fused = pooled[0] if len(pooled) == 1 else concat(pooled, axis=1)
        hidden = relu(add(matmul(fused, p["head.W1"]), p["head.b1"]))
        mos = add(matmul(hidden, p["head.W2"]), p["head.b2"])
    return reshape(mos, ()), feats


ARCH_ROWS = {
    "single-both": "Single Branch both attention",
    "single-spatial": "Single branch Spatial Attention",
    "single-channel": "Single branch Channel Attention",
    "multi-dual": "Multi-branch dual attention (Proposed)",
}

LOSS_ROWS = {
    "l1-only": "L1 Loss Only (Baseline)",
    "l1+cb": "L1 + CB Loss",
    "l1+ap": "L1 + AP Loss",
    "full": "L1 + CB Loss + AP Loss (Full Model)",
}


def validate_ablation(config: ModelConfig, weights=None):
    """Canonical ablation row name for ``config`` (and for ``weights`` if given).

    Architecture rows: ``single-both``, ``single-spatial``, ``single-channel``,
    ``multi-dual``; anything else is ``custom``.  With loss weights the result is
    a ``(architecture, loss_row)`` pair.
    """
    two = config.use_short_branch and config.use_long_branch
    if two and config.use_spatial and config.use_channel and config.use_cross:
        arch = "multi-dual"
    elif not two and not config.use_cross:
        arch = {
            (True, True): "single-both",
            (True, False): "single-spatial",
            (False, True): "single-channel",
        }.get((config.use_spatial, config.use_channel), "custom")
    else:
        arch = "custom"
    if weights is None:
        return arch
    loss = {
        (False, False): "l1-only",
        (True, False): "l1+cb",
        (False, True): "l1+ap",
        (True, True): "full",
    }[(bool(weights.enable_cb), bool(weights.enable_ap))]
    return arch, loss


def table2_configs(base: ModelConfig) -> dict[str, ModelConfig]:
    """Architecture ablation rows; single-branch rows keep the long (finer) branch."""
    single = dict(use_short_branch=False, use_long_branch=True, use_cross=False)
    return {
        "single-both": base.replace(**single, use_spatial=True, use_channel=True),
        "single-spatial": base.replace(**single, use_spatial=True, use_channel=False),
        "single-channel": base.replace(**single, use_spatial=False, use_channel=True),
        "multi-dual": base.replace(use_short_branch=True, use_long_branch=True,
                                   use_spatial=True, use_channel=True, use_cross=True),
    }
