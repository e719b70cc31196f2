"""Composite segmentation blocks: the multi-resolution conv block in its
three variants, the residual skip path, and the block width calculator.

Builders append layers to a model graph (see ``mrunet.model``) and return
the name of the block's output layer.
"""

from __future__ import annotations

from dataclasses import dataclass

# Filter-count split across the three chained 3x3 convs. The multipliers
# are applied to W = alpha*U and floored; they are deliberately decimal
# approximations of 1/6, 1/3, 1/2 so that the widths stay consistent with
# the published per-block filter tables at every level (exact thirds round
# differently at W = 855.04).
WIDTH_SPLIT = (0.167, 0.333, 0.5)

BLOCK_VARIANTS = ("inception_parallel", "factorized_sequence", "multires")


class InvalidWidthError(ValueError):
    """Width computation produced a zero-filter conv."""


class InvalidLevelError(ValueError):
    """Skip-path level outside 1..4."""


@dataclass(frozen=True)
class BlockWidths:
    """Filter counts of one multi-resolution block.

    w1 <= w2 <= w3 are the three chained 3x3 conv widths; the 1x1 residual
    conv uses w_res = w1 + w2 + w3 so the residual branch matches the
    concatenated channel count exactly.
    """

    u: int
    alpha: float
    w1: int
    w2: int
    w3: int

    @property
    def w_res(self) -> int:
        return self.w1 + self.w2 + self.w3


def compute_block_widths(u: int, alpha: float) -> BlockWidths:
    if u < 6:
        raise InvalidWidthError(f"base filter count {u} too small (need >= 6)")
    if alpha <= 0:
        raise InvalidWidthError(f"alpha must be positive, got {alpha}")
    w = alpha * u
    w1, w2, w3 = (int(w * m) for m in WIDTH_SPLIT)
    if w1 < 1:
        raise InvalidWidthError(f"width budget {w:.2f} yields a zero-filter conv")
    return BlockWidths(u=u, alpha=alpha, w1=w1, w2=w2, w3=w3)


def _conv_bn_relu(g, parent: str, filters: int, kernel_size: int, prefix: str) -> str:
    c = g.add_conv(parent, filters, kernel_size, name=f"{prefix}.conv")
    b = g.add_batchnorm(c, name=f"{prefix}.bn")
    return g.add_relu(b, name=f"{prefix}.relu")


def add_multires_block(g, parent: str, widths: BlockWidths,
                       variant: str = "multires", name: str = "block") -> str:
    """Append one multi-resolution block and return its output layer name.

    multires: three chained 3x3 convs (w1, w2, w3 filters), their outputs
    concatenated and summed with a 1x1 residual projection of the block
    input, then batchnorm and ReLU. Output channels = w_res.

    inception_parallel: parallel 3x3/5x5/7x7 convs on the input, outputs
    concatenated. factorized_sequence: three chained 3x3 convs of equal
    width with all three taps concatenated. Both use w_res//3 filters per
    branch so the ablations stay channel-comparable.
    """
    if variant not in BLOCK_VARIANTS:
        raise ValueError(f"unknown block variant {variant!r}")
    if variant == "multires":
        shortcut = g.add_conv(parent, widths.w_res, 1, name=f"{name}.shortcut")
        shortcut = g.add_batchnorm(shortcut, name=f"{name}.shortcut_bn")
        a = _conv_bn_relu(g, parent, widths.w1, 3, f"{name}.c1")
        b = _conv_bn_relu(g, a, widths.w2, 3, f"{name}.c2")
        c = _conv_bn_relu(g, b, widths.w3, 3, f"{name}.c3")
        cat = g.add_concat(a, b, name=f"{name}.cat12")
        cat = g.add_concat(cat, c, name=f"{name}.cat")
        total = g.add_add(cat, shortcut, name=f"{name}.add")
        total = g.add_batchnorm(total, name=f"{name}.bn")
        return g.add_relu(total, name=f"{name}.relu")

    nf = widths.w_res // 3
    if nf < 1:
        raise InvalidWidthError("variant branches need at least one filter")
    if variant == "inception_parallel":
        b3 = _conv_bn_relu(g, parent, nf, 3, f"{name}.k3")
        b5 = _conv_bn_relu(g, parent, nf, 5, f"{name}.k5")
        b7 = _conv_bn_relu(g, parent, nf, 7, f"{name}.k7")
        cat = g.add_concat(b3, b5, name=f"{name}.cat35")
        return g.add_concat(cat, b7, name=f"{name}.cat")
    # factorized_sequence: the taps of a 3x3 chain stand in for the 5x5 and
    # 7x7 receptive fields.
    t1 = _conv_bn_relu(g, parent, nf, 3, f"{name}.t1")
    t2 = _conv_bn_relu(g, t1, nf, 3, f"{name}.t2")
    t3 = _conv_bn_relu(g, t2, nf, 3, f"{name}.t3")
    cat = g.add_concat(t1, t2, name=f"{name}.cat12")
    return g.add_concat(cat, t3, name=f"{name}.cat")


def res_path_filters(level: int, base_filters: int = 32) -> int:
    return base_filters * 2 ** (level - 1)


def add_res_path(g, parent: str, level: int, name: str = "respath",
                 base_filters: int = 32) -> str:
    """Append the residual skip path for one encoder level.

    Level L uses 5-L sub-blocks of base_filters*2^(L-1) filters each; every
    sub-block sums a 3x3 conv with a 1x1 conv of its input, then applies
    batchnorm and ReLU.
    """
    if level not in (1, 2, 3, 4):
        raise InvalidLevelError(f"level must be in 1..4, got {level}")
    f = res_path_filters(level, base_filters)
    cur = parent
    for i in range(1, 5 - level + 1):
        c3 = g.add_conv(cur, f, 3, name=f"{name}.blk{i}.conv3")
        c1 = g.add_conv(cur, f, 1, name=f"{name}.blk{i}.conv1")
        s = g.add_add(c3, c1, name=f"{name}.blk{i}.add")
        b = g.add_batchnorm(s, name=f"{name}.blk{i}.bn")
        cur = g.add_relu(b, name=f"{name}.blk{i}.relu")
    return cur
