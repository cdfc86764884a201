"""FLOPs accounting, budget bins and resource-constrained sampling.

Blocks, embedding and head count one multiply-accumulate as one FLOP, the
convention under which a ViT block costs ``12*N*D**2 + 2*N**2*D``. A crossing
(the 1x1 stitching projection) is charged ``2*N*D_in*D_out``; it can be turned
off with ``count_crossing_flops=False``.
"""
import math
from dataclasses import dataclass
from fractions import Fraction

from .stitching import LARGE, SMALL


def block_flops(seq_len, width, mlp_ratio=4.0):
    """qkv + proj + MLP projections and the two attention products of one block."""
    n, d = seq_len, width
    return (4 + 2 * mlp_ratio) * n * d * d + 2 * n * n * d


@dataclass(frozen=True)
class CostModel:
    small: object
    large: object
    count_crossing_flops: bool = True

    def __post_init__(self):
        if self.small.seq_len != self.large.seq_len:
            raise ValueError("anchors must share seq_len")

    @property
    def seq_len(self):
        return self.small.seq_len

    def spec(self, anchor):
        return self.small if anchor == SMALL else self.large

    def block(self, anchor):
        s = self.spec(anchor)
        return block_flops(self.seq_len, s.width, s.mlp_ratio)

    def embed(self, anchor):
        s = self.spec(anchor)
        return self.seq_len * s.patch_dim * s.width

    def head(self, anchor):
        s = self.spec(anchor)
        return s.width * s.num_classes

    def crossing(self, crossing):
        if not self.count_crossing_flops:
            return 0.0
        return 2 * self.seq_len * self.small.width * self.large.width

    def backbone(self, anchor):
        """Block FLOPs of a whole anchor, excluding embedding and head."""
        return self.spec(anchor).depth * self.block(anchor)


def flops_of(config, cost):
    total = cost.embed(config.segments[0].anchor) + cost.head(config.head_anchor)
    for seg in config.segments:
        total += (seg.stop - seg.start) * cost.block(seg.anchor)
    for c in config.crossings:
        total += cost.crossing(c)
    return float(total)


def params_of(config, space):
    """Parameter count of a route with any low-rank update merged into ``M``."""
    small, large = space.small, space.large
    per_block = {}
    for which, s in ((SMALL, small), (LARGE, large)):
        d, h = s.width, s.hidden
        per_block[which] = 4 * d + (3 * d * d + 3 * d) + (d * d + d) + (d * h + h) + (h * d + d)
    first = space.spec(config.segments[0].anchor)
    last = space.spec(config.head_anchor)
    total = first.patch_dim * first.width + first.width
    total += 2 * last.width + last.width * last.num_classes + last.num_classes
    for seg in config.segments:
        total += (seg.stop - seg.start) * per_block[seg.anchor]
    total += len(config.crossings) * small.width * large.width
    return total


def auto_step(space, cost):
    """Step equal to the FLOPs of swapping one small block for its large counterparts.

    Two-way routes differ from the small anchor by whole such swaps, so this
    step gives one bin per swap count (``small.depth + 1`` bins) as long as
    crossing costs stay well below half a step.
    """
    return (cost.backbone(LARGE) - cost.backbone(SMALL)) / space.small.depth


@dataclass(frozen=True)
class Bin:
    index: int
    tau0: float
    members: tuple


class BudgetDistribution:
    """Stitches grouped by rounded FLOPs, with exact probabilities ``count / E``."""

    def __init__(self, step, bins, total):
        self.step = step
        self.bins = bins
        self.total = total
        self._bin_of = {cid: b for b in bins for cid in b.members}

    def __len__(self):
        return len(self.bins)

    def probabilities(self):
        return [Fraction(len(b.members), self.total) for b in self.bins]

    def bin_of(self, config_id):
        return self._bin_of[config_id]

    def ros_probability(self, config_id):
        """Marginal chance that ROS draws ``config_id``."""
        return Fraction(1, len(self.bins) * len(self.bin_of(config_id).members))

    def uniform_probability(self, config_id):
        if config_id not in self._bin_of:
            raise KeyError(config_id)
        return Fraction(1, self.total)


def round_half_up(value, step):
    return math.floor(value / step + 0.5)


def build_distribution(space, cost, step):
    if not step > 0:
        raise ValueError("step must be positive")
    groups = {}
    for cid, config in enumerate(space.configs):
        k = round_half_up(flops_of(config, cost), step)
        groups.setdefault(k, []).append(cid)
    bins = [Bin(k, k * step, tuple(groups[k])) for k in sorted(groups)]
    return BudgetDistribution(step, bins, len(space.configs))


def ros_sample(dist, rng):
    """Two-stage draw: a budget bin uniformly over occupied bins, then a member uniformly.
    Returns the config id."""
    if not dist.bins:
        raise ValueError("empty distribution")
    b = dist.bins[int(rng.integers(len(dist.bins)))]
    return b.members[int(rng.integers(len(b.members)))]


def uniform_sample(space, rng):
    """Config id drawn uniformly over the whole space."""
    return int(rng.integers(len(space.configs)))
