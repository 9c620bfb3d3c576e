"""
Input-diversity transformations: local shuffle, global shuffle, multi-scale
resize and L-inf neighbor sampling.

Block permutations follow one convention everywhere: blocks are indexed
row-major and output block i is input block perm[i]. All transforms are built
from differentiable torch ops and never mutate their input.
"""

from functools import partial
from typing import Callable, List, Sequence, Tuple

import torch
import torch.nn.functional as F

from lssa_lab.config import SampleConfig, ShuffleConfig, coerce
from lssa_lab.errors import ConfigError, InvalidPermutationError, ShapeMismatchError

QUADRANTS = ("top_left", "top_right", "bottom_left", "bottom_right")
MIN_RESIZE_SIDE = 4

Transform = Callable[[torch.Tensor], torch.Tensor]


def _as_grid(v) -> torch.Tensor:
    v = torch.as_tensor(v)
    if v.dim() == 2:
        v = v.unsqueeze(0)
    if v.dim() != 3:
        raise ShapeMismatchError(f"expected a CxHxW grid, got shape {tuple(v.shape)}")
    return v


def check_permutation(perm: Sequence[int], n: int) -> Tuple[int, ...]:
    try:
        out = tuple(int(p) for p in perm)
    except (TypeError, ValueError):
        raise InvalidPermutationError(f"permutation must be a sequence of ints, got {perm!r}") from None
    if sorted(out) != list(range(n)):
        raise InvalidPermutationError(f"{list(out)} is not a permutation of 0..{n - 1}")
    return out


def inverse_permutation(perm: Sequence[int]) -> Tuple[int, ...]:
    perm = check_permutation(perm, len(perm))
    inv = [0] * len(perm)
    for i, p in enumerate(perm):
        inv[p] = i
    return tuple(inv)


def block_permute(v, rows: int, cols: int, perm: Sequence[int]) -> torch.Tensor:
    """split v into rows x cols blocks and reassemble them in perm order"""
    v = _as_grid(v)
    c, h, w = v.shape
    if rows < 1 or cols < 1 or h % rows or w % cols:
        raise ShapeMismatchError(f"{h}x{w} grid is not divisible into {rows}x{cols} blocks")
    perm = check_permutation(perm, rows * cols)
    bh, bw = h // rows, w // cols
    blocks = v.reshape(c, rows, bh, cols, bw).permute(1, 3, 0, 2, 4).reshape(rows * cols, c, bh, bw)
    blocks = blocks[list(perm)]
    return blocks.reshape(rows, cols, c, bh, bw).permute(2, 0, 3, 1, 4).reshape(c, h, w)


# ---------------------------
# Shuffles
# ---------------------------
def local_shuffle(v, quadrant: int, perm: Sequence[int]) -> torch.Tensor:
    """permute the four h/4 x w/4 subblocks of one h/2 x w/2 quadrant; pixels outside it are untouched"""
    v = _as_grid(v)
    _, h, w = v.shape
    if h % 4 or w % 4:
        raise ShapeMismatchError(f"local shuffle needs H and W divisible by 4, got {h}x{w}")
    if quadrant not in range(4):
        raise ConfigError(f"quadrant must be 0..3, got {quadrant}", code="invalid_quadrant")
    perm = check_permutation(perm, 4)

    qr, qc = divmod(quadrant, 2)
    h2, w2 = h // 2, w // 2
    out = v.clone()
    region = v[:, qr * h2 : (qr + 1) * h2, qc * w2 : (qc + 1) * w2]
    out[:, qr * h2 : (qr + 1) * h2, qc * w2 : (qc + 1) * w2] = block_permute(region, 2, 2, perm)
    return out


def global_shuffle(v, grid: Tuple[int, int], perm: Sequence[int]) -> torch.Tensor:
    rows, cols = grid
    return block_permute(v, rows, cols, perm)


def _draw_quadrant(cfg: ShuffleConfig, rng: torch.Generator) -> int:
    if cfg.position_mode == "random":
        return int(torch.randint(0, 4, (1,), generator=rng))
    return QUADRANTS.index(cfg.position_mode)


def draw_shuffle_plan(cfg, rng: torch.Generator, kind: str = "local") -> List[Tuple[int, Tuple[int, ...]]]:
    """N (quadrant, perm) draws; quadrant is -1 for global shuffles"""
    cfg = coerce(ShuffleConfig, cfg)
    plan = []
    for _ in range(cfg.N):
        if kind == "local":
            quadrant = _draw_quadrant(cfg, rng)
            perm = torch.randperm(4, generator=rng).tolist()
        elif kind == "global":
            quadrant = -1
            perm = torch.randperm(cfg.grid[0] * cfg.grid[1], generator=rng).tolist()
        else:
            raise ConfigError(f"unknown shuffle kind '{kind}' (local|global)")
        plan.append((quadrant, tuple(perm)))
    return plan


def shuffle_transform(cfg: ShuffleConfig, quadrant: int, perm: Tuple[int, ...]) -> Transform:
    if quadrant < 0:
        return partial(global_shuffle, grid=cfg.grid, perm=perm)
    return partial(local_shuffle, quadrant=quadrant, perm=perm)


def draw_shuffled_batch(v, cfg, rng: torch.Generator, kind: str = "local") -> List[torch.Tensor]:
    cfg = coerce(ShuffleConfig, cfg)
    return [shuffle_transform(cfg, q, p)(v) for q, p in draw_shuffle_plan(cfg, rng, kind)]


# ---------------------------
# Resize
# ---------------------------
def resize_round_trip(v, scale: float) -> torch.Tensor:
    """bilinear resample to (scale*H, scale*W) and back to (H, W)"""
    v = _as_grid(v)
    _, h, w = v.shape
    if scale <= 0:
        raise ConfigError(f"resize scale must be > 0, got {scale}")
    size = (int(scale * h), int(scale * w))
    if min(size) < MIN_RESIZE_SIDE:
        raise ShapeMismatchError(f"scale {scale} gives a {size[0]}x{size[1]} image (< {MIN_RESIZE_SIDE} px)")
    x = F.interpolate(v.unsqueeze(0), size=size, mode="bilinear", align_corners=False)
    return F.interpolate(x, size=(h, w), mode="bilinear", align_corners=False)[0]


def resize_set(v, scales: Sequence[float]) -> List[torch.Tensor]:
    return [resize_round_trip(v, s) for s in scales]


def _compose(first: Transform, second: Transform) -> Transform:
    return lambda x: second(first(x))


def copy_transforms(cfg, rng: torch.Generator, kind: str = "local") -> List[Transform]:
    """
    Per-iteration copy set for the image attack. With resize on, every shuffle draw is
    paired with every scale (N x S copies); N=0 leaves the resize set of the iterate itself.
    """
    cfg = coerce(ShuffleConfig, cfg)
    shuffles = [shuffle_transform(cfg, q, p) for q, p in draw_shuffle_plan(cfg, rng, kind)]
    if not cfg.resize:
        return shuffles
    resizes = [partial(resize_round_trip, scale=s) for s in cfg.scales]
    if not shuffles:
        return resizes
    if cfg.order == "shuffle_then_resize":
        return [_compose(sh, rs) for sh in shuffles for rs in resizes]
    return [_compose(rs, sh) for sh in shuffles for rs in resizes]


# ---------------------------
# Neighbor sampling
# ---------------------------
def sample_neighbors(v_adv, cfg, rng: torch.Generator) -> List[torch.Tensor]:
    """M draws of clamp(v_adv + u), u ~ Uniform(-eps0, eps0) per pixel"""
    cfg = coerce(SampleConfig, cfg)
    v_adv = torch.as_tensor(v_adv)
    if cfg.M == 0:
        return []
    u = torch.rand((cfg.M,) + tuple(v_adv.shape), generator=rng, dtype=torch.float64)
    u = (u * 2.0 - 1.0) * cfg.eps0
    batch = torch.clamp(v_adv.to(torch.float64).unsqueeze(0) + u, 0.0, 1.0).to(v_adv.dtype)
    return list(batch.unbind(0))
