"""
Dual-length hybrid patch.

Patch tokens are shuffled, cut into one half-length and two quarter-length
groups, each prefixed with the shared class token and refined by the
encoder's own final block. The final feature is

    [ F_ori | F'_loc1 | F'_loc2 | F'_loc3 ]

with segment k occupying columns [k * shared_dim, (k + 1) * shared_dim).
"""

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import torch
import torch.nn.functional as F

from app.core.encoders import ImageEncoder
from app.core.errors import ConfigurationError, ContractError

NUM_LOCALS = 3
NUM_SEGMENTS = 1 + NUM_LOCALS

Seed = Union[int, torch.Generator, None]


@dataclass(frozen=True)
class DHPGroups:
    """
    Patch permutation and its three index groups.

    Indices are 1-based token positions (0 is the class token). perm may be
    [N] for a single image or [B, N] for per-sample permutations.
    """

    perm: torch.Tensor

    @property
    def num_patches(self) -> int:
        return self.perm.shape[-1]

    @property
    def g1(self) -> torch.Tensor:
        return self.perm[..., : self.num_patches // 2]

    @property
    def g2(self) -> torch.Tensor:
        n = self.num_patches
        return self.perm[..., n // 2 : n // 2 + n // 4]

    @property
    def g3(self) -> torch.Tensor:
        n = self.num_patches
        return self.perm[..., n // 2 + n // 4 :]

    def groups(self) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        return self.g1, self.g2, self.g3


def check_patch_count(n: int) -> None:
    if n < 4 or n % 4 != 0:
        raise ConfigurationError(f"patch count {n} must be >= 4 and divisible by 4")


def _generator(seed: Seed) -> Optional[torch.Generator]:
    if seed is None or isinstance(seed, torch.Generator):
        return seed
    gen = torch.Generator()
    gen.manual_seed(int(seed))
    return gen


def shuffle_partition(n: int, seed: Seed = None, shuffle: bool = True) -> DHPGroups:
    """
    Draw a uniform permutation of 1..n and split it N/2, N/4, N/4.

    Args:
        n: patch count N
        seed: integer seed or torch.Generator
        shuffle: False gives the identity permutation

    Raises:
        ConfigurationError: n not divisible by 4
    """
    check_patch_count(n)
    if not shuffle:
        return DHPGroups(perm=torch.arange(1, n + 1))
    return DHPGroups(perm=torch.randperm(n, generator=_generator(seed)) + 1)


def batch_partition(
    batch_size: int,
    n: int,
    seed: Seed = None,
    shuffle: bool = True,
) -> DHPGroups:
    """Independent permutations for every sample of a batch, perm [B, N]."""
    check_patch_count(n)
    if not shuffle:
        return DHPGroups(perm=torch.arange(1, n + 1).expand(batch_size, n).clone())
    gen = _generator(seed)
    return DHPGroups(
        perm=torch.stack([torch.randperm(n, generator=gen) for _ in range(batch_size)]) + 1
    )


def seeded_partition(seeds: Sequence[int], n: int, shuffle: bool = True) -> DHPGroups:
    """Per-sample permutations, sample i drawn from its own seed."""
    check_patch_count(n)
    if not shuffle:
        return batch_partition(len(seeds), n, shuffle=False)
    return DHPGroups(perm=torch.stack([shuffle_partition(n, s).perm for s in seeds]))


def _gather(tokens: torch.Tensor, index: torch.Tensor) -> torch.Tensor:
    if index.dim() == 1:
        return tokens[..., index, :]
    idx = index.to(tokens.device).unsqueeze(-1).expand(-1, -1, tokens.shape[-1])
    return torch.gather(tokens, 1, idx)


def group_features(tokens: torch.Tensor, groups: DHPGroups) -> List[torch.Tensor]:
    """
    Build the three grouped sequences [t0] ++ tokens[g].

    Args:
        tokens: [1+N, D] or [B, 1+N, D]
        groups: partition over the N patch positions

    Returns:
        Sequences of lengths 1+N/2, 1+N/4, 1+N/4
    """
    if tokens.shape[-2] != groups.num_patches + 1:
        raise ContractError(
            f"{tokens.shape[-2]} tokens do not match a partition of {groups.num_patches} patches"
        )
    if groups.perm.dim() == 2 and (tokens.dim() != 3 or tokens.shape[0] != groups.perm.shape[0]):
        raise ContractError("per-sample partition needs a batch of matching size")
    cls = tokens[..., :1, :]
    return [torch.cat([cls, _gather(tokens, g)], dim=-2) for g in groups.groups()]


def dhp_forward(
    tokens: torch.Tensor,
    groups: DHPGroups,
    encoder: ImageEncoder,
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """
    Refine each group with the encoder's final block.

    Args:
        tokens: tokens entering the final block, [1+N, D] or [B, 1+N, D]
        groups: patch partition
        encoder: image encoder whose last block and projection are reused

    Returns:
        (F'_loc1, F'_loc2, F'_loc3), each [shared_dim] or [B, shared_dim]
    """
    return tuple(
        encoder.project(encoder.refine_last_block(seq)) for seq in group_features(tokens, groups)
    )


def final_feature(f_ori: torch.Tensor, locals_: Sequence[torch.Tensor]) -> torch.Tensor:
    """Concatenate (F_ori, F'_loc1, F'_loc2, F'_loc3) along the last axis."""
    if len(locals_) != NUM_LOCALS:
        raise ContractError(f"expected {NUM_LOCALS} local features, got {len(locals_)}")
    for loc in locals_:
        if loc.shape != f_ori.shape:
            raise ContractError(f"local shape {tuple(loc.shape)} != F_ori shape {tuple(f_ori.shape)}")
    return torch.cat([f_ori, *locals_], dim=-1)


def segment(feature: torch.Tensor, index: int, shared_dim: int) -> torch.Tensor:
    """Segment index of a final feature (0 is F_ori)."""
    return feature[..., index * shared_dim : (index + 1) * shared_dim]


def retrieval_feature(feature: torch.Tensor) -> torch.Tensor:
    """l2-normalised final feature used for cosine distance."""
    return F.normalize(feature, dim=-1)
