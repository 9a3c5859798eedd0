"""
Identity-balanced P x K batch sampling.
"""

from typing import Dict, Iterator, List, Union

import numpy as np

from app.core.errors import ConfigurationError
from app.data.dataset import TrainingView

RandomSource = Union[int, np.random.Generator]


def _rng(source: RandomSource) -> np.random.Generator:
    return source if isinstance(source, np.random.Generator) else np.random.default_rng(source)


def balanced_batches(
    view: TrainingView,
    ids_per_batch: int,
    images_per_id: int,
    rng: RandomSource,
) -> Iterator[List[int]]:
    """
    One epoch of P x K batches.

    Identities are visited in a random order, P at a time; a short final
    group is topped up with other identities, so every identity appears at
    least once per epoch. Identities with fewer than K images are sampled
    with replacement.

    Args:
        view: training samples
        ids_per_batch: P
        images_per_id: K
        rng: seed or numpy Generator (advanced in place)

    Yields:
        Lists of P * K sample indices, grouped by identity

    Raises:
        ConfigurationError: fewer than P identities
    """
    by_id: Dict[int, List[int]] = view.indices_by_identity()
    if len(by_id) < ids_per_batch:
        raise ConfigurationError(
            f"{len(by_id)} identities cannot fill batches of {ids_per_batch} identities"
        )
    gen = _rng(rng)
    order = [int(i) for i in gen.permutation(sorted(by_id))]

    for start in range(0, len(order), ids_per_batch):
        group = order[start : start + ids_per_batch]
        if len(group) < ids_per_batch:
            others = [i for i in order if i not in group]
            extra = gen.choice(others, size=ids_per_batch - len(group), replace=False)
            group = group + [int(i) for i in extra]
        batch: List[int] = []
        for identity in group:
            pool = by_id[identity]
            picks = gen.choice(pool, size=images_per_id, replace=len(pool) < images_per_id)
            batch.extend(int(i) for i in picks)
        yield batch


def shuffled_batches(num_samples: int, batch_size: int, rng: RandomSource) -> Iterator[List[int]]:
    """Plain shuffled batches covering every index once; the last may be short."""
    order = _rng(rng).permutation(num_samples)
    for start in range(0, num_samples, batch_size):
        yield [int(i) for i in order[start : start + batch_size]]
